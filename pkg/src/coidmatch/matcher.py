"""Masked graph-matching pipeline.

Combines three similarity cues between two scene graphs: dot products
of attentional node embeddings, a learned penalty from a neighborhood
consensus test (transporting random node features through the current
assignment and through the other graph's structure must agree when the
assignment is right), and a position-consistency prior from reciprocal
world-frame distances.  Rows of the SoftMax assignment whose
distribution is near-uniform are treated as non-covisible and removed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gnn import GnnConfig, attention_inputs, embed
from .graph_build import SceneGraph
from .numerics import (
    ParamStore,
    Tensor,
    add,
    dropout,
    glorot_uniform,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    rows_l2norm,
    scale,
    softmax_rows,
    stream,
    sub,
    transpose,
)

GPS_EPS = 1e-6  # meters; floors the reciprocal-distance mask at 1e6


@dataclass(frozen=True)
class ConsensusConfig:
    """Settings for the consensus refinement of the similarity matrix."""

    rand_dim: int = 32
    steps: int = 1
    gnn: GnnConfig = field(default_factory=lambda: GnnConfig(input_dim=32, dropout=0.0))
    mlp_hidden: int = 16
    mlp_dropout: float = 0.2

    def __post_init__(self):
        if self.rand_dim < 1 or self.steps < 0:
            raise ValueError("rand_dim must be >= 1 and steps >= 0")
        if self.gnn.input_dim != self.rand_dim:
            raise ValueError(
                f"consensus GNN input dim {self.gnn.input_dim} != rand_dim {self.rand_dim}")


@dataclass(frozen=True)
class MatcherConfig:
    gnn: GnnConfig = field(default_factory=GnnConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    use_gps: bool = True
    theta: float = 0.13
    mutual: bool = False
    raw_score_stats: bool = False  # threshold raw S rows instead of SoftMax rows


def default_matcher_config(feature_dim: int = 64, use_gps: bool = True,
                           heads: int = 4, head_channels: int = 32,
                           rand_dim: int = 32) -> MatcherConfig:
    return MatcherConfig(
        gnn=GnnConfig(input_dim=feature_dim, heads=heads, head_channels=head_channels),
        consensus=ConsensusConfig(
            rand_dim=rand_dim,
            gnn=GnnConfig(input_dim=rand_dim, heads=heads,
                          head_channels=head_channels, dropout=0.0),
        ),
        use_gps=use_gps,
    )


def init_model_params(cfg: MatcherConfig, seed: int) -> ParamStore:
    """Fresh trainable weights: embedding GNN, consensus GNN, refinement MLP."""
    from .gnn import init_gnn_params

    store = ParamStore()
    init_gnn_params(store, "emb", cfg.gnn, seed)
    init_gnn_params(store, "cons", cfg.consensus.gnn, seed)
    h = cfg.consensus.mlp_hidden
    store.add("phi.W1", glorot_uniform(stream(seed, "init", "phi.W1"), (1, h)))
    store.add("phi.b1", np.zeros(h))
    store.add("phi.W2", glorot_uniform(stream(seed, "init", "phi.W2"), (h, 1)))
    store.add("phi.b2", np.zeros(1))
    return store


@dataclass
class GraphInputs:
    """Param-independent per-graph constants, precomputed once."""

    x: Tensor
    mask: np.ndarray
    a_std: np.ndarray
    world: np.ndarray
    n: int


def prepare_graph(graph: SceneGraph) -> GraphInputs:
    mask, a_std = attention_inputs(graph)
    return GraphInputs(x=Tensor(graph.features), mask=mask, a_std=a_std,
                       world=graph.world_positions, n=graph.n_nodes)


# --------------------------------------------------------------- operations


def similarity(ha: Tensor, hb: Tensor) -> Tensor:
    """Pairwise dot products of embedding rows, (n, n')."""
    if ha.shape[-1] != hb.shape[-1]:
        raise ValueError(
            f"embedding widths differ: {ha.shape} vs {hb.shape}")
    return matmul(ha, transpose(hb))


def consensus(s_op, a: GraphInputs, b: GraphInputs, store: ParamStore,
              cfg: ConsensusConfig, u: np.ndarray, train: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
    """Consensus difference matrix D, shape (n, n').

    ``s_op`` is the transport operator (any (n, n') matrix or Tensor;
    the training pipeline passes the row-SoftMax of the current score).
    Random features ``u`` on graph A are pushed through A's structure
    then transported, and transported first then pushed through B's
    structure; per-node disagreement norms broadcast over rows of D.
    Identical (isomorphic) graphs under the right permutation give
    exactly D = 0.
    """
    s_op = s_op if isinstance(s_op, Tensor) else Tensor(s_op)
    ut = Tensor(u)
    ga = embed(ut, a.mask, a.a_std, store, "cons", cfg.gnn, train=train, rng=rng)
    ub = matmul(transpose(s_op), ut)
    gb = embed(ub, b.mask, b.a_std, store, "cons", cfg.gnn, train=train, rng=rng)
    delta = sub(matmul(transpose(s_op), ga.H), gb.H)          # (n', c)
    dcol = scale(rows_l2norm(delta), 1.0 / math.sqrt(cfg.gnn.output_dim))
    ones = Tensor(np.ones((a.n, 1)))
    return matmul(ones, transpose(dcol))                      # (n, n')


def apply_phi(d: Tensor, store: ParamStore, train: bool = False,
              rng: np.random.Generator | None = None,
              p_drop: float = 0.2) -> Tensor:
    """Per-entry two-layer MLP (1 -> hidden -> 1) over the D matrix."""
    n, m = d.shape
    flat = reshape(d, (n * m, 1))
    h = relu(add(matmul(flat, store["phi.W1"]), store["phi.b1"]))
    h = dropout(h, p_drop, train, rng)
    out = add(matmul(h, store["phi.W2"]), store["phi.b2"])
    out = dropout(out, p_drop, train, rng)
    return reshape(out, (n, m))


def refine(s: Tensor, d: Tensor, store: ParamStore, train: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    """One consensus refinement: S <- S + phi(D)."""
    return add(s, apply_phi(d, store, train=train, rng=rng))


def gps_mask(world_a: np.ndarray, world_b: np.ndarray) -> np.ndarray:
    """Reciprocal world-frame distances, G[i, j] = 1 / (|p_i - p'_j| + eps)."""
    world_a = np.asarray(world_a, dtype=np.float64).reshape(-1, 3)
    world_b = np.asarray(world_b, dtype=np.float64).reshape(-1, 3)
    if not (np.all(np.isfinite(world_a)) and np.all(np.isfinite(world_b))):
        raise ValueError("non-finite positions")
    diff = world_a[:, None, :] - world_b[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return 1.0 / (dist + GPS_EPS)


def combine(s0, phi_d, g=None):
    """Elementwise sum of the similarity terms; ``g=None`` realizes the
    no-GPS ablation."""
    s0 = s0 if isinstance(s0, Tensor) else Tensor(s0)
    if s0.shape != phi_d.shape or (g is not None and np.shape(g) != s0.shape):
        raise ValueError(
            f"similarity terms disagree in shape: {s0.shape}, {phi_d.shape}"
            + (f", {np.shape(g)}" if g is not None else ""))
    out = add(s0, phi_d)
    if g is not None:
        out = add(out, g if isinstance(g, Tensor) else Tensor(g))
    return out


def assign(s: np.ndarray) -> np.ndarray:
    """Row-wise SoftMax of the similarity matrix."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        return np.zeros(s.shape)
    shifted = s - s.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_scores(y: np.ndarray) -> np.ndarray:
    """Population standard deviation of each row (confidence score)."""
    if y.shape[1] == 0:
        return np.zeros(y.shape[0])
    return y.std(axis=1)


def filter_noncovisible(y: np.ndarray, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero out rows whose score spread falls below ``theta``.

    Returns (kept mask, masked copy of y).  A near-uniform row means no
    candidate stands out, the signature of a node the other agent never
    saw.
    """
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    std = row_scores(y)
    kept = std >= theta
    return kept, np.where(kept[:, None], y, 0.0)


def extract_pairs(y_masked: np.ndarray, kept: np.ndarray,
                  mutual: bool = False) -> list[tuple[int, int]]:
    """Row-argmax correspondences for kept rows; ties go to the lowest j.

    ``mutual=True`` additionally requires i to be the argmax of column j.
    """
    if y_masked.shape[1] == 0:
        return []
    arg = np.argmax(y_masked, axis=1)
    pairs = [(int(i), int(arg[i])) for i in np.nonzero(kept)[0]]
    if mutual:
        col_arg = np.argmax(y_masked, axis=0)
        pairs = [(i, j) for i, j in pairs if int(col_arg[j]) == i]
    return pairs


@dataclass
class MatchResult:
    """Everything the matcher produced for one pair of views."""

    S: np.ndarray
    Y: np.ndarray
    row_std: np.ndarray
    kept: np.ndarray
    pairs: list[tuple[int, int]]
    D: np.ndarray | None
    G: np.ndarray | None

    def to_json(self) -> dict:
        return {
            "S": self.S.tolist(),
            "Y": self.Y.tolist(),
            "row_std": self.row_std.tolist(),
            "kept": [bool(k) for k in self.kept],
            "pairs": [[int(i), int(j)] for i, j in self.pairs],
            "D": None if self.D is None else self.D.tolist(),
            "G": None if self.G is None else self.G.tolist(),
        }


class MatchPipeline:
    """Binds trained weights and configuration to the matching operations."""

    def __init__(self, store: ParamStore, cfg: MatcherConfig):
        self.store = store
        self.cfg = cfg

    def forward_similarity(self, a: GraphInputs, b: GraphInputs,
                           train: bool = False,
                           rng: np.random.Generator | None = None,
                           u_rng: np.random.Generator | None = None):
        """Combined similarity S as a Tensor, plus the last D (or None).

        ``rng`` feeds dropout, ``u_rng`` the consensus random features;
        U is resampled on every refinement step.
        """
        emb_a = embed(a.x, a.mask, a.a_std, self.store, "emb",
                      self.cfg.gnn, train=train, rng=rng)
        emb_b = embed(b.x, b.mask, b.a_std, self.store, "emb",
                      self.cfg.gnn, train=train, rng=rng)
        s = similarity(emb_a.H, emb_b.H)
        last_d = None
        for _ in range(self.cfg.consensus.steps):
            s_op = softmax_rows(s)
            u = u_rng.standard_normal((a.n, self.cfg.consensus.rand_dim))
            d = consensus(s_op, a, b, self.store, self.cfg.consensus, u,
                          train=train, rng=rng)
            s = refine(s, d, self.store, train=train, rng=rng)
            last_d = d
        g = None
        if self.cfg.use_gps:
            g = gps_mask(a.world, b.world)
            s = add(s, Tensor(g))
        return s, last_d, g

    def match(self, graph_a: SceneGraph, graph_b: SceneGraph,
              theta: float | None = None, eval_seed: int = 0,
              tag: int = 0) -> MatchResult:
        """Deterministic evaluation-mode matching of two views."""
        theta = self.cfg.theta if theta is None else theta
        n, m = graph_a.n_nodes, graph_b.n_nodes
        if n == 0 or m == 0:
            empty = np.zeros((n, m))
            return MatchResult(S=empty, Y=empty.copy(),
                               row_std=np.zeros(n),
                               kept=np.zeros(n, dtype=bool), pairs=[],
                               D=None, G=None)
        a = prepare_graph(graph_a)
        b = prepare_graph(graph_b)
        with no_grad():
            u_rng = stream(eval_seed, "eval-u", tag)
            s, d, g = self.forward_similarity(a, b, train=False, u_rng=u_rng)
        s_val = s.data
        y = assign(s_val)
        scored = s_val if self.cfg.raw_score_stats else y
        std = row_scores(scored)
        kept = std >= theta
        y_masked = np.where(kept[:, None], y, 0.0)
        pairs = extract_pairs(y_masked, kept, mutual=self.cfg.mutual)
        return MatchResult(S=s_val, Y=y_masked, row_std=std, kept=kept,
                           pairs=pairs, D=None if d is None else d.data, G=g)

    def loss(self, a: GraphInputs, b: GraphInputs, y_star: np.ndarray,
             train: bool = False, rng=None, u_rng=None,
             softmax_target: bool = False) -> Tensor:
        """Mean squared error between the combined S and the 0/1 target."""
        s, _, _ = self.forward_similarity(a, b, train=train, rng=rng, u_rng=u_rng)
        if softmax_target:
            s = softmax_rows(s)
        diff = sub(s, Tensor(y_star))
        return mean(mul(diff, diff))
