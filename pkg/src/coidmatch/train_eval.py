"""Training loop, retrieval metrics, noise sweeps, and reference baselines.

Training minimizes the mean squared error between the combined
similarity matrix and the 0/1 ground-truth correspondence matrix.
Evaluation treats matching as retrieval: extracted pairs are compared
against ground truth and aggregated by global (micro-averaged)
tp/fp/fn counts across the dataset.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, replace
from multiprocessing import Pool

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataset import Instance, build_instance
from .matcher import (
    GraphInputs,
    MatcherConfig,
    MatchPipeline,
    assign,
    extract_pairs,
    filter_noncovisible,
    prepare_graph,
)
from .numerics import ParamStore, Tensor, add, mean, mul, no_grad, scale, stream, sub
from .scene_sim import SimConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    softmax_target: bool = False
    clip_norm: float | None = 1.0
    seed: int = 0


@dataclass
class MetricsReport:
    """Micro-averaged retrieval metrics, optionally with a PR sweep."""

    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    theta: float | None = None
    pr_curve: list[tuple[float, float, float]] | None = None  # (theta, P, R)
    auc: float | None = None

    @staticmethod
    def from_counts(tp: int, fp: int, fn: int, theta: float | None = None) -> "MetricsReport":
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = (2.0 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        return MetricsReport(precision=precision, recall=recall, f1=f1,
                             tp=tp, fp=fp, fn=fn, theta=theta)

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        if self.pr_curve is not None:
            doc["pr_curve"] = [[t, p, r] for t, p, r in self.pr_curve]
        return doc


def ground_truth_matrix(n: int, m: int, pairs) -> np.ndarray:
    y = np.zeros((n, m))
    for i, j in pairs:
        y[i, j] = 1.0
    return y


def loss(s, y_star) -> Tensor:
    """Mean squared error over all entries of S against the 0/1 target."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    y_star = np.asarray(y_star, dtype=np.float64)
    if s.shape != y_star.shape:
        raise ValueError(f"loss shapes differ: {s.shape} vs {y_star.shape}")
    diff = sub(s, Tensor(y_star))
    return mean(mul(diff, diff))


# ------------------------------------------------------------------ training


@dataclass
class PreparedPair:
    a: GraphInputs | None
    b: GraphInputs | None
    y_star: np.ndarray | None
    gt: set[tuple[int, int]]
    empty: bool


def prepare_instance(inst: Instance) -> PreparedPair:
    n, m = inst.view_a.n_nodes, inst.view_b.n_nodes
    if n == 0 or m == 0:
        return PreparedPair(a=None, b=None, y_star=None,
                            gt=set(inst.gt_pairs), empty=True)
    return PreparedPair(
        a=prepare_graph(inst.view_a),
        b=prepare_graph(inst.view_b),
        y_star=ground_truth_matrix(n, m, inst.gt_pairs),
        gt=set(inst.gt_pairs),
        empty=False,
    )


@dataclass
class TrainResult:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    best_val_loss: float


def _dataset_loss(pipe: MatchPipeline, prepared: list[PreparedPair],
                  seed: int, softmax_target: bool) -> float:
    """Evaluation-mode mean loss (fixed consensus features per instance)."""
    total, count = 0.0, 0
    with no_grad():
        for i, p in enumerate(prepared):
            if p.empty:
                continue
            u_rng = stream(seed, "val-u", i)
            val = pipe.loss(p.a, p.b, p.y_star, train=False, u_rng=u_rng,
                            softmax_target=softmax_target)
            total += float(val.data)
            count += 1
    return total / max(1, count)


def train(train_instances: list[Instance], val_instances: list[Instance],
          store: ParamStore, mcfg: MatcherConfig, tcfg: TrainConfig,
          log=None) -> TrainResult:
    """Epoch loop with per-epoch validation; leaves ``store`` at the
    best-validation state."""
    if not train_instances:
        raise ValueError("empty dataset")
    pipe = MatchPipeline(store, mcfg)
    prep_train = [prepare_instance(i) for i in train_instances]
    prep_val = [prepare_instance(i) for i in val_instances]

    train_losses: list[float] = []
    val_losses: list[float] = []
    best_val = math.inf
    best_epoch = -1
    best_snap = store.snapshot()
    global_step = store.step

    for epoch in range(tcfg.epochs):
        order = stream(tcfg.seed, "shuffle", epoch).permutation(len(prep_train))
        epoch_losses = []
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            parts = []
            for slot, idx in enumerate(batch):
                p = prep_train[int(idx)]
                if p.empty:
                    continue
                rng = stream(tcfg.seed, "step", global_step, "drop", slot)
                u_rng = stream(tcfg.seed, "step", global_step, "u", slot)
                parts.append(pipe.loss(p.a, p.b, p.y_star, train=True, rng=rng,
                                       u_rng=u_rng,
                                       softmax_target=tcfg.softmax_target))
            if not parts:
                continue
            total = parts[0]
            for part in parts[1:]:
                total = add(total, part)
            batch_loss = scale(total, 1.0 / len(parts))
            if not np.isfinite(batch_loss.data):
                raise ArithmeticError(f"non-finite training loss at step {global_step}")
            batch_loss.backward()
            if tcfg.clip_norm is not None:
                store.clip_grad_norm(tcfg.clip_norm)
            store.adam_step(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
            global_step += 1
            epoch_losses.append(float(batch_loss.data))
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        val_loss = (_dataset_loss(pipe, prep_val, tcfg.seed, tcfg.softmax_target)
                    if prep_val else train_loss)
        train_losses.append(train_loss)
        val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snap = store.snapshot()
        if log is not None:
            log(f"epoch {epoch + 1}/{tcfg.epochs}  train {train_loss:.6f}  val {val_loss:.6f}")

    store.restore(best_snap)
    return TrainResult(train_losses=train_losses, val_losses=val_losses,
                       best_epoch=best_epoch, best_val_loss=best_val)


# ---------------------------------------------------------------- evaluation


def _count_pairs(pairs, gt: set[tuple[int, int]]) -> tuple[int, int, int]:
    tp = sum(1 for p in pairs if tuple(p) in gt)
    fp = len(pairs) - tp
    fn = len(gt) - tp
    return tp, fp, fn


_WORKER_STATE: dict = {}


def _eval_worker_init(snapshot, mcfg, theta, eval_seed):
    store = ParamStore()
    for name, arr in snapshot["params"].items():
        store.add(name, arr)
    _WORKER_STATE["pipe"] = MatchPipeline(store, mcfg)
    _WORKER_STATE["theta"] = theta
    _WORKER_STATE["eval_seed"] = eval_seed


def _eval_worker(job):
    index, view_a_doc, view_b_doc, gt = job
    from .graph_build import graph_from_json

    pipe = _WORKER_STATE["pipe"]
    result = pipe.match(graph_from_json(view_a_doc), graph_from_json(view_b_doc),
                        theta=_WORKER_STATE["theta"],
                        eval_seed=_WORKER_STATE["eval_seed"], tag=index)
    return _count_pairs(result.pairs, {tuple(p) for p in gt})


def evaluate(instances: list[Instance], store: ParamStore, mcfg: MatcherConfig,
             theta: float | None = None, eval_seed: int = 0,
             workers: int = 1) -> MetricsReport:
    """Match every instance and micro-average the counts.

    Results are independent of ``workers``: the per-instance consensus
    features are keyed by instance index and counts are summed in
    dataset order.
    """
    theta = mcfg.theta if theta is None else theta
    if workers > 1 and len(instances) > 1:
        from .graph_build import graph_to_json

        jobs = [(i, graph_to_json(inst.view_a), graph_to_json(inst.view_b),
                 sorted(inst.gt_pairs)) for i, inst in enumerate(instances)]
        with Pool(processes=workers, initializer=_eval_worker_init,
                  initargs=(store.snapshot(), mcfg, theta, eval_seed)) as pool:
            counts = pool.map(_eval_worker, jobs, chunksize=8)
    else:
        pipe = MatchPipeline(store, mcfg)
        counts = []
        for i, inst in enumerate(instances):
            result = pipe.match(inst.view_a, inst.view_b, theta=theta,
                                eval_seed=eval_seed, tag=i)
            counts.append(_count_pairs(result.pairs, inst.gt_pairs))
    tp = sum(c[0] for c in counts)
    fp = sum(c[1] for c in counts)
    fn = sum(c[2] for c in counts)
    return MetricsReport.from_counts(tp, fp, fn, theta=theta)


def _trapezoid_auc(points: list[tuple[float, float]]) -> float:
    """Area under the precision-recall points, sorted by recall."""
    pts = sorted(points, key=lambda t: (t[1], t[0]))
    area = 0.0
    for k in range(1, len(pts)):
        p0, r0 = pts[k - 1]
        p1, r1 = pts[k]
        area += (r1 - r0) * (p0 + p1) / 2.0
    return area


def pr_curve(instances: list[Instance], store: ParamStore, mcfg: MatcherConfig,
             theta_max: float = 0.5, n_steps: int = 50,
             eval_seed: int = 0) -> MetricsReport:
    """Sweep the non-covisibility threshold and report the PR curve + AUC.

    The network runs once per instance; each threshold only re-filters
    the cached assignment rows.
    """
    pipe = MatchPipeline(store, mcfg)
    cached = []
    for i, inst in enumerate(instances):
        result = pipe.match(inst.view_a, inst.view_b, theta=0.0,
                            eval_seed=eval_seed, tag=i)
        cached.append((result.Y, result.row_std, inst.gt_pairs))
    thetas = np.linspace(0.0, theta_max, n_steps)
    curve = []
    counts = []
    for theta in thetas:
        tp = fp = fn = 0
        for y, std, gt in cached:
            kept = std >= theta
            y_masked = np.where(kept[:, None], y, 0.0) if y.size else y
            pairs = extract_pairs(y_masked, kept, mutual=mcfg.mutual)
            a, b, c = _count_pairs(pairs, gt)
            tp, fp, fn = tp + a, fp + b, fn + c
        rep = MetricsReport.from_counts(tp, fp, fn, theta=float(theta))
        curve.append((float(theta), rep.precision, rep.recall))
        counts.append((tp, fp, fn))
    auc = _trapezoid_auc([(p, r) for _, p, r in curve])
    best = max(range(len(curve)), key=lambda k: _f1(curve[k][1], curve[k][2]))
    report = MetricsReport.from_counts(*counts[best], theta=curve[best][0])
    report.pr_curve = curve
    report.auc = auc
    return report


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def sweep_noise(kind: str, levels, sim_cfg: SimConfig, seeds: list[int],
                store: ParamStore, mcfg: MatcherConfig,
                theta: float | None = None, eval_seed: int = 0,
                workers: int = 1) -> list[tuple[float, MetricsReport]]:
    """Regenerate the test scenes at each noise level and evaluate.

    Scene seeds stay fixed, so the zero-delta level reproduces the
    original split exactly and curves are comparable point by point.
    """
    if kind not in ("depth", "gps"):
        raise ValueError(f"unknown noise kind {kind!r}")
    field = "sigma_depth" if kind == "depth" else "sigma_gps"
    rows = []
    for level in levels:
        cfg = replace(sim_cfg, **{field: float(level)})
        instances = [build_instance(cfg, s) for s in seeds]
        rows.append((float(level),
                     evaluate(instances, store, mcfg, theta=theta,
                              eval_seed=eval_seed, workers=workers)))
    return rows


# ----------------------------------------------------------------- baselines


def _filtered_pairs(y: np.ndarray, theta: float, mutual: bool):
    kept, y_masked = filter_noncovisible(y, theta)
    return extract_pairs(y_masked, kept, mutual=mutual)


def appearance_baseline(instances: list[Instance], theta: float = 0.13,
                        mutual: bool = False) -> MetricsReport:
    """SoftMax of raw-feature dot products, then the standard extraction."""
    tp = fp = fn = 0
    for inst in instances:
        if inst.view_a.n_nodes == 0 or inst.view_b.n_nodes == 0:
            fn += len(inst.gt_pairs)
            continue
        y = assign(inst.view_a.features @ inst.view_b.features.T)
        pairs = _filtered_pairs(y, theta, mutual)
        a, b, c = _count_pairs(pairs, inst.gt_pairs)
        tp, fp, fn = tp + a, fp + b, fn + c
    return MetricsReport.from_counts(tp, fp, fn, theta=theta)


def gps_baseline(instances: list[Instance], gate_radius: float = 5.0) -> MetricsReport:
    """Hungarian assignment on world-frame distances with a gating radius."""
    tp = fp = fn = 0
    for inst in instances:
        if inst.view_a.n_nodes == 0 or inst.view_b.n_nodes == 0:
            fn += len(inst.gt_pairs)
            continue
        diff = (inst.view_a.world_positions[:, None, :]
                - inst.view_b.world_positions[None, :, :])
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        rows, cols = linear_sum_assignment(dist)
        pairs = [(int(i), int(j)) for i, j in zip(rows, cols)
                 if dist[i, j] <= gate_radius]
        a, b, c = _count_pairs(pairs, inst.gt_pairs)
        tp, fp, fn = tp + a, fp + b, fn + c
    return MetricsReport.from_counts(tp, fp, fn)


def baselines(instances: list[Instance], theta: float = 0.13,
              gate_radius: float = 5.0, mutual: bool = False) -> dict[str, MetricsReport]:
    return {
        "appearance": appearance_baseline(instances, theta=theta, mutual=mutual),
        "gps_nearest": gps_baseline(instances, gate_radius=gate_radius),
    }
