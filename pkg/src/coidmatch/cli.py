"""Command-line entry point: generate / train / eval / sweep / baseline.

Every command resolves its configuration (built-in defaults, then a
--config JSON file, then flags), writes the resolved snapshot to the
output directory before doing any work, and emits plain CSV/JSON
outputs.  Rerunning a command from its snapshot reproduces the run
bit for bit.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

from .dataset import (
    generate_dataset,
    load_manifest,
    load_split,
    sim_config_from_dict,
    sim_config_to_dict,
    split_seeds,
)
from .matcher import ConsensusConfig, MatcherConfig, init_model_params
from .gnn import GnnConfig
from .numerics import ParamStore
from .scene_sim import SimConfig
from .train_eval import (
    TrainConfig,
    baselines,
    evaluate,
    pr_curve,
    sweep_noise,
    train,
)


class DataError(Exception):
    """Bad dataset, config, or checkpoint contents."""


class NumericError(Exception):
    """Numerical failure (non-finite values) during a run."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def default_config() -> dict:
    return {
        "seed": 7,
        "sim": sim_config_to_dict(SimConfig()),
        "model": {
            "heads": 4,
            "head_channels": 32,
            "layers": 2,
            "dropout": 0.5,
            "rand_dim": 32,
            "consensus_steps": 1,
            "mlp_hidden": 16,
            "mlp_dropout": 0.2,
            "use_gps": True,
            "theta": 0.13,
            "mutual": False,
            "raw_score_stats": False,
        },
        "train": {
            "epochs": 60,
            "lr": 1e-3,
            "batch_size": 8,
            "softmax_target": False,
        },
        "data": {"n_train": 2000, "n_val": 200, "n_test": 500},
        "eval": {
            "theta_max": 0.5,
            "theta_steps": 50,
            "gate_radius": 5.0,
            "depth_levels": [0.0, 0.1, 0.2, 0.3, 0.5],
            "gps_levels": [0.0, 0.6, 1.2, 2.0, 3.0],
        },
    }


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(config_path: str | None, overrides: dict) -> dict:
    resolved = default_config()
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                resolved = _deep_merge(resolved, json.load(f))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {config_path}: {exc}") from exc
    return _deep_merge(resolved, overrides)


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_snapshot(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(resolved, f, sort_keys=True, indent=2)
        f.write("\n")


def build_matcher_config(resolved: dict) -> MatcherConfig:
    sim = resolved["sim"]
    model = resolved["model"]
    gnn = GnnConfig(layers=model["layers"], heads=model["heads"],
                    head_channels=model["head_channels"],
                    input_dim=sim["feature_dim"], dropout=model["dropout"])
    cons = ConsensusConfig(
        rand_dim=model["rand_dim"], steps=model["consensus_steps"],
        gnn=GnnConfig(layers=model["layers"], heads=model["heads"],
                      head_channels=model["head_channels"],
                      input_dim=model["rand_dim"], dropout=0.0),
        mlp_hidden=model["mlp_hidden"], mlp_dropout=model["mlp_dropout"])
    return MatcherConfig(gnn=gnn, consensus=cons, use_gps=model["use_gps"],
                         theta=model["theta"], mutual=model["mutual"],
                         raw_score_stats=model["raw_score_stats"])


def _check_dims(store: ParamStore, mcfg: MatcherConfig) -> None:
    key = "emb.l0.Wq"
    if key not in store:
        raise DataError("checkpoint has no embedding weights")
    have = store[key].data.shape
    want = (mcfg.gnn.input_dim, mcfg.gnn.heads * mcfg.gnn.head_channels)
    if have != want:
        raise DataError(
            f"checkpoint dimension mismatch: checkpoint {have} vs config {want}")


def _load_checkpoint(path) -> tuple[ParamStore, str]:
    try:
        return ParamStore.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def _load_data(data_dir):
    try:
        return load_manifest(data_dir)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset {data_dir}: {exc}") from exc


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")


# ----------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    data_over = {}
    for key in ("n_train", "n_val", "n_test"):
        value = getattr(args, key)
        if value is not None:
            data_over[key] = value
    if data_over:
        overrides["data"] = data_over
    resolved = resolve_config(args.config, overrides)
    counts = {"train": resolved["data"]["n_train"],
              "val": resolved["data"]["n_val"],
              "test": resolved["data"]["n_test"]}
    if sum(counts.values()) <= 0:
        raise DataError("dataset would be empty (all split counts are 0)")
    try:
        cfg = sim_config_from_dict(resolved["sim"])
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid sim config: {exc}") from exc
    out = Path(args.out)
    write_snapshot(out, resolved)
    generate_dataset(cfg, resolved["seed"], counts, out, workers=args.workers)
    total = sum(counts.values())
    print(f"wrote {total} instances to {out}")
    return 0


def cmd_train(args) -> int:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    train_over = {}
    if args.epochs is not None:
        train_over["epochs"] = args.epochs
    if args.lr is not None:
        train_over["lr"] = args.lr
    if args.batch_size is not None:
        train_over["batch_size"] = args.batch_size
    if train_over:
        overrides["train"] = train_over
    if args.no_gps:
        overrides["model"] = {"use_gps": False}
    manifest = _load_data(args.data)
    resolved = resolve_config(args.config, overrides)
    resolved["sim"] = manifest["config"]  # the data defines the sim side
    out = Path(args.out)
    write_snapshot(out, resolved)

    mcfg = build_matcher_config(resolved)
    tcfg = TrainConfig(epochs=resolved["train"]["epochs"],
                       lr=resolved["train"]["lr"],
                       batch_size=resolved["train"]["batch_size"],
                       softmax_target=resolved["train"]["softmax_target"],
                       seed=resolved["seed"])
    train_instances = load_split(args.data, "train", manifest)
    val_instances = load_split(args.data, "val", manifest)
    if not train_instances:
        raise DataError("dataset has no training instances")

    if args.resume:
        store, _ = _load_checkpoint(args.resume)
        _check_dims(store, mcfg)
    else:
        store = init_model_params(mcfg, resolved["seed"])

    result = train(train_instances, val_instances, store, mcfg, tcfg,
                   log=print if not args.quiet else None)
    ckpt = out / "checkpoint.bin"
    store.save(ckpt, config_hash=config_hash(resolved))
    _write_csv(out / "loss_curve.csv", ["epoch", "train_loss", "val_loss"],
               [(e + 1, tl, vl) for e, (tl, vl)
                in enumerate(zip(result.train_losses, result.val_losses))])
    _write_json(out / "train_summary.json", {
        "best_epoch": result.best_epoch + 1,
        "best_val_loss": result.best_val_loss,
        "steps": store.step,
        "config_hash": config_hash(resolved),
    })
    print(f"checkpoint: {ckpt} (best epoch {result.best_epoch + 1})")
    return 0


def _eval_setup(args):
    manifest = _load_data(args.data)
    resolved = resolve_config(args.config, {})
    resolved["sim"] = manifest["config"]
    if args.theta is not None:
        resolved["model"]["theta"] = args.theta
    store, ckpt_hash = _load_checkpoint(args.checkpoint)
    mcfg = build_matcher_config(resolved)
    _check_dims(store, mcfg)
    return manifest, resolved, store, mcfg


def cmd_eval(args) -> int:
    manifest, resolved, store, mcfg = _eval_setup(args)
    out = Path(args.out)
    write_snapshot(out, resolved)
    instances = load_split(args.data, args.split, manifest)
    if not instances:
        raise DataError(f"split {args.split!r} is empty")
    report = evaluate(instances, store, mcfg,
                      theta=resolved["model"]["theta"],
                      eval_seed=resolved["seed"], workers=args.workers)
    doc = report.to_json()
    doc["split"] = args.split
    doc["n_instances"] = len(instances)
    doc["config_hash"] = config_hash(resolved)
    _write_json(out / "metrics.json", doc)
    print(f"precision {report.precision:.4f}  recall {report.recall:.4f}  "
          f"f1 {report.f1:.4f}")
    return 0


def cmd_sweep(args) -> int:
    manifest, resolved, store, mcfg = _eval_setup(args)
    out = Path(args.out)
    write_snapshot(out, resolved)
    instances = load_split(args.data, args.split, manifest)
    if not instances:
        raise DataError(f"split {args.split!r} is empty")

    if args.kind == "theta":
        report = pr_curve(instances, store, mcfg,
                          theta_max=resolved["eval"]["theta_max"],
                          n_steps=resolved["eval"]["theta_steps"],
                          eval_seed=resolved["seed"])
        _write_csv(out / "theta_sweep.csv", ["theta", "precision", "recall", "f1"],
                   [(t, p, r, _f1(p, r)) for t, p, r in report.pr_curve])
        _write_json(out / "pr_summary.json", {
            "auc": report.auc,
            "best_theta": report.theta,
            "best_f1": report.f1,
            "config_hash": config_hash(resolved),
        })
        print(f"auc {report.auc:.4f}  best theta {report.theta:.4f} "
              f"(f1 {report.f1:.4f})")
        return 0

    kind = {"depth-noise": "depth", "gps-noise": "gps"}[args.kind]
    levels = (args.levels if args.levels
              else resolved["eval"][f"{kind}_levels"])
    sim_cfg = sim_config_from_dict(manifest["config"])
    seeds = split_seeds(manifest, args.split)
    rows = sweep_noise(kind, levels, sim_cfg, seeds, store, mcfg,
                       theta=resolved["model"]["theta"],
                       eval_seed=resolved["seed"], workers=args.workers)
    _write_csv(out / f"{kind}_sweep.csv",
               ["level", "precision", "recall", "f1"],
               [(lvl, rep.precision, rep.recall, rep.f1) for lvl, rep in rows])
    for lvl, rep in rows:
        print(f"{kind} sigma {lvl:g}: f1 {rep.f1:.4f}")
    return 0


def cmd_baseline(args) -> int:
    manifest = _load_data(args.data)
    resolved = resolve_config(args.config, {})
    resolved["sim"] = manifest["config"]
    if args.theta is not None:
        resolved["model"]["theta"] = args.theta
    out = Path(args.out)
    write_snapshot(out, resolved)
    instances = load_split(args.data, args.split, manifest)
    if not instances:
        raise DataError(f"split {args.split!r} is empty")
    reports = baselines(instances, theta=resolved["model"]["theta"],
                        gate_radius=resolved["eval"]["gate_radius"])
    _write_json(out / "baselines.json",
                {name: rep.to_json() for name, rep in reports.items()})
    for name, rep in reports.items():
        print(f"{name}: precision {rep.precision:.4f}  recall {rep.recall:.4f}  "
              f"f1 {rep.f1:.4f}")
    return 0


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coidmatch",
                     description="Two-view correspondence identification "
                                 "experiments at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults merged in)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--n-train", type=int, default=None)
    g.add_argument("--n-val", type=int, default=None)
    g.add_argument("--n-test", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the matcher on a dataset")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--no-gps", action="store_true",
                   help="drop the GPS position-consistency term (ablation)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--theta", type=float, default=None)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="threshold or noise sweeps")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--kind", required=True,
                   choices=["theta", "depth-noise", "gps-noise"])
    s.add_argument("--levels", type=float, nargs="*", default=None)
    s.add_argument("--theta", type=float, default=None)
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("baseline", help="run the reference baselines")
    common(b)
    b.add_argument("--data", required=True)
    b.add_argument("--theta", type=float, default=None)
    b.add_argument("--split", default="test", choices=["train", "val", "test"])
    b.set_defaults(func=cmd_baseline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
