"""Instance and dataset serialization.

A dataset is a directory with a ``manifest.json`` (generator config,
root seed, split listings with per-instance scene seeds) and one JSON
document per instance holding the world ground truth, both rendered
views, and the ground-truth correspondence pairs.  Scene seeds are
derived from (root seed, global instance index), so any split can be
regenerated at a different noise level while keeping the same scenes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from multiprocessing import Pool
from pathlib import Path

from .graph_build import SceneGraph, graph_from_json, graph_to_json
from .numerics import stream
from .scene_sim import (
    SimConfig,
    WorldScene,
    make_instance,
    scene_from_json,
    scene_to_json,
)

SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


@dataclass
class Instance:
    scene: WorldScene | None
    view_a: SceneGraph
    view_b: SceneGraph
    gt_pairs: set[tuple[int, int]]


def instance_to_json(inst: Instance) -> dict:
    return {
        "world": None if inst.scene is None else scene_to_json(inst.scene),
        "view_a": graph_to_json(inst.view_a),
        "view_b": graph_to_json(inst.view_b),
        "gt_pairs": sorted([int(i), int(j)] for i, j in inst.gt_pairs),
    }


def instance_from_json(doc: dict) -> Instance:
    scene = None if doc.get("world") is None else scene_from_json(doc["world"])
    return Instance(
        scene=scene,
        view_a=graph_from_json(doc["view_a"]),
        view_b=graph_from_json(doc["view_b"]),
        gt_pairs={(int(i), int(j)) for i, j in doc["gt_pairs"]},
    )


def save_instance(path, inst: Instance) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(instance_to_json(inst), f, sort_keys=True)


def load_instance(path) -> Instance:
    with open(path, "r", encoding="utf-8") as f:
        return instance_from_json(json.load(f))


def sim_config_to_dict(cfg: SimConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["n_objects"] = list(cfg.n_objects)
    if cfg.agent_angles_deg is not None:
        doc["agent_angles_deg"] = list(cfg.agent_angles_deg)
    return doc


def sim_config_from_dict(doc: dict) -> SimConfig:
    kwargs = dict(doc)
    kwargs["n_objects"] = tuple(kwargs["n_objects"])
    if kwargs.get("agent_angles_deg") is not None:
        kwargs["agent_angles_deg"] = tuple(kwargs["agent_angles_deg"])
    return SimConfig(**kwargs)


def scene_seed(root_seed: int, index: int) -> int:
    """Deterministic per-instance seed, independent of split boundaries."""
    return int(stream(root_seed, "instance", index).integers(0, 2**63))


def build_instance(cfg: SimConfig, seed: int) -> Instance:
    scene, view_a, view_b = make_instance(cfg, seed)
    return Instance(scene=scene, view_a=view_a, view_b=view_b,
                    gt_pairs=set(scene.gt_correspondence))


def _generate_one(args) -> None:
    path, cfg, seed = args
    save_instance(path, build_instance(cfg, seed))


def generate_dataset(cfg: SimConfig, root_seed: int, counts: dict[str, int],
                     out_dir, workers: int = 1) -> dict:
    """Write instances plus manifest; returns the manifest document.

    ``counts`` maps split name to instance count.  The global instance
    index runs train, then val, then test, so adding validation
    instances never changes the training scenes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    splits: dict[str, list] = {}
    index = 0
    for split in SPLITS:
        n = int(counts.get(split, 0))
        (out / split).mkdir(exist_ok=True)
        entries = []
        for k in range(n):
            seed = scene_seed(root_seed, index)
            rel = f"{split}/instance_{k:05d}.json"
            entries.append({"file": rel, "seed": seed})
            jobs.append((out / rel, cfg, seed))
            index += 1
        splits[split] = entries
    if workers > 1 and len(jobs) > 1:
        with Pool(processes=workers) as pool:
            pool.map(_generate_one, jobs, chunksize=16)
    else:
        for job in jobs:
            _generate_one(job)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": int(root_seed),
        "config": sim_config_to_dict(cfg),
        "splits": splits,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json under {data_dir}")
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    for key in ("seed", "config", "splits"):
        if key not in manifest:
            raise ValueError(f"manifest missing {key!r}")
    return manifest


def load_split(data_dir, split: str, manifest: dict | None = None) -> list[Instance]:
    manifest = manifest or load_manifest(data_dir)
    root = Path(data_dir)
    entries = manifest["splits"].get(split, [])
    return [load_instance(root / e["file"]) for e in entries]


def split_seeds(manifest: dict, split: str) -> list[int]:
    return [int(e["seed"]) for e in manifest["splits"].get(split, [])]
