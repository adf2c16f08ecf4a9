"""Command-line front end: scene generation, surrogate training, attacks,
rendering previews, and evaluation.

Configuration comes from an optional JSON file plus command-line flags;
flags override file values, file values override defaults.  Every run
persists the fully-resolved configuration next to its outputs so it can be
reproduced from the artifact directory alone.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .attack import (
    DETECTION_SCORE,
    AttackConfig,
    apply_mesh,
    initial_mesh,
    run_attack,
)
from .dataio import (
    Scene,
    SynthParams,
    gen_synthetic_scenes,
    load_scene,
    read_ply,
    read_split,
    save_scene,
    write_ply,
    write_split,
    write_velodyne,
)
from .evalmetrics import ScoredBox, evaluate, emit_report
from .geom import iou_bev
from .lidar import desk_config
from .victim import (
    detect_cascaded,
    detect_fusion,
    load_weights,
    save_weights,
    surrogate_train,
)

DEFAULT_DATA_ROOT_ENV = "ADVMESH_DATA_ROOT"

# configuration sections and the dataclasses or key sets that define them
_SECTIONS = {
    "synth": SynthParams,
    "attack": AttackConfig,
    "eval": {"iou_thr", "det_thr"},
    "run": {"seed", "threads"},
}
# dataclass fields that cannot be set from JSON scalars
_SKIP_FIELDS = {"lidar", "shading"}


class ConfigError(ValueError):
    """Unknown or malformed configuration content."""


def load_config(path) -> dict:
    """Read a JSON config file, rejecting unknown sections and keys."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for section, content in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section {section!r}")
        spec = _SECTIONS[section]
        if not isinstance(content, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
        if isinstance(spec, set):
            allowed = spec
        else:
            allowed = {f.name for f in dataclasses.fields(spec)} - _SKIP_FIELDS
        for key in content:
            if key not in allowed:
                raise ConfigError(
                    f"{path}: unknown key {section}.{key}")
    return raw


def _tupled(cls, kwargs: dict) -> dict:
    """JSON lists -> tuples where the dataclass default is a tuple."""
    out = dict(kwargs)
    for f in dataclasses.fields(cls):
        if f.name in out and isinstance(out[f.name], list):
            out[f.name] = tuple(out[f.name])
    return out


def resolve(config: dict, overrides: dict) -> dict:
    """Merge flag overrides (highest precedence) into the file config."""
    merged = {k: dict(v) for k, v in config.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        merged.setdefault(section, {})[key] = value
    return merged


def _persist(out_dir, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _synth_params(resolved: dict) -> SynthParams:
    return SynthParams(**_tupled(SynthParams, resolved.get("synth", {})))


def _attack_config(resolved: dict) -> AttackConfig:
    return AttackConfig(**_tupled(AttackConfig, resolved.get("attack", {})))


def _load_scenes(scene_dir) -> list[Scene]:
    split = os.path.join(scene_dir, "split.txt")
    if os.path.exists(split):
        ids = read_split(split)
    else:
        ids = sorted(
            os.path.splitext(f)[0]
            for f in os.listdir(os.path.join(scene_dir, "velodyne")))
    return [load_scene(scene_dir, sid) for sid in ids]


def _scene_map(fn, scenes, threads: int):
    """Deterministic ordered map over scenes, optionally threaded."""
    if threads <= 1:
        return [fn(s) for s in scenes]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, scenes))


def _detector(kind: str):
    return detect_cascaded if kind == "cascaded" else detect_fusion


def _evaluate_mesh(scenes, mesh, weights, seed: int, threads: int,
                   iou_thr: float, det_thr: float, config_echo: dict):
    """Detections on attacked scenes + ASR vs the clean scenes."""
    detect = _detector(weights.kind)

    def per_scene(scene):
        before = detect(scene, weights).detections
        attacked = apply_mesh(scene, mesh, seed=seed)
        after = detect(attacked, weights).detections
        return before, after

    results = _scene_map(per_scene, scenes, threads)
    dets_after = [after for _, after in results]
    gts = [s.labels for s in scenes]
    before = hidden = 0
    for scene, (dets_b, dets_a) in zip(scenes, results):
        for lab in scene.car_labels():
            def found(dets):
                return any(d.score >= det_thr and iou_bev(d.box, lab.box) > iou_thr
                           for d in dets)
            if found(dets_b):
                before += 1
                if not found(dets_a):
                    hidden += 1
    asr = (before, hidden) if before else None
    return evaluate(dets_after, gts, iou_thr=iou_thr, asr_counts=asr,
                    config=config_echo)


def _write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "stage", "loss", "base", "lap"])
        for row in history:
            writer.writerow([row["iteration"], row["stage"],
                             repr(row["loss"]), repr(row["base"]),
                             repr(row["lap"])])


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_scenes(args, resolved) -> int:
    params = _synth_params(resolved)
    if args.seed is not None:
        params = dataclasses.replace(params, seed=args.seed)
    scenes = gen_synthetic_scenes(params, args.count)
    for scene in scenes:
        save_scene(args.out, scene)
    write_split(os.path.join(args.out, "split.txt"), [s.id for s in scenes])
    _persist(args.out, resolved)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train_surrogate(args, resolved) -> int:
    scenes = _load_scenes(args.scenes)
    if args.val:
        train, val = scenes, _load_scenes(args.val)
    else:
        val = scenes[::10]
        train = [s for i, s in enumerate(scenes) if i % 10]
    seed = args.seed if args.seed is not None else \
        resolved.get("run", {}).get("seed", 0)
    weights = surrogate_train(args.kind, train, val, seed=seed,
                              steps_scale=args.steps_scale)
    os.makedirs(args.out, exist_ok=True)
    save_weights(os.path.join(args.out, f"{args.kind}.npz"), weights)
    with open(os.path.join(args.out, f"{args.kind}_metadata.json"), "w") as fh:
        json.dump(weights.metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _persist(args.out, resolved)
    print(f"{args.kind} surrogate val AP "
          f"{weights.metadata['val_ap']:.2f}, saved to {args.out}")
    return 0


def cmd_attack(args, resolved) -> int:
    cfg = _attack_config(resolved)
    scenes = _load_scenes(args.scenes)
    weights = load_weights(args.weights)
    if weights.kind != cfg.victim_kind:
        raise ValueError(
            f"weights are {weights.kind!r} but config asks {cfg.victim_kind!r}")
    mesh, history = run_attack(scenes, weights, cfg)
    os.makedirs(args.out, exist_ok=True)
    write_ply(os.path.join(args.out, "adv_mesh.ply"), mesh)
    _write_history(os.path.join(args.out, "history.csv"), history)
    ev = resolved.get("eval", {})
    report = _evaluate_mesh(
        scenes, mesh, weights, seed=cfg.seed, threads=args.threads,
        iou_thr=ev.get("iou_thr", 0.7), det_thr=ev.get("det_thr", DETECTION_SCORE),
        config_echo=resolved)
    emit_report(report, os.path.join(args.out, "report.json"),
                os.path.join(args.out, "recall.csv"))
    _persist(args.out, resolved)
    if report.asr is not None:
        print(f"attack done: ASR {report.asr:.2f}% on {len(scenes)} scenes")
    else:
        print(f"attack done on {len(scenes)} scenes (no detected cars)")
    return 0


def cmd_eval(args, resolved) -> int:
    scenes = _load_scenes(args.scenes)
    weights = load_weights(args.weights)
    mesh = read_ply(args.mesh) if args.mesh else initial_mesh()
    seed = args.seed if args.seed is not None else \
        resolved.get("run", {}).get("seed", 0)
    ev = resolved.get("eval", {})
    report = _evaluate_mesh(
        scenes, mesh, weights, seed=seed, threads=args.threads,
        iou_thr=ev.get("iou_thr", 0.7), det_thr=ev.get("det_thr", DETECTION_SCORE),
        config_echo=resolved)
    os.makedirs(args.out, exist_ok=True)
    emit_report(report, os.path.join(args.out, "report.json"),
                os.path.join(args.out, "recall.csv"))
    _persist(args.out, resolved)
    ap = report.ap_bev.get("Moderate")
    print(f"eval done: BEV AP(Moderate) "
          f"{'n/a' if ap is None else f'{ap:.2f}'} "
          f"ASR {'n/a' if report.asr is None else f'{report.asr:.2f}%'}")
    return 0


def cmd_render(args, resolved) -> int:
    from PIL import Image

    scenes = _load_scenes(args.scenes)[: args.limit]
    mesh = read_ply(args.mesh) if args.mesh else initial_mesh()
    seed = args.seed if args.seed is not None else \
        resolved.get("run", {}).get("seed", 0)
    os.makedirs(args.out, exist_ok=True)
    for scene in scenes:
        attacked = apply_mesh(scene, mesh, seed=seed)
        Image.fromarray(scene.image).save(
            os.path.join(args.out, f"{scene.id}_before.png"))
        Image.fromarray(attacked.image).save(
            os.path.join(args.out, f"{scene.id}_after.png"))
        write_velodyne(os.path.join(args.out, f"{scene.id}_after.bin"),
                       attacked.cloud)
        provenance = np.zeros(len(attacked.cloud), dtype=np.uint8)
        provenance[len(scene.cloud):] = 1
        np.savetxt(os.path.join(args.out, f"{scene.id}_provenance.txt"),
                   provenance, fmt="%d")
    _persist(args.out, resolved)
    print(f"rendered {len(scenes)} before/after pairs to {args.out}")
    return 0


def cmd_report(args, resolved) -> int:
    with open(args.report) as fh:
        rep = json.load(fh)
    print("AP (BEV):", json.dumps(rep.get("ap_bev")))
    print("AP (3D):", json.dumps(rep.get("ap_3d")))
    asr = rep.get("asr")
    print("ASR:", "n/a" if asr is None else f"{asr:.2f}%")
    counts = rep.get("counts", {})
    print("counts:", json.dumps(counts))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advmesh",
        description="Universal adversarial roof-mesh toolkit.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--threads", type=int, default=1,
                        help="max parallel scene workers (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate synthetic scenes")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-surrogate", help="train a surrogate detector")
    p.add_argument("--kind", choices=("cascaded", "fusion"), required=True)
    p.add_argument("--scenes", help="training scene directory")
    p.add_argument("--val", help="validation scene directory")
    p.add_argument("--steps-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("attack", help="optimize the universal mesh")
    p.add_argument("--victim", choices=("cascaded", "fusion"))
    p.add_argument("--mode",
                   choices=("lidar_only", "image_only", "lidar_image"))
    p.add_argument("--scenes", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a mesh against a surrogate")
    p.add_argument("--scenes", required=True)
    p.add_argument("--mesh", help="adversarial mesh PLY (default grey sphere)")
    p.add_argument("--weights", required=True)
    p.add_argument("--victim", choices=("cascaded", "fusion"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="before/after previews")
    p.add_argument("--scenes", required=True)
    p.add_argument("--mesh")
    p.add_argument("--limit", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="print a saved report")
    p.add_argument("--report", required=True)
    return parser


_COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "train-surrogate": cmd_train_surrogate,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "render": cmd_render,
    "report": cmd_report,
}


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["run.seed"] = args.seed
    for name in ("victim", "mode", "iterations", "batch_size"):
        value = getattr(args, name, None)
        key = "attack.victim_kind" if name == "victim" else f"attack.{name}"
        out[key] = value
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "scenes", "") is None:
        args.scenes = os.environ.get(DEFAULT_DATA_ROOT_ENV)
    try:
        config = load_config(args.config) if args.config else {}
        resolved = resolve(config, _overrides(args))
        return _COMMANDS[args.command](args, resolved)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure -> diagnostic + exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
