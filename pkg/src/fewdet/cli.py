"""Command-line pipeline: data generation, two-stage training, evaluation,
gradient verification, attention rendering, and hyperparameter sweeps.

Every command resolves its settings from built-in defaults, an optional JSON
config file of flat dotted keys, and repeatable ``--set key=value`` overrides,
then writes the resolved snapshot next to its outputs. Reruns from a snapshot
are byte-identical; nothing here stamps timestamps or hostnames.

Exit codes: 0 success, 1 usage or I/O error, 2 numeric failure (training
divergence, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import attention as att
from . import detector as det
from . import fewshot as fs
from . import saliency as sal
from . import synthdata as sd
from . import tensor as T
from .ppm import write_ppm


class UsageError(Exception):
    """Bad invocation: unknown key, missing artifact, mismatched metadata."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.split": 1,
    "data.base_train": 200,
    "data.novel_pool": 40,
    "data.test": 200,
    "detector.image_size": 64,
    "detector.backbone_channels": [8, 16, 24, 32],
    "detector.feat_dim": 16,
    "detector.bottleneck_ratio": 4,
    "detector.temperature": 10.0,
    "detector.pos_thr": 0.5,
    "detector.neg_pos_ratio": 3,
    "detector.alpha": 1.0,
    "detector.use_bottom_up": True,
    "detector.epsilon": math.e,
    "detector.nms_iou": 0.45,
    "detector.score_thr": 0.05,
    "detector.top_k": 50,
    "anchors.map_sizes": [[8, 8], [4, 4]],
    "anchors.scales": [0.2, 0.42],
    "anchors.aspects": [1.0, 2.0, 0.5],
    "saliency.mode": "bms",
    "saliency.blur_radius": 2,
    "saliency.thresholds_per_channel": 8,
    "saliency.opening_radius": 1,
    "base.epochs": 60,
    "base.batch_size": 1,
    "base.lr": 0.01,
    "base.momentum": 0.9,
    "base.weight_decay": 0.0,
    "base.lr_decay_epochs": [45],
    "base.lr_decay": 0.3,
    "base.clip_norm": 5.0,
    "novel.epochs": 40,
    "novel.batch_size": 1,
    "novel.lr": 0.002,
    "novel.momentum": 0.9,
    "novel.weight_decay": 0.0,
    "novel.lr_decay_epochs": [30],
    "novel.lr_decay": 0.3,
    "novel.clip_norm": 5.0,
    "novel.k": 2,
    "novel.base_multiplier": 3,
    "novel.alpha": 1.0,
    "novel.beta": 2.0,
    "novel.eta": 0.4,
    "novel.gamma": 0.5,
    "render.scene_seed": 0,
    "gradcheck.points": 10,
    "sweep.beta": [2.0],
    "sweep.eta": [0.4],
    "sweep.epsilon": [math.e],
    "sweep.gamma": [0.5],
    "sweep.k": [2],
    "sweep.split": [1],
    "sweep.seeds": [7, 8, 9],
}


def resolve_config(config_path: str | None, sets: list[str]) -> dict[str, object]:
    """defaults < config file < --set overrides; unknown keys are rejected."""
    cfg = dict(DEFAULTS)
    if config_path is not None:
        try:
            with open(config_path) as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        for key in loaded:
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
        cfg.update(loaded)
    for item in sets:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    return cfg


def write_snapshot(cfg: dict[str, object], outdir: str) -> None:
    with open(os.path.join(outdir, "config.json"), "w") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def detector_config(cfg: dict[str, object]) -> det.DetectorConfig:
    anchors = det.AnchorConfig(
        map_sizes=tuple(tuple(int(v) for v in ms) for ms in cfg["anchors.map_sizes"]),
        scales=tuple(float(s) for s in cfg["anchors.scales"]),
        aspects=tuple(float(a) for a in cfg["anchors.aspects"]))
    return det.DetectorConfig(
        image_size=int(cfg["detector.image_size"]),
        backbone_channels=tuple(int(c) for c in cfg["detector.backbone_channels"]),
        feat_dim=int(cfg["detector.feat_dim"]),
        bottleneck_ratio=int(cfg["detector.bottleneck_ratio"]),
        anchors=anchors,
        temperature=float(cfg["detector.temperature"]),
        pos_thr=float(cfg["detector.pos_thr"]),
        neg_pos_ratio=int(cfg["detector.neg_pos_ratio"]),
        alpha=float(cfg["detector.alpha"]),
        use_bottom_up=bool(cfg["detector.use_bottom_up"]),
        epsilon=float(cfg["detector.epsilon"]),
        nms_iou=float(cfg["detector.nms_iou"]),
        score_thr=float(cfg["detector.score_thr"]),
        top_k=int(cfg["detector.top_k"]))


def train_config(cfg: dict[str, object], stage: str) -> fs.TrainConfig:
    g = lambda name: cfg[f"{stage}.{name}"]
    return fs.TrainConfig(
        epochs=int(g("epochs")), batch_size=int(g("batch_size")),
        lr=float(g("lr")), momentum=float(g("momentum")),
        weight_decay=float(g("weight_decay")),
        lr_decay_epochs=tuple(int(e) for e in g("lr_decay_epochs")),
        lr_decay=float(g("lr_decay")), clip_norm=float(g("clip_norm")))


def hyperparams(cfg: dict[str, object], epsilon: float) -> fs.Hyperparams:
    return fs.Hyperparams(
        alpha=float(cfg["novel.alpha"]), beta=float(cfg["novel.beta"]),
        eta=float(cfg["novel.eta"]), gamma=float(cfg["novel.gamma"]),
        epsilon=epsilon, k_shots=int(cfg["novel.k"]),
        base_multiplier=int(cfg["novel.base_multiplier"]))


def full_saliency(cfg: dict[str, object], scene: sd.Scene) -> np.ndarray:
    """Image-resolution bottom-up map, before pooling to the fusion grid."""
    mode = cfg["saliency.mode"]
    if mode == "oracle":
        return sal.oracle_saliency(scene, blur_radius=int(cfg["saliency.blur_radius"]))
    if mode == "bms":
        bms = sal.BmsConfig(
            thresholds_per_channel=int(cfg["saliency.thresholds_per_channel"]),
            opening_radius=int(cfg["saliency.opening_radius"]))
        return sal.bms_saliency(scene.image, bms)
    raise UsageError(f"saliency.mode must be 'bms' or 'oracle', got {mode!r}")


def saliency_provider(cfg: dict[str, object], dcfg: det.DetectorConfig):
    if not dcfg.use_bottom_up:
        return None
    side = dcfg.image_size // 4

    def provider(scene: sd.Scene) -> np.ndarray:
        return att.pool_saliency(full_saliency(cfg, scene), side, side)

    return provider


def benchmark(cfg: dict[str, object]) -> tuple[sd.Benchmark, sd.SplitSpec]:
    split = sd.make_split(int(cfg["data.split"]))
    sizes = (int(cfg["data.base_train"]), int(cfg["data.novel_pool"]),
             int(cfg["data.test"]))
    return sd.build_benchmark(int(cfg["seed"]), split, sizes=sizes), split


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def checkpoint_meta(cfg: dict[str, object], stage: str,
                    params: det.DetectorParams, split_id: int) -> dict:
    keep = [k for k in sorted(cfg)
            if k.split(".")[0] in ("detector", "anchors", "saliency")]
    return {"stage": stage, "class_ids": list(params.class_ids),
            "split": split_id, "seed": int(cfg["seed"]),
            "config": {k: cfg[k] for k in keep}}


def save_checkpoint(path: str, params: det.DetectorParams, meta: dict) -> None:
    T.save_arrays(path, params.as_arrays(), meta=meta)


def load_checkpoint(path: str) -> tuple[det.DetectorParams, dict]:
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    arrays, meta = T.load_arrays(path)
    if "class_ids" not in meta or "config" not in meta:
        raise UsageError(f"checkpoint {path} lacks required metadata")
    params = det.DetectorParams.from_arrays(
        arrays, [int(c) for c in meta["class_ids"]])
    return params, meta


def meta_run_config(cfg: dict[str, object], meta: dict) -> dict[str, object]:
    """The checkpoint's own detector/anchor/saliency settings win over the
    invocation's, so an artifact always evaluates under the architecture it
    was trained with."""
    merged = dict(cfg)
    merged.update(meta["config"])
    return merged


def write_metrics(path: str, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, allow_nan=False) + "\n")


def write_report(path: str, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def print_report(report: dict) -> None:
    print("class  AP")
    for cid in sorted(report["per_class_ap"], key=int):
        print(f"{cid:>5}  {report['per_class_ap'][cid]:.4f}")
    print(f"mAP base={report['map_base']:.4f} novel={report['map_novel']:.4f} "
          f"all={report['map_all']:.4f}")


def eval_report(params: det.DetectorParams, dcfg: det.DetectorConfig,
                scenes: list[sd.Scene], provider, novel_ids) -> dict:
    result = det.evaluate_detector(params, dcfg, scenes,
                                   saliency_provider=provider,
                                   novel_ids=novel_ids)
    return {"per_class_ap": {str(k): v for k, v in result["per_class_ap"].items()},
            "map_base": result["map_base"], "map_novel": result["map_novel"],
            "map_all": result["map_all"]}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict[str, object], args: argparse.Namespace) -> int:
    outdir = ensure_outdir(cfg, args)
    bench, split = benchmark(cfg)
    counts = {}
    for name, scenes in (("base_train", bench.base_train),
                         ("novel_pool", bench.novel_pool),
                         ("test", bench.test)):
        subdir = os.path.join(outdir, name)
        os.makedirs(subdir, exist_ok=True)
        for i, scene in enumerate(scenes):
            sd.dump_scene(scene, subdir, f"scene_{i:04d}")
        counts[name] = len(scenes)
    manifest = {"counts": counts, "seed": int(cfg["seed"]),
                "split": split.split_id, "novel_class_ids": sorted(split.novel)}
    write_report(os.path.join(outdir, "manifest.json"), manifest)
    print(f"wrote {sum(counts.values())} scenes to {outdir}")
    return 0


def cmd_train_base(cfg: dict[str, object], args: argparse.Namespace) -> int:
    outdir = ensure_outdir(cfg, args)
    bench, split = benchmark(cfg)
    dcfg = detector_config(cfg)
    provider = saliency_provider(cfg, dcfg)
    params, metrics = fs.train_base(bench.base_train, dcfg,
                                    train_config(cfg, "base"),
                                    sorted(split.base), seed=int(cfg["seed"]),
                                    saliency_provider=provider)
    save_checkpoint(os.path.join(outdir, "base.ckpt.json"), params,
                    checkpoint_meta(cfg, "base", params, split.split_id))
    write_metrics(os.path.join(outdir, "metrics.jsonl"), metrics)
    report = eval_report(params, dcfg, bench.test, provider, split.novel)
    write_report(os.path.join(outdir, "report.json"), report)
    print_report(report)
    return 0


def cmd_train_novel(cfg: dict[str, object], args: argparse.Namespace) -> int:
    outdir = ensure_outdir(cfg, args)
    base_params, meta = load_checkpoint(args.base_ckpt)
    if meta.get("stage") != "base":
        raise UsageError(f"{args.base_ckpt} is a {meta.get('stage')!r} checkpoint; "
                         "train-novel needs a base checkpoint")
    run_cfg = meta_run_config(cfg, meta)
    if int(run_cfg["data.split"]) != int(meta["split"]):
        raise UsageError(f"checkpoint was trained on split {meta['split']}, "
                         f"config asks for split {run_cfg['data.split']}")
    bench, split = benchmark(run_cfg)
    dcfg = detector_config(run_cfg)
    provider = saliency_provider(run_cfg, dcfg)
    hp = hyperparams(run_cfg, epsilon=dcfg.epsilon)
    support = fs.sample_support_set(bench.novel_pool, split, hp.k_shots,
                                    seed=int(run_cfg["seed"]),
                                    base_multiplier=hp.base_multiplier)
    params, metrics = fs.train_novel(base_params, support, dcfg,
                                     train_config(run_cfg, "novel"), hp,
                                     seed=int(run_cfg["seed"]),
                                     saliency_provider=provider)
    save_checkpoint(os.path.join(outdir, "novel.ckpt.json"), params,
                    checkpoint_meta(run_cfg, "novel", params, split.split_id))
    write_metrics(os.path.join(outdir, "metrics.jsonl"), metrics)
    report = eval_report(params, dcfg, bench.test, provider, split.novel)
    write_report(os.path.join(outdir, "report.json"), report)
    print_report(report)
    return 0


def cmd_eval(cfg: dict[str, object], args: argparse.Namespace) -> int:
    outdir = ensure_outdir(cfg, args)
    params, meta = load_checkpoint(args.ckpt)
    run_cfg = meta_run_config(cfg, meta)
    if int(run_cfg["data.split"]) != int(meta["split"]):
        raise UsageError(f"checkpoint was trained on split {meta['split']}, "
                         f"config asks for split {run_cfg['data.split']}")
    bench, split = benchmark(run_cfg)
    dcfg = detector_config(run_cfg)
    provider = saliency_provider(run_cfg, dcfg)
    report = eval_report(params, dcfg, bench.test, provider, split.novel)
    report["stage"] = meta.get("stage", "")
    write_report(os.path.join(outdir, "report.json"), report)
    print_report(report)
    return 0


def cmd_render_attention(cfg: dict[str, object], args: argparse.Namespace) -> int:
    outdir = ensure_outdir(cfg, args)
    params, meta = load_checkpoint(args.ckpt)
    run_cfg = meta_run_config(cfg, meta)
    dcfg = detector_config(run_cfg)
    params.set_requires_grad(False)
    scene_seed = int(run_cfg["render.scene_seed"])
    scene = sd.generate_scene(scene_seed)
    side = dcfg.image_size // 4

    full = full_saliency(run_cfg, scene)
    pooled = att.pool_saliency(full, side, side) if dcfg.use_bottom_up else None
    out = det.forward(scene.image, pooled, params, dcfg, want_topdown=True)

    write_ppm(os.path.join(outdir, "image.ppm"), scene.image)
    write_ppm(os.path.join(outdir, "saliency.ppm"), full)
    h = out.topdown.data
    peak = h.max()
    h_vis = h / peak if peak > 0 else np.zeros_like(h)
    write_ppm(os.path.join(outdir, "topdown.ppm"),
              att.upsample_nearest(h_vis, dcfg.image_size, dcfg.image_size))

    anchors = det.generate_anchors(dcfg.anchors)
    detections = det.detect(out, anchors, params, dcfg)
    with open(os.path.join(outdir, "detections.json"), "w") as fh:
        for d in detections:
            fh.write(json.dumps(
                {"image_id": scene_seed, "class": d.class_id,
                 "score": d.score,
                 "box": [d.box.cx, d.box.cy, d.box.w, d.box.h]}) + "\n")
    print(f"rendered scene {scene_seed} with {len(detections)} detections to {outdir}")
    return 0


def cmd_gradcheck(cfg: dict[str, object], args: argparse.Namespace) -> int:
    outdir = ensure_outdir(cfg, args)
    results = gradcheck_suite(seed=int(cfg["seed"]),
                              points=int(cfg["gradcheck.points"]))
    tol = 1e-4
    width = max(len(name) for name, _ in results)
    failed = []
    for name, err in results:
        status = "ok" if err < tol else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
        if err >= tol:
            failed.append(name)
    write_report(os.path.join(outdir, "report.json"),
                 {name: err for name, err in results})
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(cfg: dict[str, object], args: argparse.Namespace) -> int:
    outdir = ensure_outdir(cfg, args)
    csv_path = os.path.join(outdir, "sweep.csv")
    columns = ("beta", "eta", "epsilon", "gamma", "split", "k", "seed",
               "map_base", "map_novel", "map_all")
    done: set[tuple[str, ...]] = set()
    fresh = not os.path.exists(csv_path) or os.path.getsize(csv_path) == 0
    if not fresh:
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                done.add(tuple(row[c] for c in columns[:7]))

    base_cache: dict[tuple, det.DetectorParams] = {}
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(columns)
            fh.flush()
        for split_id in cfg["sweep.split"]:
            for seed in cfg["sweep.seeds"]:
                for eps in cfg["sweep.epsilon"]:
                    for beta in cfg["sweep.beta"]:
                        for eta in cfg["sweep.eta"]:
                            for gamma in cfg["sweep.gamma"]:
                                for k in cfg["sweep.k"]:
                                    key = tuple(str(v) for v in
                                                (beta, eta, eps, gamma,
                                                 split_id, k, seed))
                                    if key in done:
                                        continue
                                    row = sweep_cell(cfg, beta, eta, eps, gamma,
                                                     split_id, k, seed, base_cache)
                                    writer.writerow(key + row)
                                    fh.flush()
                                    print(",".join(key + row), flush=True)
    print(f"sweep table: {csv_path}")
    return 0


def sweep_cell(cfg: dict[str, object], beta, eta, eps, gamma, split_id, k, seed,
               base_cache: dict) -> tuple[str, str, str]:
    cell = dict(cfg)
    cell.update({"seed": int(seed), "data.split": int(split_id),
                 "detector.epsilon": float(eps), "novel.beta": float(beta),
                 "novel.eta": float(eta), "novel.gamma": float(gamma),
                 "novel.k": int(k)})
    bench, split = benchmark(cell)
    dcfg = detector_config(cell)
    provider = saliency_provider(cell, dcfg)

    cache_key = (int(split_id), int(seed), float(eps))
    if cache_key not in base_cache:
        base_cache[cache_key], _ = fs.train_base(
            bench.base_train, dcfg, train_config(cell, "base"),
            sorted(split.base), seed=int(seed), saliency_provider=provider)
    hp = hyperparams(cell, epsilon=dcfg.epsilon)
    support = fs.sample_support_set(bench.novel_pool, split, hp.k_shots,
                                    seed=int(seed),
                                    base_multiplier=hp.base_multiplier)
    params, _ = fs.train_novel(base_cache[cache_key], support, dcfg,
                               train_config(cell, "novel"), hp, seed=int(seed),
                               saliency_provider=provider)
    result = det.evaluate_detector(params, dcfg, bench.test,
                                   saliency_provider=provider,
                                   novel_ids=split.novel)
    return (f"{result['map_base']:.6f}", f"{result['map_novel']:.6f}",
            f"{result['map_all']:.6f}")


# ---------------------------------------------------------------------------
# gradient-check suite
# ---------------------------------------------------------------------------

def _away_from(rng: np.random.Generator, shape, gap: float = 0.1,
               spread: float = 1.0) -> np.ndarray:
    """Values with |v| >= gap, so finite differences cannot cross a kink."""
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return sign * rng.uniform(gap, gap + spread, shape)


def _elementary_checks(rng: np.random.Generator) -> list[tuple[str, float]]:
    h = 1e-4

    def scalarized(name, build, **leaves):
        w_cache = {}

        def f(ts):
            out = build(ts)
            if out.data.shape not in w_cache:
                w_cache[out.data.shape] = rng.standard_normal(out.data.shape)
            return T.sum_all(T.mul(out, T.Tensor(w_cache[out.data.shape])))

        report = T.grad_check(f, leaves, h=h)
        return name, max(report.values())

    c = float(rng.uniform(0.5, 2.0))
    eps = float(rng.uniform(0.5, 3.0))
    a34 = rng.standard_normal((3, 4))
    idx = np.array([0, 2, 2, 4])
    targets = rng.integers(0, 3, size=7)
    checks = [
        scalarized("add", lambda ts: T.add(ts["a"], ts["b"]),
                   a=a34, b=rng.standard_normal((3, 4))),
        scalarized("sub", lambda ts: T.sub(ts["a"], ts["b"]),
                   a=rng.standard_normal((2, 5)), b=rng.standard_normal((2, 5))),
        scalarized("mul_broadcast", lambda ts: T.mul(ts["a"], ts["b"]),
                   a=a34, b=rng.standard_normal(4)),
        scalarized("neg", lambda ts: T.neg(ts["a"]), a=rng.standard_normal(6)),
        scalarized("scale", lambda ts: T.scale(ts["a"], c),
                   a=rng.standard_normal((3, 3))),
        scalarized("relu", lambda ts: T.relu(ts["a"]),
                   a=_away_from(rng, (4, 4))),
        scalarized("log_shift", lambda ts: T.log_shift(ts["a"], eps),
                   a=rng.uniform(0.1, 2.0, (3, 3))),
        scalarized("square", lambda ts: T.square(ts["a"]),
                   a=rng.standard_normal((2, 3))),
        scalarized("smooth_l1", lambda ts: T.smooth_l1(ts["a"], ts["b"]),
                   a=a34, b=a34 - _away_from(rng, (3, 4), gap=0.1, spread=0.7)),
        scalarized("sum_all", lambda ts: T.sum_all(ts["a"]),
                   a=rng.standard_normal(7)),
        scalarized("mean_all", lambda ts: T.mean_all(ts["a"]),
                   a=rng.standard_normal((3, 5))),
        scalarized("sum_axes", lambda ts: T.sum_axes(ts["a"], (0, 2)),
                   a=rng.standard_normal((2, 3, 4))),
        scalarized("reshape", lambda ts: T.reshape(ts["a"], (3, 4)),
                   a=rng.standard_normal((2, 6))),
        scalarized("transpose", lambda ts: T.transpose(ts["a"], (2, 0, 1)),
                   a=rng.standard_normal((2, 3, 4))),
        scalarized("concat", lambda ts: T.concat([ts["a"], ts["b"]], axis=0),
                   a=rng.standard_normal((2, 3)), b=rng.standard_normal((4, 3))),
        scalarized("gather", lambda ts: T.gather(ts["a"], idx, axis=0),
                   a=rng.standard_normal((5, 4))),
        scalarized("dot", lambda ts: T.dot(ts["a"], ts["b"]),
                   a=rng.standard_normal(6), b=rng.standard_normal(6)),
        scalarized("matmul", lambda ts: T.matmul(ts["a"], ts["b"]),
                   a=rng.standard_normal((3, 4)), b=rng.standard_normal((4, 5))),
        scalarized("l2_normalize", lambda ts: T.l2_normalize(ts["a"], axis=-1),
                   a=rng.standard_normal((4, 5)) + _away_from(rng, (4, 5), 0.2)),
        scalarized("softmax_spatial", lambda ts: T.softmax_spatial(ts["a"]),
                   a=rng.standard_normal((5, 5))),
        scalarized("softmax_cross_entropy",
                   lambda ts: T.softmax_cross_entropy(ts["a"], targets),
                   a=rng.standard_normal((7, 3))),
        scalarized("layer_norm",
                   lambda ts: T.layer_norm(ts["x"], ts["gain"], ts["bias"]),
                   x=rng.standard_normal(8), gain=rng.uniform(0.5, 1.5, 8),
                   bias=rng.standard_normal(8)),
        scalarized("conv2d",
                   lambda ts: T.conv2d(ts["x"], ts["k"], ts["b"],
                                       stride=1, padding=1),
                   x=rng.standard_normal((2, 5, 5)),
                   k=rng.standard_normal((3, 2, 3, 3)) * 0.5,
                   b=rng.standard_normal(3)),
    ]
    return checks


def _micro_setup(rng: np.random.Generator):
    """A detector small enough for sampled finite differences."""
    cfg = det.DetectorConfig(
        image_size=16, backbone_channels=(4, 6, 8, 10), feat_dim=6,
        bottleneck_ratio=2,
        anchors=det.AnchorConfig(map_sizes=((2, 2), (1, 1)), scales=(0.3, 0.6)))
    class_ids = [1, 2, 3]
    params = det.init_detector_params(cfg, class_ids, rng)
    image = rng.uniform(0.0, 1.0, (3, 16, 16))
    saliency = rng.uniform(0.0, 1.0, (4, 4))
    anchors = det.generate_anchors(cfg.anchors)
    gt_boxes = [det.Box(0.45, 0.5, 0.5, 0.55), det.Box(0.8, 0.75, 0.3, 0.4)]
    gt_labels = [1, 3]
    match = det.match_anchors(anchors, gt_boxes, gt_labels, cfg.pos_thr)

    probe = det.forward(image, saliency, params, cfg)
    mined = det.hard_negative_mining(det.background_ce(probe.logits.data),
                                     match, cfg.neg_pos_ratio)
    point = {name: t.data for name, t in params.tensors.items()}

    def outputs_of(ts):
        run = det.DetectorParams(dict(ts), class_ids)
        return run, det.forward(image, saliency, run, cfg)

    return cfg, anchors, gt_boxes, mined, point, outputs_of


def _composite_checks(rng: np.random.Generator) -> list[tuple[str, float]]:
    cfg, anchors, gt_boxes, mined, point, outputs_of = _micro_setup(rng)
    n_anchors = len(anchors)
    base_logits = rng.standard_normal((n_anchors, 3))
    base_offsets = rng.standard_normal((n_anchors, 4))
    hp = fs.Hyperparams()

    def check(name, f):
        report = T.grad_check_sampled(f, point, h=1e-4, samples_per_leaf=2,
                                      rng=rng)
        return name, max(report.values())

    def f_base(ts):
        run, out = outputs_of(ts)
        return det.base_loss(out, mined, gt_boxes, anchors, run, cfg)[0]

    def f_obj(ts):
        run, out = outputs_of(ts)
        return fs.object_concentration_loss(out.features, run.cls_rows, mined, run)

    def f_bg(ts):
        run, out = outputs_of(ts)
        return fs.background_concentration_loss(out.features, run.cls_rows, mined)

    def f_dist(ts):
        _, out = outputs_of(ts)
        return fs.distillation_loss(out, base_logits, base_offsets)

    def f_novel(ts):
        run, out = outputs_of(ts)
        return fs.novel_loss(out, mined, gt_boxes, anchors, run, cfg, hp,
                             base_logits=base_logits,
                             base_offsets=base_offsets)[0]

    return [check("base_loss", f_base),
            check("object_concentration_loss", f_obj),
            check("background_concentration_loss", f_bg),
            check("distillation_loss", f_dist),
            check("novel_loss", f_novel)]


def gradcheck_suite(seed: int = 0, points: int = 10) -> list[tuple[str, float]]:
    """Finite-difference verification of every op and composite loss.

    Each check reports its maximum relative error over ``points`` random
    evaluation points; composite losses probe a coordinate sample of every
    parameter tensor instead of the full weight vector.
    """
    worst: dict[str, float] = {}
    order: list[str] = []
    for p in range(points):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11, p]))
        for name, err in _elementary_checks(rng) + _composite_checks(rng):
            if name not in worst:
                worst[name] = err
                order.append(name)
            else:
                worst[name] = max(worst[name], err)
    return [(name, worst[name]) for name in order]


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def ensure_outdir(cfg: dict[str, object], args: argparse.Namespace) -> str:
    root = os.environ.get("FEWDET_OUT", "runs")
    outdir = args.out if args.out else os.path.join(root, args.command)
    os.makedirs(outdir, exist_ok=True)
    write_snapshot(cfg, outdir)
    return outdir


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewdet",
        description="few-shot detection pipeline on seeded synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, ckpt_flags=()):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config of flat dotted keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (JSON value or bare string)")
        p.add_argument("--out", help="output directory "
                       "(default: $FEWDET_OUT/<command> or runs/<command>)")
        for flag, help_flag in ckpt_flags:
            p.add_argument(flag, required=True, help=help_flag)
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "dump benchmark scenes as PPM plus sidecars")
    add("train-base", cmd_train_base, "train the base detector")
    add("train-novel", cmd_train_novel, "imprint and fine-tune novel classes",
        ckpt_flags=[("--base-ckpt", "base-stage checkpoint path")])
    add("eval", cmd_eval, "evaluate a checkpoint on the test split",
        ckpt_flags=[("--ckpt", "checkpoint path")])
    add("gradcheck", cmd_gradcheck, "finite-difference gradient verification")
    add("render-attention", cmd_render_attention,
        "write image, saliency, top-down map, and detections for one scene",
        ckpt_flags=[("--ckpt", "checkpoint path")])
    add("sweep", cmd_sweep, "hyperparameter grid over (beta, eta, epsilon, "
        "gamma, split, k, seed), resumable CSV")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        cfg = resolve_config(args.config, args.set)
        return args.func(cfg, args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except fs.DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (T.CheckpointError, sd.GenerationError, fs.SupportError,
            fs.ImprintError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
