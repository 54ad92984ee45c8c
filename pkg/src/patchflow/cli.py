"""Command-line surface: data generation, training, inference, animation,
interpolation, analysis, and evaluation.

Every command reads an optional JSON config (flags override config keys),
emits its artifacts under --out, and writes a run_summary.json with the
config hash, metrics, and timings.  Exit codes: 0 ok, 2 config error,
3 missing input, 4 format/version error, 5 numeric failure, 1 unexpected.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import datagen, evalviz, gabor, inference, training
from .core import DisplacementField
from .errors import (
    ConfigError,
    DataFormatError,
    NumericError,
    PatchflowError,
)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5

SCHEMA_VERSION = 1


def default_config() -> dict:
    return {
        "seed": 0,
        "threads": 1,
        "train": dataclasses.asdict(training.TrainConfig()),
        "deform": {"grid_m": 4, "lo": -6.0, "hi": 6.0},
        "scene": {
            "lo": -6.0,
            "hi": 6.0,
            "bg_translation": 3.0,
            "bg_rotation": 0.03,
            "bg_scale": 0.02,
            "fg_translation": 2.5,
            "fg_rotation": 0.05,
            "fg_scale": 0.03,
            "fg_size": [0.3, 0.5],
            "max_retries": 100,
        },
        "infer": {
            "margin": 8,
            "smoothness_weight": 0.0,
            "step_size": 0.25,
            "max_iters": 200,
            "tol": 1e-4,
            "init": "random",
        },
        "unsupervised": {
            "init_pairs": 64,
            "init_steps": 300,
            "steps_per_round": 100,
            "rounds": 5,
            "field_tol": 0.05,
            "smoothness_weight": 0.05,
            "infer_step": 0.2,
            "infer_iters": 60,
            "deform_grid_m": 4,
            "deform_lo": -3.0,
            "deform_hi": 3.0,
        },
        "datagen": {"pairs": 200, "image_size": 64, "synthetic_sources": 8, "mode": "binary"},
    }


DESK_SCALE = {
    "train": {"num_blocks": 10, "block_dim": 2, "patch_size": 16, "stride": 8, "num_steps": 2000},
    "datagen": {"pairs": 2000, "image_size": 64},
}


def _merge_config(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge_config(base[key], value, where)
        else:
            base[key] = value


def load_config(path, overrides: dict | None = None) -> dict:
    config = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        _merge_config(config, user)
    if overrides:
        _merge_config(config, overrides)
    return config


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_summary(out_dir: Path, command: str, config: dict, metrics: dict, timings: dict, artifacts: list[str]) -> None:
    summary = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": config.get("seed"),
        "metrics": metrics,
        "timings": timings,
        "artifacts": sorted(artifacts),
    }
    with open(out_dir / "run_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def parallel_map(fn, items, threads: int):
    """Order-preserving map; results are independent of the thread count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _train_config(config: dict, seed: int) -> training.TrainConfig:
    return training.TrainConfig(**{**config["train"], "rng_seed": seed})


def _infer_config(config: dict, seed: int) -> inference.InferConfig:
    return inference.InferConfig(**{**config["infer"], "rng_seed": seed})


def _load_sources(args, config) -> list[np.ndarray]:
    if args.sources is not None:
        src_dir = Path(args.sources)
        if not src_dir.is_dir():
            raise FileNotFoundError(f"source directory {src_dir} not found")
        files = sorted(src_dir.glob("*.pgm")) + sorted(src_dir.glob("*.ppm"))
        if not files:
            raise FileNotFoundError(f"no PGM/PPM images under {src_dir}")
        return [evalviz.load_image(f) for f in files]
    n = config["datagen"]["synthetic_sources"]
    size = config["datagen"]["image_size"]
    return datagen.synthetic_textures(n, (size, size), seed=config["seed"])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, config) -> dict:
    sources = _load_sources(args, config)
    spec = datagen.DeformSpec(
        grid_m=config["deform"]["grid_m"],
        lo=config["deform"]["lo"],
        hi=config["deform"]["hi"],
        seed=config["seed"],
    )
    n = config["datagen"]["pairs"]
    pairs = parallel_map(
        lambda i: datagen.deform_sample(sources, spec, i), range(n), config["threads"]
    )
    datagen.dataset_write(pairs, args.out, mode=config["datagen"]["mode"], spec_echo=dataclasses.asdict(spec))
    mags = [float(np.linalg.norm(p.field, axis=2).mean()) for p in pairs]
    return {"pairs": n, "mean_field_magnitude": float(np.mean(mags)) if mags else 0.0}


def _disk_mask(size: int) -> np.ndarray:
    r = size / 2.0 - 0.5
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return ((yy - r) ** 2 + (xx - r) ** 2 <= (0.45 * size) ** 2).astype(np.float64)


def cmd_gen_objects(args, config) -> dict:
    backgrounds = _load_sources(args, config)
    size = config["datagen"]["image_size"]
    fg_size = max(8, size // 2)
    n_fg = max(2, config["datagen"]["synthetic_sources"] // 2)
    foregrounds = datagen.synthetic_textures(n_fg, (fg_size, fg_size), seed=config["seed"] + 1)
    masks = [_disk_mask(fg_size)] * n_fg
    scene = dict(config["scene"])
    scene["fg_size"] = tuple(scene["fg_size"])
    spec = datagen.AffineSceneSpec(**scene, seed=config["seed"])
    n = config["datagen"]["pairs"]
    pairs = parallel_map(
        lambda i: datagen.scene_sample(backgrounds, foregrounds, masks, spec, i),
        range(n),
        config["threads"],
    )
    datagen.dataset_write(pairs, args.out, mode=config["datagen"]["mode"])
    return {"pairs": n}


def cmd_train(args, config) -> dict:
    dataset = datagen.dataset_read(args.data)
    tcfg = _train_config(config, config["seed"])
    encoder, model, history = training.train_supervised(dataset, tcfg)
    out = Path(args.out)
    training.save_checkpoint(out / "model.ckpt", encoder, model, extra={"train": config["train"], "seed": config["seed"]})
    with open(out / "loss_history.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(history):
            fh.write(f"{i},{loss:.12g}\n")
    return {
        "steps": len(history),
        "initial_loss": history[0] if history else None,
        "final_loss": history[-1] if history else None,
    }


def _read_sequences(frames_dir: Path) -> list[list[np.ndarray]]:
    seq_dirs = sorted(d for d in frames_dir.iterdir() if d.is_dir())
    if seq_dirs:
        seqs = []
        for d in seq_dirs:
            files = sorted(d.glob("*.pgm")) + sorted(d.glob("*.ppm"))
            if len(files) >= 2:
                seqs.append([evalviz.load_image(f) for f in files])
        if not seqs:
            raise FileNotFoundError(f"no frame sequences with >= 2 images under {frames_dir}")
        return seqs
    files = sorted(frames_dir.glob("*.pgm")) + sorted(frames_dir.glob("*.ppm"))
    if len(files) < 2:
        raise FileNotFoundError(f"need at least two frames under {frames_dir}")
    return [[evalviz.load_image(f) for f in files]]


def cmd_train_unsup(args, config) -> dict:
    frames_dir = Path(args.frames)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frames directory {frames_dir} not found")
    sequences = _read_sequences(frames_dir)
    tcfg = dataclasses.replace(
        _train_config(config, config["seed"]), motion_variant="parametric"
    )
    ucfg = training.UnsupervisedConfig(train=tcfg, **config["unsupervised"])
    encoder, model, diag = training.train_unsupervised(sequences, ucfg)
    out = Path(args.out)
    training.save_checkpoint(out / "model.ckpt", encoder, model, extra={"seed": config["seed"]})
    for i, vec in enumerate(diag["fields"]):
        inference.write_field(out / f"field_{i:05d}.v1fd", DisplacementField(diag["positions"], vec))
    return {
        "sequences": len(sequences),
        "rounds_run": len(diag["field_changes"]),
        "objectives": diag["objectives"],
        "field_changes": diag["field_changes"],
    }


def _infer_one(encoder, model, pair, icfg):
    if isinstance(model, training.ParametricMotion):
        return inference.infer_parametric(encoder, model, pair.image_t, pair.image_t1, icfg)
    return inference.infer_grid(encoder, model, pair.image_t, pair.image_t1, icfg)


def cmd_infer(args, config) -> dict:
    encoder, model, _ = training.load_checkpoint(args.checkpoint)
    icfg = _infer_config(config, config["seed"])
    out = Path(args.out)
    if args.pair:
        img_a = evalviz.load_image(args.pair[0])
        img_b = evalviz.load_image(args.pair[1])
        pairs = [datagen.SamplePair(img_a, img_b, np.zeros(img_a.shape + (2,)))]
    else:
        if args.data is None:
            raise ConfigError("infer needs --data or --pair")
        pairs = datagen.dataset_read(args.data)
        if args.limit is not None:
            pairs = pairs[: args.limit]
    fields = parallel_map(
        lambda p: _infer_one(encoder, model, p, icfg), pairs, config["threads"]
    )
    for i, fld in enumerate(fields):
        inference.write_field(out / f"field_{i:05d}.v1fd", fld)
        if args.text:
            inference.write_field_text(out / f"field_{i:05d}.txt", fld)
        if args.color:
            ny = len(np.unique(fld.positions[:, 0]))
            nx = len(np.unique(fld.positions[:, 1]))
            rgb = evalviz.flow_to_color(fld.vectors.reshape(ny, nx, 2))
            evalviz.write_ppm(out / f"field_{i:05d}.ppm", rgb)
    return {"pairs": len(pairs)}


def cmd_animate(args, config) -> dict:
    encoder, model, _ = training.load_checkpoint(args.checkpoint)
    start = evalviz.load_image(args.start)
    fields = [inference.read_field(f) for f in args.field]
    frames = inference.animate(encoder, model, start, fields)
    out = Path(args.out)
    for i, frame in enumerate(frames):
        evalviz.write_pgm(out / f"frame_{i:05d}.pgm", frame)
    return {"frames": len(frames)}


def cmd_interpolate(args, config) -> dict:
    encoder, model, _ = training.load_checkpoint(args.checkpoint)
    img_a = evalviz.load_image(args.start)
    img_b = evalviz.load_image(args.end)
    frames, ok = inference.interpolate_frames(
        encoder, model, img_a, img_b, max_steps=args.max_steps, stop_thresh=args.stop_thresh
    )
    out = Path(args.out)
    for i, frame in enumerate(frames):
        evalviz.write_pgm(out / f"frame_{i:05d}.pgm", frame)
    return {"frames": len(frames), "success": bool(ok)}


def cmd_analyze(args, config) -> dict:
    encoder, model, _ = training.load_checkpoint(args.checkpoint)
    fits = gabor.fit_all_units(encoder)
    out = Path(args.out)
    gabor.write_unit_csv(out / "units.csv", encoder, fits)
    stats = gabor.population_stats(encoder, fits)
    p = encoder.patch_size
    raw = encoder.matrix().reshape(-1, p, p)
    fitted = np.stack([gabor.gabor_eval(f, p) for f in fits])
    evalviz.write_pgm(out / "filters_raw.pgm", gabor.filter_montage(raw, cols=encoder.block_dim * 4))
    evalviz.write_pgm(out / "filters_fit.pgm", gabor.filter_montage(fitted, cols=encoder.block_dim * 4))
    finite_bw = stats.bandwidths[np.isfinite(stats.bandwidths)]
    metrics = {
        "units": len(fits),
        "r2_mean": stats.r2_mean,
        "r2_std": stats.r2_std,
        "bandwidth_mean_octaves": float(finite_bw.mean()) if len(finite_bw) else None,
        "pairs_skipped": stats.pairs_skipped,
        "pair_dphi_hist": stats.pair_dphi_hist[0].tolist(),
        "folded_phase_hist": stats.folded_phase_hist[0].tolist(),
    }
    with open(out / "stats.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return metrics


def cmd_eval(args, config) -> dict:
    pairs = datagen.dataset_read(args.data)
    margin = config["infer"]["margin"]
    if args.zero_predictor:
        # baseline: the all-zero field on the default lattice
        from .core import GridSpec

        grid = GridSpec(config["train"]["patch_size"], config["train"]["stride"])
        fields = []
        for p in pairs:
            pos = grid.positions(*p.image_t.shape)
            fields.append(DisplacementField(pos, np.zeros((len(pos), 2))))
    else:
        if args.pred is None:
            raise ConfigError("eval needs --pred or --zero-predictor")
        pred_dir = Path(args.pred)
        files = sorted(pred_dir.glob("field_*.v1fd"))
        if not files:
            raise FileNotFoundError(f"no field files under {pred_dir}")
        fields = [inference.read_field(f) for f in files]
        if len(fields) > len(pairs):
            raise DataFormatError("more predicted fields than ground-truth pairs")
        pairs = pairs[: len(fields)]
    reports = [
        evalviz.epe(fld, pair.field, margin=margin) for fld, pair in zip(fields, pairs)
    ]
    all_errors = np.concatenate([r.errors for r in reports])
    pooled = float(all_errors.mean())
    per_image = [r.mean_epe for r in reports]
    out = Path(args.out)
    with open(out / "epe.csv", "w") as fh:
        fh.write("pair,count,mean_epe\n")
        for i, r in enumerate(reports):
            fh.write(f"{i},{r.count},{r.mean_epe:.9g}\n")
        fh.write(f"pooled,{len(all_errors)},{pooled:.9g}\n")
        fh.write(f"mean_of_means,{len(reports)},{float(np.mean(per_image)):.9g}\n")
    return {
        "pairs": len(reports),
        "epe_pooled": pooled,
        "epe_mean_of_means": float(np.mean(per_image)),
    }


def cmd_filters(args, config) -> dict:
    encoder, model, _ = training.load_checkpoint(args.checkpoint)
    deltas = []
    for token in args.delta_path.split(";"):
        a, b = token.split(",")
        deltas.append((float(a), float(b)))
    frames = gabor.animate_filters(encoder, model, args.block, deltas)
    out = Path(args.out)
    for i, frame in enumerate(frames):
        evalviz.write_pgm(out / f"filters_{i:05d}.pgm", gabor.filter_montage(frame))
    return {"frames": len(frames), "block": args.block}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchflow",
        description="Train and run the coupled patch-encoding / motion-matrix model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="worker thread cap (default 1)")
        p.add_argument("--desk-scale", action="store_true", help="small-model preset")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate a smooth-deformation dataset")
    common(p)
    p.add_argument("--sources", help="directory of PGM/PPM source images")
    p.add_argument("--pairs", type=int, help="number of pairs")
    p.add_argument("--size", type=int, help="synthetic source image size")
    p.add_argument("--range", type=float, help="displacement range [-r, +r]")

    p = sub.add_parser("gen-objects", help="generate a layered affine-scene dataset")
    common(p)
    p.add_argument("--sources", help="directory of PGM/PPM background images")
    p.add_argument("--pairs", type=int)
    p.add_argument("--size", type=int)

    p = sub.add_parser("train", help="supervised training on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--variant", choices=["nonparametric", "mixed", "parametric"])
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--blocks", type=int, help="number of sub-vectors K")

    p = sub.add_parser("train-unsup", help="three-stage unsupervised training")
    common(p)
    p.add_argument("--frames", required=True, help="directory of frame sequences")
    p.add_argument("--steps", type=int, help="stage-1 initialization steps")

    p = sub.add_parser("infer", help="infer displacement fields")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory to infer over")
    p.add_argument("--pair", nargs=2, metavar=("T0", "T1"), help="one explicit image pair")
    p.add_argument("--limit", type=int, help="only infer the first N pairs")
    p.add_argument("--text", action="store_true", help="also write text dumps")
    p.add_argument("--color", action="store_true", help="also write color-coded PPMs")
    p.add_argument("--margin", type=int)

    p = sub.add_parser("animate", help="animate frames from a start image and fields")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--start", required=True, help="start frame (PGM/PPM)")
    p.add_argument("--field", action="append", required=True, help="field file (repeatable)")

    p = sub.add_parser("interpolate", help="interpolate between two frames")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--start", required=True)
    p.add_argument("--end", required=True)
    p.add_argument("--max-steps", type=int, default=10)
    p.add_argument("--stop-thresh", type=float, default=10.0 / 255.0)

    p = sub.add_parser("analyze", help="fit Gabors and emit unit statistics")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", help="endpoint error of predicted fields")
    common(p)
    p.add_argument("--data", required=True, help="ground-truth dataset directory")
    p.add_argument("--pred", help="directory of predicted field files")
    p.add_argument("--zero-predictor", action="store_true", help="score the zero-field baseline")
    p.add_argument("--margin", type=int)

    p = sub.add_parser("filters", help="render filters moved by a displacement path")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--delta-path", default="0,0;1,0;2,0", help='e.g. "0,0;0.5,0;1,0"')

    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "gen-objects": cmd_gen_objects,
    "train": cmd_train,
    "train-unsup": cmd_train_unsup,
    "infer": cmd_infer,
    "animate": cmd_animate,
    "interpolate": cmd_interpolate,
    "analyze": cmd_analyze,
    "eval": cmd_eval,
    "filters": cmd_filters,
}


def _collect_overrides(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    train_over = {}
    for attr, key in [
        ("variant", "motion_variant"),
        ("steps", "num_steps"),
        ("lr", "learning_rate"),
        ("batch_size", "batch_size"),
        ("blocks", "num_blocks"),
    ]:
        if getattr(args, attr, None) is not None:
            train_over[key] = getattr(args, attr)
    if args.command == "train-unsup" and getattr(args, "steps", None) is not None:
        over.setdefault("unsupervised", {})["init_steps"] = args.steps
        train_over.pop("num_steps", None)
    if train_over:
        over["train"] = train_over
    datagen_over = {}
    if getattr(args, "pairs", None) is not None:
        datagen_over["pairs"] = args.pairs
    if getattr(args, "size", None) is not None:
        datagen_over["image_size"] = args.size
    if datagen_over:
        over["datagen"] = datagen_over
    if getattr(args, "range", None) is not None:
        over["deform"] = {"lo": -args.range, "hi": args.range}
    if getattr(args, "margin", None) is not None:
        over["infer"] = {"margin": args.margin}
    return over


def run(args) -> int:
    config = default_config()
    if args.desk_scale:
        _merge_config(config, DESK_SCALE)
    if args.config is not None:
        p = Path(args.config)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        _merge_config(config, user)
    _merge_config(config, _collect_overrides(args))

    # validate inputs before any work
    for attr in ("data", "checkpoint", "start", "end", "frames"):
        value = getattr(args, attr, None)
        if value is not None and not Path(value).exists():
            raise FileNotFoundError(f"--{attr} path {value} not found")
    if getattr(args, "pair", None):
        for f in args.pair:
            if not Path(f).exists():
                raise FileNotFoundError(f"pair image {f} not found")
    if getattr(args, "field", None):
        for f in args.field:
            if not Path(f).exists():
                raise FileNotFoundError(f"field file {f} not found")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    metrics = COMMANDS[args.command](args, config)
    timings = {"wall_seconds": round(time.time() - started, 3)}
    write_summary(out, args.command, config, metrics, timings, [p.name for p in out.iterdir()])
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DataFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PatchflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
