"""``soilbench`` command line.

Every command reads one INI config (see :mod:`soilbench.config`), writes a
``run_info`` file into its output directory and holds a lock file there while
running. Failures print a single line ``soilbench: error <CODE> exit=<n>: <text>`` on
stderr and exit with 2 (config), 3 (data) or 4 (numerical divergence).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import RunConfig, apply_overrides, load_config
from .dataset import (Split, apply_split, category_stats, load_frame_arrays, load_manifest,
                      save_manifest, tile_labels)
from .errors import ConfigError, DataError, ManifestError, NumericalError, SoilbenchError
from .evaluation import (binarize, evaluate_model, format_summary, parse_cameras,
                         parse_positive, read_report, run_regime, write_report)
from .gan import (CycleGANConfig, augment_manifest, domain_images, load_generator,
                  save_generators, train_cyclegan, write_loss_history)
from .gradcheck import run_all
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import IMAGE, TILE, SoilingNet
from .nn.optim import Adam
from .nn.train import fit, grid_search, predict
from .synth import build_synthetic_dataset

log = logging.getLogger("soilbench")

LOCK_NAME = ".soilbench.lock"
TILE_CACHE = "tile_labels.npz"
COMMANDS = ("synth", "rasterize", "split", "train", "eval", "gradcheck", "gan-train",
            "gan-augment", "report")


# -- plumbing -----------------------------------------------------------------

@contextmanager
def output_lock(out_dir: Path):
    """Exclusive lock file; a second concurrent run on the same directory fails fast."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"{out_dir} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_run_info(out_dir: Path, command: str, cfg: RunConfig, seed: int | None) -> None:
    lines = [f"tool: soilbench {__version__}", f"command: {command}",
             f"config_digest: {cfg.digest()}", f"seed: {seed if seed is not None else '-'}"]
    (out_dir / "run_info").write_text("\n".join(lines) + "\n")


def thread_limit() -> int | None:
    raw = os.environ.get("SOILBENCH_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"SOILBENCH_THREADS must be a positive integer, got {raw!r}")
    return n


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise DataError(f"{what} {path} does not exist")
    return path


def _load_manifest(cfg: RunConfig, override: str | None):
    path = Path(override) if override else cfg.manifest_path()
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    return path, load_manifest(path)


def _image_hw(manifest) -> tuple[int, int]:
    if not manifest.records:
        raise ManifestError("manifest has no frames")
    r = manifest.records[0]
    return r.height, r.width


def _load_tile_cache(root: Path, settings) -> dict | None:
    path = root / TILE_CACHE
    if not path.exists():
        return None
    with np.load(path) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta != {"tile_size": settings.tile_size, "tau": settings.tau,
                    "samples_per_side": settings.samples_per_side}:
            log.info("ignoring %s: built with different geometry %s", path, meta)
            return None
        return {k: z[k] for k in z.files if k != "__meta__"}


def _seed(args, cfg: RunConfig, section: str) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.get(section, "seed", 0)


# -- commands -----------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> Path:
    if args.seed is not None:
        cfg.values.setdefault("synth", {})["seed"] = args.seed
    sc = cfg.synth()
    out = Path(args.out) if args.out else cfg.data_dir()
    with output_lock(out):
        manifest = build_synthetic_dataset(sc, out)
        write_run_info(out, "synth", cfg, sc.seed)
    stats = category_stats(manifest, None)
    print(f"wrote {len(manifest)} frames to {out} "
          + " ".join(f"{c.name.lower()}={n}" for c, n in stats.items()))
    return out


def cmd_rasterize(args, cfg: RunConfig) -> Path:
    path, manifest = _load_manifest(cfg, args.manifest)
    settings = cfg.regime()
    out = Path(args.out) if args.out else path.parent
    with output_lock(out):
        labels = {r.frame_id: tile_labels(r, settings.tile_size, settings.tau,
                                          settings.samples_per_side)
                  for r in manifest.records if not r.augmented}
        meta = json.dumps({"tile_size": settings.tile_size, "tau": settings.tau,
                           "samples_per_side": settings.samples_per_side})
        tmp = out / (TILE_CACHE + ".tmp.npz")
        np.savez(tmp, __meta__=np.array(meta), **labels)
        os.replace(tmp, out / TILE_CACHE)
        write_run_info(out, "rasterize", cfg, None)
    print(f"rasterized {len(labels)} frames at tile size {settings.tile_size} -> {out / TILE_CACHE}")
    return out


def cmd_split(args, cfg: RunConfig) -> Path:
    path, manifest = _load_manifest(cfg, args.manifest)
    seed = _seed(args, cfg, "split")
    ratios = cfg.split_ratios()
    manifest = apply_split(manifest, ratios, seed, cfg.get("split", "min_area_frac", 0.0))
    out = Path(args.out) if args.out else path.parent
    with output_lock(out):
        save_manifest(manifest, out / path.name)
        write_run_info(out, "split", cfg, seed)
    for split in Split:
        stats = category_stats(manifest, split)
        print(f"{split.value:>5}: " + " ".join(f"{c.name.lower()}={n}" for c, n in stats.items()))
    return out


def _train_data(cfg: RunConfig, manifest, root: Path, split: Split, cameras, model_cfg):
    settings = cfg.regime()
    recs = manifest.select(split, cameras)
    if not recs:
        raise ManifestError(f"no {split.value} frames for cameras "
                            f"{','.join(c.value for c in cameras)}; run split first")
    tile = settings.tile_size if TILE in model_cfg.heads else None
    return load_frame_arrays(recs, root, tile, settings.tau, settings.samples_per_side,
                             settings.min_area_frac, with_seg="seg" in model_cfg.heads,
                             label_cache=_load_tile_cache(root, settings))


def _val_score(model: SoilingNet, data) -> float:
    """Higher is better: 1 - mean Hamming (image head), else tile accuracy."""
    out = predict(model, data.images)
    if IMAGE in out:
        pred = binarize(out[IMAGE]).reshape(len(data), 2)
        return 1.0 - float((pred != data.image_labels).sum(axis=1).mean())
    return float((binarize(out[TILE]) == data.tile_labels).mean())


def cmd_train(args, cfg: RunConfig) -> Path:
    if args.seed is not None:
        cfg.values.setdefault("train", {})["seed"] = args.seed
    root = _require_dir(cfg.data_dir(), "data directory")
    _, manifest = _load_manifest(cfg, args.manifest)
    model_cfg = cfg.model(_image_hw(manifest))
    tcfg = cfg.train(model_cfg.heads)
    cams = parse_cameras(cfg.get("train", "cameras", cfg.get("eval", "train_cameras", "all")))
    data = _train_data(cfg, manifest, root, Split.TRAIN, cams, model_cfg)
    epochs = cfg.get("train", "epochs")
    if epochs is not None:
        tcfg.steps = epochs * math.ceil(len(data) / min(tcfg.batch_size, len(data)))
    out = Path(args.out) if args.out else Path("train_out")
    with output_lock(out):
        grid = cfg.get("train", "grid")
        if grid:
            val = _train_data(cfg, manifest, root, Split.VAL, cams, model_cfg)

            def train_fn(weights):
                if len(weights) != len(model_cfg.heads):
                    raise ConfigError(f"grid vector {weights} does not match heads {model_cfg.heads}")
                m = SoilingNet(model_cfg)
                tcfg.weights = dict(zip(model_cfg.heads, weights))
                fit(m, data, tcfg)
                return m

            best, scores = grid_search(grid, train_fn, lambda m: _val_score(m, val))
            with open(out / "grid_search.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(list(model_cfg.heads) + ["val_score"])
                for vec, score in zip(grid, scores):
                    w.writerow([repr(float(v)) for v in vec] + [repr(score)])
            tcfg.weights = dict(zip(model_cfg.heads, best))
            print(f"grid search picked weights {best}")
        model = SoilingNet(model_cfg)
        opt = Adam(model.named_parameters(), lr=tcfg.lr)
        history = fit(model, data, tcfg, opt)
        save_checkpoint(out / "model.ckpt", model, opt)
        (out / "model.json").write_text(json.dumps(model_cfg.to_dict(), indent=1, sort_keys=True))
        cols = ["step", "loss"] + [h for h in model_cfg.heads if h in history[-1]]
        with open(out / "train_log.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for e in history:
                w.writerow([e["step"]] + [repr(e[c]) for c in cols[1:]])
        write_run_info(out, "train", cfg, tcfg.seed)
    print(f"trained {tcfg.steps} steps on {len(data)} frames, final loss "
          f"{history[-1]['loss']:.4f} -> {out / 'model.ckpt'}")
    return out


def cmd_eval(args, cfg: RunConfig) -> Path:
    root = _require_dir(cfg.data_dir(), "data directory")
    _, manifest = _load_manifest(cfg, args.manifest)
    model_cfg = cfg.model(_image_hw(manifest))
    settings = cfg.regime()
    train_cams = parse_cameras(cfg.get("eval", "train_cameras", "all"))
    test_cams = parse_cameras(cfg.get("eval", "test_cameras", "all"))
    parse_positive(settings.positive)  # fail early on a bad token
    out = Path(args.out) if args.out else Path("report")
    seed = args.seed if args.seed is not None else cfg.get("eval", "seed",
                                                            cfg.get("train", "seed", 0))
    with output_lock(out):
        cache = _load_tile_cache(root, settings)
        info = {"train_cameras": ",".join(c.value for c in train_cams),
                "test_cameras": ",".join(c.value for c in test_cams), "seed": str(seed)}
        if args.checkpoint:
            model = SoilingNet(model_cfg)
            load_checkpoint(args.checkpoint, model)
            recs = manifest.select(Split.TEST, test_cams)
            if not recs:
                raise ManifestError("no test frames for the requested cameras")
            report = evaluate_model(model, recs, root, settings, info, cache)
        else:
            tcfg = cfg.train(model_cfg.heads)
            report, _ = run_regime(manifest, root, train_cams, test_cams, model_cfg, tcfg,
                                   seed, settings, cache)
            report.info.update(info)
        write_report(report, out)
        write_run_info(out, "eval", cfg, seed)
    print(format_summary(report), end="")
    return out


def cmd_gradcheck(args, cfg: RunConfig | None) -> Path | None:
    results = run_all()
    lines = [f"{'check':<24}{'rel_error':>12}{'tol':>10}{'seconds':>10}  status"]
    for r in results:
        lines.append(f"{r.name:<24}{r.rel_error:>12.3e}{r.tol:>10.0e}{r.seconds:>10.2f}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    print("\n".join(lines))
    out = Path(args.out) if args.out else None
    if out is not None:
        with output_lock(out):
            with open(out / "gradcheck.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["check", "rel_error", "tol", "passed"])
                for r in results:
                    w.writerow([r.name, repr(r.rel_error), repr(r.tol), int(r.passed)])
            write_run_info(out, "gradcheck", cfg or RunConfig(), None)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalError(f"gradient check failed for {', '.join(failed)}")
    return out


def _gan_config(cfg: RunConfig) -> CycleGANConfig:
    g = cfg.values.get("gan", {})
    kw = {k: g[k] for k in ("lr", "beta1", "cycle_weight", "batch_size") if k in g}
    return CycleGANConfig(**kw)


def cmd_gan_train(args, cfg: RunConfig) -> Path:
    root = _require_dir(cfg.data_dir(), "data directory")
    _, manifest = _load_manifest(cfg, args.manifest)
    seed = _seed(args, cfg, "gan")
    size, count = cfg.get("gan", "crop_size", 16), cfg.get("gan", "crops", 64)
    a, b = domain_images(manifest, root, size, count, seed)
    out = Path(args.out) if args.out else Path("gan_out")
    with output_lock(out):
        result = train_cyclegan(a, b, cfg.get("gan", "epochs", 200), seed, _gan_config(cfg),
                                divergence_dir=out / "last_good")
        save_generators(out, result.g_ab, result.g_ba)
        write_loss_history(out / "loss_history.csv", result.history)
        write_run_info(out, "gan-train", cfg, seed)
    h = result.history
    if h:
        print(f"cycle loss {h[0]['cycle_loss']:.4f} (epoch 1) -> {h[-1]['cycle_loss']:.4f} "
              f"(epoch {len(h)}); generators in {out}")
    return out


def cmd_gan_augment(args, cfg: RunConfig) -> Path:
    root = _require_dir(cfg.data_dir(), "data directory")
    path, manifest = _load_manifest(cfg, args.manifest)
    if not args.checkpoint:
        raise ConfigError("gan-augment needs --checkpoint pointing at a G_AB generator")
    gen = load_generator(args.checkpoint)
    label = cfg.get("gan", "label", "opaque")
    vec = {"opaque": (1, 0), "transparent": (0, 1), "both": (1, 1)}.get(label)
    if vec is None:
        raise ConfigError(f"[gan] label must be opaque, transparent or both, got {label!r}")
    seed = _seed(args, cfg, "gan")
    out_name = cfg.get("gan", "output_manifest", "manifest_gan.jsonl")
    with output_lock(root):
        augmented = augment_manifest(manifest, gen, cfg.get("gan", "fraction", 0.5), root, seed,
                                     vec)
        save_manifest(augmented, root / out_name)
        write_run_info(root, "gan-augment", cfg, seed)
    added = len(augmented) - len(manifest)
    print(f"added {added} generated frames -> {root / out_name}")
    return root


def cmd_report(args, cfg: RunConfig | None) -> Path:
    target = Path(args.target or args.out or "")
    if not args.target and not args.out:
        raise ConfigError("report needs a report directory (positional or --out)")
    _require_dir(target, "report directory")
    report = read_report(target)
    print(format_summary(report), end="")
    return target


HANDLERS = {"synth": cmd_synth, "rasterize": cmd_rasterize, "split": cmd_split,
            "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "gan-train": cmd_gan_train, "gan-augment": cmd_gan_augment, "report": cmd_report}
NO_CONFIG = ("gradcheck", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soilbench",
                                description="Camera soiling detection toolkit.")
    p.add_argument("--version", action="version", version=f"soilbench {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("target", nargs="?", help="report directory (report command only)")
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="override the seed of the command's section")
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="model or generator checkpoint")
    p.add_argument("--manifest", help="manifest path (default: [data] dir/manifest)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key; may repeat")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.target and args.command != "report":
            raise ConfigError(f"unexpected argument {args.target!r}")
        cfg = None
        if args.config:
            cfg = load_config(args.config)
        elif args.command not in NO_CONFIG:
            raise ConfigError(f"{args.command} needs --config")
        if args.set:
            if cfg is None:
                cfg = RunConfig()
            apply_overrides(cfg, args.set)
        with threadpool_limits(limits=thread_limit()):
            HANDLERS[args.command](args, cfg)
    except SoilbenchError as exc:
        _fail(exc.code, exc.exit_code, str(exc))
        return exc.exit_code
    except OSError as exc:
        _fail(DataError.code, DataError.exit_code, str(exc))
        return DataError.exit_code
    return 0


def _fail(code: str, exit_code: int, text: str) -> None:
    text = " ".join(text.split())
    print(f"soilbench: error {code} exit={exit_code}: {text}", file=sys.stderr)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
