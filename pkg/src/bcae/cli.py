"""Command line entry point: ``bcae <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import evaluation as ev
from . import frames as fr
from .network import CANONICAL_SHAPE, DOWNSCALE_SHAPE, load_weights, save_weights
from .seeding import derive_seed
from .training import CheckpointError, Trainer, TrainConfig, TrainingDivergence, write_log_csv

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC, EXIT_PLUGIN = 0, 2, 3, 4, 5, 6

DEFAULTS = {
    "generate": {"n_frames": 8, "occupancy": 0.10, "seed": 0, "shape": None, "downscale": False,
                 "width": 1.0},
    "train": {"variant": "bcae", "epochs": 2000, "batch_size": 32, "lr": 0.01, "seed": 0,
              "downscale": False, "shape": None, "gamma": 2.0, "mu": 6.0, "alpha": 20.0, "h": 0.5,
              "weight_decay": 0.01, "beta2": 0.999, "log": None, "resume": None, "checkpoint_every": 0},
    "compress": {"threshold": 0.5},
    "decompress": {"threshold": None, "raw": False},
    "evaluate": {"sweep": "0:1:0.02", "histogram": None, "bins": 100, "seed": 0, "rounded": False},
    "benchmark": {"codecs": "bcae,reference", "bounds": "1,2,4,8,16,32", "model": None,
                  "sweep": "0:1:0.02"},
    "sweep": {"grid": "0:1:0.02"},
    "export": {},
}


class ConfigError(ValueError):
    pass


class KVFormatter(logging.Formatter):
    """``<iso time> <LEVEL> <event> key=value ...`` one record per line."""

    def format(self, record):
        ts = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(record.created))
        fields = getattr(record, "fields", {})
        kv = " ".join(f"{k}={v}" for k, v in fields.items())
        msg = record.getMessage().replace("\n", " ")
        return f"{ts} {record.levelname} {msg}" + (f" {kv}" if kv else "")


log = logging.getLogger("bcae")


def _event(event: str, **fields):
    log.info(event, extra={"fields": fields})


def _shape(text: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"shape must be three positive ints, got {text!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bcae", description="Dual-decoder autoencoder compression for sparse 3D ADC frames.")
    p.add_argument("--config", help="JSON file with per-subcommand option defaults")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="subcommand")

    g = sub.add_parser("generate", help="write synthetic frames")
    g.add_argument("--n-frames", type=int)
    g.add_argument("--occupancy", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--shape", type=_shape)
    g.add_argument("--downscale", action="store_true", default=None)
    g.add_argument("--width", type=float)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--variant", choices=["bcae", "bcaewot", "cae"])
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--beta2", type=float, help="AdamW second-moment decay")
    t.add_argument("--gamma", type=float)
    t.add_argument("--mu", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--h", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--downscale", action="store_true", default=None)
    t.add_argument("--shape", type=_shape)
    t.add_argument("--log", help="per-epoch CSV (default: <out>.log.csv)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--out", required=True)

    c = sub.add_parser("compress", help="frame file -> container")
    c.add_argument("--model", required=True)
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--threshold", type=float)

    d = sub.add_parser("decompress", help="container -> frame file")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--threshold", type=float)
    d.add_argument("--raw", action="store_true", default=None, help="write unrounded reals (.npy)")

    e = sub.add_parser("evaluate", help="metrics on a frame directory")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--sweep")
    e.add_argument("--histogram", help="histogram CSV path")
    e.add_argument("--bins", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--rounded", action="store_true", default=None)
    e.add_argument("--out", required=True)

    b = sub.add_parser("benchmark", help="compare codecs")
    b.add_argument("--codecs")
    b.add_argument("--data", required=True)
    b.add_argument("--bounds")
    b.add_argument("--model")
    b.add_argument("--sweep")
    b.add_argument("--out", required=True)

    s = sub.add_parser("sweep", help="gate-threshold curve")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--grid")
    s.add_argument("--out", required=True)

    x = sub.add_parser("export", help="checkpoint -> portable weight file")
    x.add_argument("--model", required=True)
    x.add_argument("--out", required=True)
    return p


def parse_args(argv) -> dict:
    """Resolve options with precedence flags > config file > defaults."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.subcommand is None:
        parser.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)
    resolved = dict(DEFAULTS[ns.subcommand])
    if ns.config:
        try:
            file_cfg = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {ns.config}: {exc}") from exc
        section = file_cfg.get(ns.subcommand, {})
        unknown = set(section) - set(resolved)
        if unknown:
            raise ConfigError(f"unknown keys for {ns.subcommand}: {sorted(unknown)}")
        resolved.update(section)
    for key, value in vars(ns).items():
        if key in ("config", "subcommand", "log_level"):
            continue
        if value is not None:
            resolved[key] = value
    if resolved.get("shape") is not None:
        resolved["shape"] = tuple(resolved["shape"])
    if resolved.get("downscale") and resolved.get("shape") not in (None, DOWNSCALE_SHAPE):
        raise ConfigError("--downscale conflicts with an explicit --shape")
    resolved["subcommand"] = ns.subcommand
    resolved["log_level"] = ns.log_level
    return resolved


def _code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def write_manifest(config: dict, out_path) -> Path:
    """Resolved config + code version + config hash next to ``out_path``."""
    cfg = {k: _jsonable(v) for k, v in sorted(config.items()) if k != "log_level"}
    body = json.dumps(cfg, sort_keys=True)
    manifest = {
        "config": cfg,
        "code_version": _code_version(),
        "config_hash": hashlib.sha256(body.encode()).hexdigest()[:16],
    }
    out = Path(out_path)
    path = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _frame_shape(cfg) -> tuple[int, int, int]:
    if cfg.get("shape"):
        return tuple(cfg["shape"])
    return DOWNSCALE_SHAPE if cfg.get("downscale") else CANONICAL_SHAPE


def load_model(path):
    """Accept either a training checkpoint or an exported weight file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"BCKP":
        return Trainer.from_checkpoint(path).bundle
    if magic == b"BCAW":
        return load_weights(path)
    raise CheckpointError(f"{path}: neither a checkpoint nor a weight file")


def _load_data(directory):
    frames = fr.load_frames(directory)
    if not frames:
        raise FileNotFoundError(f"no .tpcf frames in {directory}")
    return frames


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    syn = fr.SyntheticConfig(
        n_tracks=max(1, int(400 * np.prod(_frame_shape(cfg)) / np.prod(fr.SECTION_SHAPE))),
        target_occupancy=cfg["occupancy"],
        deposit_width=cfg["width"],
        seed=derive_seed(cfg["seed"], "data"),
        shape=_frame_shape(cfg),
    )
    for k, frame in enumerate(fr.generate_dataset(cfg["n_frames"], syn)):
        fr.write_frame(frame, out / f"frame_{k:05d}.tpcf")
        _event("frame_written", index=k, occupancy=f"{fr.nonzero_fraction(frame):.4f}")
    write_manifest(cfg, out)


def cmd_train(cfg):
    frames = _load_data(cfg["data"])
    shape = tuple(frames[0].shape)
    if (cfg.get("shape") or cfg.get("downscale")) and shape != _frame_shape(cfg):
        raise ConfigError(f"data shape {shape} does not match requested {_frame_shape(cfg)}")
    tc = TrainConfig(
        variant=cfg["variant"], batch_size=cfg["batch_size"], epochs=cfg["epochs"], lr_initial=cfg["lr"],
        weight_decay=cfg["weight_decay"], betas=(0.9, cfg["beta2"]), gamma=cfg["gamma"], mu=cfg["mu"],
        alpha=cfg["alpha"], h_train=cfg["h"], input_shape=shape, seed=cfg["seed"],
        n_train=len(frames), n_test=max(1, len(frames) // 3),
    )
    trainer = Trainer.from_checkpoint(cfg["resume"], tc) if cfg.get("resume") else Trainer(tc)
    out = Path(cfg["out"])
    try:
        trainer.fit(frames, checkpoint_path=out, checkpoint_every=cfg["checkpoint_every"])
    finally:
        write_log_csv(trainer.history, cfg["log"] or str(out) + ".log.csv")
    _event("trained", epochs=trainer.epoch, rho_r=trainer.loss_state.rho_r, out=out)
    write_manifest(cfg, out)


def cmd_compress(cfg):
    bundle = load_model(cfg["model"])
    container = codec_mod.compress(bundle, fr.read_frame(cfg["inp"]), cfg["threshold"])
    codec_mod.write_container(container, cfg["out"])
    ratio = ev.bcae_ratio(bundle)
    _event("compressed", ratio=f"{ratio:.2f}", header_bytes=codec_mod.HEADER_BYTES,
           file_bytes=codec_mod.HEADER_BYTES + container.code.nbytes)
    write_manifest(cfg, cfg["out"])


def cmd_decompress(cfg):
    bundle = load_model(cfg["model"])
    container = codec_mod.read_container(cfg["inp"])
    h = cfg["threshold"]
    if cfg["raw"]:
        np.save(cfg["out"], codec_mod.decompress(bundle, container, h, rounded=False))
    else:
        fr.write_frame(codec_mod.decompress(bundle, container, h), cfg["out"])
    write_manifest(cfg, cfg["out"])


def cmd_evaluate(cfg):
    bundle = load_model(cfg["model"])
    frames = _load_data(cfg["data"])
    grid = ev.parse_grid(cfg["sweep"])
    heads = ev.bcae_heads(bundle, frames)
    h_best = None
    if bundle.variant != "cae":
        h_best, curve = ev.threshold_sweep(bundle, frames, grid, heads=heads, rounded=cfg["rounded"])
        for h, mse in curve:
            _event("sweep", h=h, mse=f"{mse:.4f}")
    report = ev.evaluate_bundle(bundle, frames, h=h_best if h_best is not None else 0.5,
                                rounded=cfg["rounded"])
    ev.write_report_csv([report], cfg["out"])
    if cfg.get("histogram"):
        recon = ev.reconstruct(bundle, frames, report.threshold or 0.5, rounded=cfg["rounded"], heads=heads)
        ev.histogram_report(frames, recon, cfg["bins"], seed=derive_seed(cfg["seed"], "sampling")) \
            .write_csv(cfg["histogram"])
    _event("evaluated", mse=f"{report.mse:.4f}", log_mae=f"{report.log_mae:.4f}", h=report.threshold)
    write_manifest(cfg, cfg["out"])


def cmd_benchmark(cfg):
    frames = _load_data(cfg["data"])
    items = []
    for name in [c for c in cfg["codecs"].split(",") if c]:
        if name == "bcae":
            if not cfg.get("model"):
                raise ConfigError("benchmark with bcae needs --model")
            items.append(load_model(cfg["model"]))
        else:
            items.append(name)
    bounds = ev.parse_grid(cfg["bounds"])
    rows = ev.run_benchmark(items, frames, bounds, h_grid=ev.parse_grid(cfg["sweep"]), csv_path=cfg["out"])
    failed = [r for r in rows if not r.available]
    write_manifest(cfg, cfg["out"])
    for r in rows:
        _event("benchmark_row", codec=r.codec, setting=r.setting, ratio=f"{r.compression_ratio:.2f}",
               mse=f"{r.mse:.3f}", available=r.available)
    if failed:
        raise ev.PluginError(f"{len(failed)} codec(s) unavailable: {[r.codec for r in failed]}")


def cmd_sweep(cfg):
    bundle = load_model(cfg["model"])
    frames = _load_data(cfg["data"])
    h_best, curve = ev.threshold_sweep(bundle, frames, ev.parse_grid(cfg["grid"]))
    with open(cfg["out"], "w") as fh:
        fh.write("h,mse\n")
        for h, mse in curve:
            fh.write(f"{h:.6g},{mse:.10g}\n")
    _event("sweep_done", h_best=h_best)
    write_manifest(cfg, cfg["out"])


def cmd_export(cfg):
    save_weights(load_model(cfg["model"]), cfg["out"])
    write_manifest(cfg, cfg["out"])


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "compress": cmd_compress, "decompress": cmd_decompress,
    "evaluate": cmd_evaluate, "benchmark": cmd_benchmark, "sweep": cmd_sweep, "export": cmd_export,
}


def run(config: dict) -> int:
    try:
        COMMANDS[config["subcommand"]](config)
    except ConfigError as exc:
        log.error("config_error", extra={"fields": {"detail": exc}})
        return EXIT_USAGE
    except ev.PluginError as exc:
        log.error("plugin_failure", extra={"fields": {"detail": exc}})
        return EXIT_PLUGIN
    except (TrainingDivergence, FloatingPointError) as exc:
        log.error("numeric_divergence", extra={"fields": {"detail": exc}})
        return EXIT_NUMERIC
    except (fr.FrameFormatError, codec_mod.ContainerFormatError, codec_mod.ModelMismatchError,
            CheckpointError) as exc:
        log.error("format_error", extra={"fields": {"detail": exc}})
        return EXIT_FORMAT
    except OSError as exc:
        log.error("io_error", extra={"fields": {"detail": exc}})
        return EXIT_IO
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        config = parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    except ConfigError as exc:
        print(f"bcae: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(KVFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(config["log_level"].upper())
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
