"""Metrics, threshold sweeps, baseline codecs and the benchmark harness."""

from __future__ import annotations

import csv
import logging
import math
import shlex
import shutil
import struct
import subprocess
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .codec import combine_heads, compress, compression_ratio, decode_container, to_adc
from .frames import ADC_MAX, frame_from_bytes, frame_to_bytes
from .network import ModelBundle, model_hash

log = logging.getLogger(__name__)

PEAK = float(ADC_MAX)

# Published full-scale results on simulated collision data; documentation only, never asserted.
REFERENCE_TARGETS = {
    "MGARD": {"ratio": 27, "mse": 626.28, "log_mae": 1.213, "psnr": 3.223},
    "SZ": {"ratio": 24, "mse": 369.69, "log_mae": 0.302, "psnr": 3.452},
    "ZFP": {"ratio": 19, "mse": 219.48, "log_mae": 0.267, "psnr": 3.678},
    "CAE": {"ratio": 27, "mse": 227.61, "log_mae": 0.349, "psnr": 3.703},
    "BCAEwoT": {"ratio": 27, "mse": 230.59, "log_mae": 0.193, "psnr": 3.706},
    "BCAE": {"ratio": 27, "mse": 218.44, "log_mae": 0.185, "psnr": 3.724},
}
REFERENCE_THRESHOLDS = {"MGARD": 11, "SZ": 8, "ZFP": 32}
REFERENCE_GATE = {"bcae": 0.46, "bcaewot": 0.4}


class PluginError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics


def _pair(recon, truth):
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {truth.shape}")
    return recon, truth


def mse_metric(recon, truth) -> float:
    recon, truth = _pair(recon, truth)
    return float(np.mean((recon - truth) ** 2))


def log_mae_metric(recon, truth) -> float:
    """Mean |log2(recon + 1) - log2(truth + 1)| over every voxel, zeros included."""
    recon, truth = _pair(recon, truth)
    if (recon < 0).any():
        raise ValueError("log MAE needs a nonnegative reconstruction")
    return float(np.mean(np.abs(np.log2(recon + 1) - np.log2(truth + 1))))


def psnr_metric(mse: float, peak: float = PEAK) -> float:
    if mse < 0:
        raise ValueError("mse must be nonnegative")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def zero_fraction(frame) -> float:
    frame = np.asarray(frame)
    return float(np.count_nonzero(frame == 0) / frame.size)


@dataclass
class MetricsReport:
    codec: str
    setting: str
    compression_ratio: float
    mse: float
    log_mae: float
    psnr_db: float
    psnr_bels: float
    zero_fraction_true: float
    zero_fraction_recon: float
    n_voxels: int
    threshold: float | None = None
    rounded: bool = False
    available: bool = True
    note: str = ""


def metrics_report(recon, truth, *, codec: str, setting: str = "", ratio: float = float("nan"),
                   threshold=None, rounded: bool = False) -> MetricsReport:
    recon, truth = _pair(recon, truth)
    mse = mse_metric(recon, truth)
    psnr = psnr_metric(mse)
    return MetricsReport(
        codec=codec,
        setting=setting,
        compression_ratio=ratio,
        mse=mse,
        log_mae=log_mae_metric(recon, truth),
        psnr_db=psnr,
        psnr_bels=psnr / 10.0,
        zero_fraction_true=zero_fraction(truth),
        zero_fraction_recon=zero_fraction(recon),
        n_voxels=int(truth.size),
        threshold=threshold,
        rounded=rounded,
    )


def unavailable_row(codec: str, note: str) -> MetricsReport:
    nan = float("nan")
    return MetricsReport(codec, "", nan, nan, nan, nan, nan, nan, nan, 0, available=False, note=note)


def write_report_csv(rows: Sequence[MetricsReport], path) -> None:
    names = [f.name for f in fields(MetricsReport)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))


def read_report_csv(path) -> list[MetricsReport]:
    types = {f.name: f.type for f in fields(MetricsReport)}
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            kwargs = {}
            for name, value in raw.items():
                t = types[name]
                if t in ("str",):
                    kwargs[name] = value
                elif t == "bool":
                    kwargs[name] = value == "True"
                elif t == "int":
                    kwargs[name] = int(value)
                elif value == "":
                    kwargs[name] = None
                else:
                    kwargs[name] = float(value)
            rows.append(MetricsReport(**kwargs))
    return rows


# ---------------------------------------------------------------------------
# BCAE reconstruction helpers


def bcae_heads(bundle: ModelBundle, frames):
    """Run every frame through the half-precision codec; returns [(seg, reg)] per frame."""
    mhash = model_hash(bundle)
    out = []
    for frame in frames:
        seg, reg = decode_container(bundle, compress(bundle, frame), mhash)
        out.append((None if seg is None else seg[0], reg[0]))
    return out


def reconstruct(bundle: ModelBundle, frames, h: float = 0.5, rounded: bool = False, heads=None):
    heads = heads if heads is not None else bcae_heads(bundle, frames)
    out = []
    for seg, reg in heads:
        recon = combine_heads(bundle.variant, seg, reg, h)
        out.append(to_adc(recon).astype(np.float64) if rounded else recon)
    return out


def threshold_sweep(bundle: ModelBundle, frames, h_grid: Sequence[float], heads=None,
                    rounded: bool = False):
    """Mean MSE per gate threshold; returns (h_best, [(h, mse), ...]).

    The grid is evaluated in ascending order and ties go to the smaller h.
    """
    grid = sorted(float(h) for h in h_grid)
    if not grid or grid[0] < 0 or grid[-1] > 1:
        raise ValueError("h_grid must be a nonempty subset of [0, 1]")
    heads = heads if heads is not None else bcae_heads(bundle, frames)
    curve = []
    for h in grid:
        recon = reconstruct(bundle, frames, h, rounded=rounded, heads=heads)
        curve.append((h, float(np.mean([mse_metric(r, t) for r, t in zip(recon, frames)]))))
    best = min(curve, key=lambda hc: hc[1])  # min() keeps the first (smallest h) on ties
    return best[0], curve


def parse_grid(spec: str) -> list[float]:
    """``"start:stop:step"`` (stop inclusive) or a comma list."""
    if ":" in spec:
        start, stop, step = (float(x) for x in spec.split(":"))
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(x) for x in spec.split(",") if x]


# ---------------------------------------------------------------------------
# baseline codecs


def baseline_postprocess(recon, h: float):
    """Zero every value below ``h`` (negatives included); values >= h unchanged."""
    recon = np.asarray(recon, dtype=np.float64)
    return np.where(recon < h, 0.0, recon)


def postprocess_sweep(recon_frames, truth_frames, thresholds: Sequence[float]):
    """Threshold minimizing mean post-processed MSE; returns (h_best, curve)."""
    curve = []
    for h in sorted(thresholds):
        errs = [mse_metric(baseline_postprocess(r, h), t) for r, t in zip(recon_frames, truth_frames)]
        curve.append((float(h), float(np.mean(errs))))
    best = min(curve, key=lambda hc: hc[1])
    return best[0], curve


class BaselineCodec(Protocol):
    name: str

    def compress(self, frame: np.ndarray, error_bound: float) -> bytes: ...

    def decompress(self, data: bytes) -> np.ndarray: ...


_REF_HEADER = struct.Struct("<4sdB3I")


class ReferenceCodec:
    """Uniform scalar quantization with step 2*bound, then zlib.

    Honors an l-infinity bound: every reconstructed value is within ``bound``
    of the input. ``bound == 0`` is lossless on integer data.
    """

    name = "reference"

    def __init__(self, level: int = 9):
        self.level = level

    def compress(self, frame, error_bound: float) -> bytes:
        frame = np.asarray(frame, dtype=np.float64)
        if error_bound < 0:
            raise ValueError("error bound must be nonnegative")
        step = 2.0 * error_bound
        integral = np.array_equal(np.rint(frame), frame)
        if integral and step <= 1.0:
            step = 0.0  # integers are already exact at this resolution
        if step == 0 and not integral:
            raise ValueError("bound 0 requires integer-valued input")
        q = np.rint(frame / step) if step > 0 else np.rint(frame)
        if np.abs(q).max(initial=0) > np.iinfo(np.int32).max:
            raise ValueError(f"bound {error_bound} too small for this data range")
        wide = np.abs(q).max(initial=0) > 32767
        dtype = "<i4" if wide else "<i2"
        header = _REF_HEADER.pack(b"RQZ1", step, 4 if wide else 2, *frame.shape)
        return header + zlib.compress(q.astype(dtype).tobytes(), self.level)

    def decompress(self, data: bytes) -> np.ndarray:
        magic, step, width, *dims = _REF_HEADER.unpack_from(data)
        if magic != b"RQZ1":
            raise ValueError("not a reference-codec stream")
        q = np.frombuffer(zlib.decompress(data[_REF_HEADER.size :]), dtype="<i4" if width == 4 else "<i2")
        q = q.reshape(dims).astype(np.float64)
        return q * step if step > 0 else q


class PluginCodec:
    """External compressor speaking the frame-file stdin/stdout protocol.

    ``CMD compress --bound B < frame.bin > code.bin`` and
    ``CMD decompress < code.bin > frame.bin``.
    """

    def __init__(self, command, name: str | None = None, timeout: float = 600.0):
        if isinstance(command, (str, Path)):
            path = Path(command)
            command = [sys.executable, str(path)] if path.suffix == ".py" else shlex.split(str(command))
        self.command = list(command)
        self.name = name or Path(self.command[-1]).stem
        self.timeout = timeout

    def _run(self, args, payload: bytes) -> bytes:
        try:
            proc = subprocess.run(self.command + args, input=payload, capture_output=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise PluginError(f"{self.name}: {exc}") from exc
        if proc.returncode != 0:
            raise PluginError(f"{self.name} exited {proc.returncode}: {proc.stderr.decode(errors='replace')[-500:]}")
        return proc.stdout

    def available(self) -> bool:
        exe = self.command[0]
        return Path(exe).exists() or shutil.which(exe) is not None

    def compress(self, frame, error_bound: float) -> bytes:
        return self._run(["compress", "--bound", repr(float(error_bound))], frame_to_bytes(frame))

    def decompress(self, data: bytes) -> np.ndarray:
        return frame_from_bytes(self._run(["decompress"], data)).astype(np.float64)


@dataclass
class SurveyRow:
    bound: float
    mean_ratio: float
    mean_mse: float
    n_frames: int
    failures: list[str] = field(default_factory=list)


def survey_error_bounds(codec: BaselineCodec, frames, bounds: Sequence[float]) -> list[SurveyRow]:
    """Average ratio (16-bit input bytes / compressed bytes) and pre-threshold MSE per bound."""
    rows = []
    for bound in bounds:
        ratios, mses, failures = [], [], []
        for k, frame in enumerate(frames):
            try:
                data = codec.compress(frame, bound)
                recon = codec.decompress(data)
            except Exception as exc:  # surfaced in the row, not fatal
                failures.append(f"frame {k}: {exc}")
                continue
            ratios.append(np.asarray(frame).size * 2 / len(data))
            mses.append(mse_metric(recon, frame))
        nan = float("nan")
        rows.append(SurveyRow(float(bound), float(np.mean(ratios)) if ratios else nan,
                              float(np.mean(mses)) if mses else nan, len(mses), failures))
    return rows


# ---------------------------------------------------------------------------
# histograms


@dataclass
class HistogramReport:
    edges: np.ndarray
    count_truth: np.ndarray
    count_recon: np.ndarray
    joint: np.ndarray  # [truth bin, recon bin]
    n_samples: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count_truth", "count_recon"])
            for lo, hi, ct, cr in zip(self.edges[:-1], self.edges[1:], self.count_truth, self.count_recon):
                writer.writerow([f"{lo:.6g}", f"{hi:.6g}", int(ct), int(cr)])

    def write_joint_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["truth_bin_lo", "recon_bin_lo", "count"])
            for i, j in zip(*np.nonzero(self.joint)):
                writer.writerow([f"{self.edges[i]:.6g}", f"{self.edges[j]:.6g}", int(self.joint[i, j])])


def histogram_report(frames, recon_frames, n_bins: int = 100, n_samples: int = 1_000_000,
                     seed: int = 0, upper: float | None = None) -> HistogramReport:
    """Histograms of log2(v + 1) over uniformly sampled voxels.

    Negative reconstructions are clipped to 0 before the log.
    """
    truth = np.concatenate([np.asarray(f, dtype=np.float64).ravel() for f in frames])
    recon = np.concatenate([np.asarray(f, dtype=np.float64).ravel() for f in recon_frames])
    if truth.shape != recon.shape:
        raise ValueError("truth and reconstruction voxel counts differ")
    rng = np.random.default_rng(seed)
    if n_samples < truth.size:
        idx = rng.choice(truth.size, size=n_samples, replace=False)
        truth, recon = truth[idx], recon[idx]
    lt = np.log2(truth + 1)
    lr = np.log2(np.clip(recon, 0, None) + 1)
    top = upper if upper is not None else max(10.0, float(np.ceil(max(lt.max(initial=0), lr.max(initial=0)))))
    edges = np.linspace(0.0, top, n_bins + 1)
    ct, _ = np.histogram(lt, edges)
    cr, _ = np.histogram(lr, edges)
    joint, _, _ = np.histogram2d(lt, lr, [edges, edges])
    return HistogramReport(edges, ct, cr, joint.astype(np.int64), int(lt.size))


# ---------------------------------------------------------------------------
# benchmark


def bcae_ratio(bundle: ModelBundle) -> float:
    return compression_ratio((1,) + tuple(bundle.config.input_shape), 16, bundle.code_shape, 16)


def evaluate_bundle(bundle: ModelBundle, frames, h: float | None = None, h_grid=None,
                    name: str | None = None, rounded: bool = False) -> MetricsReport:
    """Metrics for one model; ``h`` defaults to the sweep optimum on ``frames``."""
    heads = bcae_heads(bundle, frames)
    if h is None and bundle.variant != "cae":
        grid = h_grid if h_grid is not None else parse_grid("0:1:0.02")
        h, _ = threshold_sweep(bundle, frames, grid, heads=heads, rounded=rounded)
    h_used = 0.5 if h is None else h
    recon = reconstruct(bundle, frames, h_used, rounded=rounded, heads=heads)
    return metrics_report(
        np.stack(recon), np.stack([np.asarray(f) for f in frames]),
        codec=name or bundle.variant.upper(), setting=f"h={h_used:g}", ratio=bcae_ratio(bundle),
        threshold=None if bundle.variant == "cae" else h_used, rounded=rounded,
    )


def evaluate_baseline(codec: BaselineCodec, frames, bound: float,
                      thresholds: Sequence[float] = tuple(range(0, 65))) -> MetricsReport:
    """Compress at one l-inf bound, pick the post-processing threshold, report metrics."""
    datas = [codec.compress(f, bound) for f in frames]
    recon = [codec.decompress(d) for d in datas]
    h, _ = postprocess_sweep(recon, frames, thresholds)
    post = np.stack([baseline_postprocess(r, h) for r in recon])
    ratio = float(np.mean([np.asarray(f).size * 2 / len(d) for f, d in zip(frames, datas)]))
    return metrics_report(post, np.stack([np.asarray(f) for f in frames]), codec=codec.name,
                          setting=f"bound={bound:g}", ratio=ratio, threshold=h)


def resolve_codec(spec: str):
    """``reference`` or ``plugin:PATH``; ``bcae`` is handled by the caller."""
    if spec == "reference":
        return ReferenceCodec()
    if spec.startswith("plugin:"):
        return PluginCodec(spec.split(":", 1)[1])
    raise ValueError(f"unknown codec {spec!r}")


def run_benchmark(codecs: Sequence, frames, bounds: Sequence[float] = (1, 2, 4, 8, 16, 32),
                  h_grid=None, csv_path=None) -> list[MetricsReport]:
    """One row per BCAE bundle and per (baseline codec, bound).

    ``codecs`` holds ModelBundle instances, BaselineCodec objects or codec
    spec strings. A failing plugin yields an ``available=False`` row.
    """
    rows: list[MetricsReport] = []
    for item in codecs:
        if isinstance(item, ModelBundle):
            rows.append(evaluate_bundle(item, frames, h_grid=h_grid))
            continue
        name = item if isinstance(item, str) else getattr(item, "name", repr(item))
        try:
            codec = resolve_codec(item) if isinstance(item, str) else item
            for bound in bounds:
                rows.append(evaluate_baseline(codec, frames, bound))
        except (PluginError, ValueError, OSError) as exc:
            log.warning("codec %s unavailable: %s", name, exc)
            rows.append(unavailable_row(str(name), str(exc)))
    if csv_path is not None:
        write_report_csv(rows, csv_path)
    return rows


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    variant: str
    seed: int
    log_mae: float
    mse: float
    zero_fraction_recon: float
    zero_fraction_true: float
    final_total: float


def ablation_study(config, train_frames, test_frames, seeds: Sequence[int] = (0, 1, 2),
                   variants: Sequence[str] = ("bcae", "bcaewot", "cae"), h: float = 0.5) -> list[AblationRow]:
    """Train every (variant, seed) pair with ``config`` and score it on held-out frames."""
    from dataclasses import replace

    from .training import Trainer

    truth = np.stack([np.asarray(f, dtype=np.float64) for f in test_frames])
    rows = []
    for seed in seeds:
        for variant in variants:
            trainer = Trainer(replace(config, variant=variant, seed=seed))
            hist = trainer.fit(train_frames)
            recon = np.stack(reconstruct(trainer.bundle, test_frames, h))
            rows.append(AblationRow(variant, seed, log_mae_metric(recon, truth), mse_metric(recon, truth),
                                    zero_fraction(recon), zero_fraction(truth), hist[-1]["total"]))
            log.info("ablation variant=%s seed=%d log_mae=%.4f zero_recon=%.4f", variant, seed,
                     rows[-1].log_mae, rows[-1].zero_fraction_recon)
    return rows
