"""Voxel frames: sectioning, zero suppression, synthetic tracks and frame files."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

FULL_SHAPE = (2304, 498, 16)
SECTION_SHAPE = (192, 249, 16)
N_AZIMUTH = 12
N_HALVES = 2
ADC_MAX = 1023
ZS_THRESHOLD = 64

FRAME_MAGIC = b"TPCF"
FRAME_VERSION = 1
DTYPE_U16 = 0
DTYPE_F32 = 2  # real-valued reconstructions (e.g. external codec output)
_DTYPES = {DTYPE_U16: "<u2", DTYPE_F32: "<f4"}
_HEADER = struct.Struct("<4sHBB3I")


class FrameFormatError(ValueError):
    """Malformed frame file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _check_shape(arr: np.ndarray, shape, what: str) -> None:
    if arr.shape != tuple(shape):
        raise ValueError(f"{what}: expected shape {tuple(shape)}, got {arr.shape}")


def section_frame(full: np.ndarray) -> list[np.ndarray]:
    """Split a full outer-layer frame into 24 sections, azimuth-major then half."""
    full = np.asarray(full)
    _check_shape(full, FULL_SHAPE, "full frame")
    a, h = SECTION_SHAPE[0], SECTION_SHAPE[1]
    return [
        full[i * a : (i + 1) * a, j * h : (j + 1) * h].copy()
        for i in range(N_AZIMUTH)
        for j in range(N_HALVES)
    ]


def assemble_frame(sections: list[np.ndarray]) -> np.ndarray:
    if len(sections) != N_AZIMUTH * N_HALVES:
        raise ValueError(f"expected {N_AZIMUTH * N_HALVES} sections, got {len(sections)}")
    a, h = SECTION_SHAPE[0], SECTION_SHAPE[1]
    full = np.empty(FULL_SHAPE, dtype=np.asarray(sections[0]).dtype)
    for k, sec in enumerate(sections):
        sec = np.asarray(sec)
        _check_shape(sec, SECTION_SHAPE, f"section {k}")
        i, j = divmod(k, N_HALVES)
        full[i * a : (i + 1) * a, j * h : (j + 1) * h] = sec
    return full


def zero_suppress(frame: np.ndarray, threshold: int = ZS_THRESHOLD) -> np.ndarray:
    """Zero every value <= threshold (so retained values are >= threshold + 1)."""
    frame = np.asarray(frame)
    return np.where(frame > threshold, frame, 0).astype(frame.dtype, copy=False)


def nonzero_fraction(frame: np.ndarray) -> float:
    frame = np.asarray(frame)
    return np.count_nonzero(frame > 0) / frame.size


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    n_tracks: int = 400
    deposit_amplitude_range: tuple[float, float] = (65.0, 1023.0)
    deposit_width: float = 1.0
    target_occupancy: float = 0.10
    seed: int = 0
    shape: tuple[int, int, int] = SECTION_SHAPE
    helix_fraction: float = 0.5
    amplitude_jitter: float = 0.2
    max_attempts: int = 10

    def __post_init__(self):
        if not 0 < self.target_occupancy <= 0.5:
            raise ValueError("target_occupancy must be in (0, 0.5]")
        if self.n_tracks < 1:
            raise ValueError("n_tracks must be >= 1")
        lo, hi = self.deposit_amplitude_range
        if not 0 < lo <= hi:
            raise ValueError("bad deposit_amplitude_range")
        if self.deposit_width <= 0:
            raise ValueError("deposit_width must be positive")


class OccupancyError(RuntimeError):
    def __init__(self, target: float, achieved: float):
        super().__init__(f"could not reach occupancy {target:.4f}; best achieved {achieved:.4f}")
        self.achieved = achieved


def _render_tracks(cfg: SyntheticConfig, n_tracks: int, rng: np.random.Generator) -> np.ndarray:
    """Accumulate point charges along straight or helical tracks, then blur."""
    shape = np.array(cfg.shape, dtype=float)
    grid = np.zeros(cfg.shape, dtype=np.float64)
    lo, hi = cfg.deposit_amplitude_range
    # tracks cross the radial axis; two samples per radial layer
    n_steps = 2 * cfg.shape[2]
    t = np.linspace(0.0, 1.0, n_steps)
    for _ in range(n_tracks):
        start = rng.uniform(0, shape)
        start[2] = 0.0
        direction = np.array([rng.normal(0, 0.4), rng.normal(0, 0.6), 1.0]) * shape[2]
        pts = start[None, :] + t[:, None] * direction[None, :]
        if rng.random() < cfg.helix_fraction:
            radius = rng.uniform(2.0, 10.0)
            phase = rng.uniform(0, 2 * np.pi)
            turn = rng.uniform(-1.0, 1.0)
            pts[:, 0] += radius * (np.sin(phase + turn * np.pi * t) - np.sin(phase))
            pts[:, 1] += radius * (np.cos(phase + turn * np.pi * t) - np.cos(phase))
        # one log-uniform amplitude per track (long upper tail) with mild per-deposit jitter
        amp = np.exp(rng.uniform(np.log(lo), np.log(hi)))
        amps = amp * np.exp(rng.normal(0.0, cfg.amplitude_jitter, size=n_steps))
        idx = np.rint(pts).astype(int)
        keep = np.all((idx >= 0) & (idx < shape.astype(int)), axis=1)
        np.add.at(grid, tuple(idx[keep].T), amps[keep])
    sigma = cfg.deposit_width
    blurred = ndimage.gaussian_filter(grid, sigma=sigma, mode="constant")
    # unit peak for an isolated deposit
    return blurred * (2 * np.pi * sigma**2) ** 1.5


def _finish(charge: np.ndarray) -> np.ndarray:
    adc = np.clip(np.rint(charge), 0, ADC_MAX).astype(np.uint16)
    return zero_suppress(adc)


def generate_synthetic_frame(config: SyntheticConfig) -> np.ndarray:
    """Deterministic sparse ADC frame whose occupancy is within 50% of the target.

    The track count is rescaled between attempts toward the target; each
    attempt uses a fresh stream derived from ``config.seed``.
    """
    ss = np.random.SeedSequence(config.seed)
    n_tracks = config.n_tracks
    best, best_err, best_occ = None, math.inf, 0.0
    for attempt_ss in ss.spawn(config.max_attempts):
        rng = np.random.default_rng(attempt_ss)
        frame = _finish(_render_tracks(config, n_tracks, rng))
        occ = nonzero_fraction(frame)
        err = abs(occ - config.target_occupancy) / config.target_occupancy
        if err < best_err:
            best, best_err, best_occ = frame, err, occ
        if err <= 0.2:
            return frame
        scale = config.target_occupancy / max(occ, 1e-6)
        n_tracks = max(1, int(round(n_tracks * min(scale, 10.0))))
    if best_err <= 0.5:
        return best
    raise OccupancyError(config.target_occupancy, best_occ)


def generate_dataset(n_frames: int, config: SyntheticConfig) -> list[np.ndarray]:
    """``n_frames`` frames with per-frame seeds spawned from ``config.seed``."""
    seeds = np.random.SeedSequence(config.seed).generate_state(n_frames, dtype=np.uint64)
    out = []
    for s in seeds:
        out.append(generate_synthetic_frame(_with_seed(config, int(s))))
    return out


def _with_seed(config: SyntheticConfig, seed: int) -> SyntheticConfig:
    return replace(config, seed=seed)


# ---------------------------------------------------------------------------
# frame files


def frame_to_bytes(frame: np.ndarray) -> bytes:
    """Serialize as u16 (integer frames) or f32 (real-valued frames)."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or min(frame.shape) < 1:
        raise ValueError(f"frame must be a nonempty 3D array, got shape {frame.shape}")
    if np.issubdtype(frame.dtype, np.floating):
        code = DTYPE_F32
    else:
        code = DTYPE_U16
        if frame.min(initial=0) < 0 or frame.max(initial=0) > 0xFFFF:
            raise ValueError("frame values do not fit in u16")
    header = _HEADER.pack(FRAME_MAGIC, FRAME_VERSION, code, 3, *frame.shape)
    return header + np.ascontiguousarray(frame, dtype=_DTYPES[code]).tobytes()


def frame_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FrameFormatError(f"truncated header: {len(data)} bytes", len(data))
    magic, version, dtype, ndim, *dims = _HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise FrameFormatError(f"bad magic {magic!r}", 0)
    if version != FRAME_VERSION:
        raise FrameFormatError(f"unsupported version {version}", 4)
    if dtype not in _DTYPES:
        raise FrameFormatError(f"unsupported dtype code {dtype}", 6)
    if ndim != 3:
        raise FrameFormatError(f"ndim must be 3, got {ndim}", 7)
    if min(dims) < 1:
        raise FrameFormatError(f"invalid dims {tuple(dims)}", 8)
    n = math.prod(dims)
    width = np.dtype(_DTYPES[dtype]).itemsize
    expected = _HEADER.size + width * n
    if len(data) != expected:
        raise FrameFormatError(
            f"payload is {len(data) - _HEADER.size} bytes, expected {width * n}", min(len(data), expected)
        )
    arr = np.frombuffer(data, dtype=_DTYPES[dtype], offset=_HEADER.size, count=n).reshape(dims)
    return arr.astype(np.uint16 if dtype == DTYPE_U16 else np.float32)


def write_frame(frame: np.ndarray, path) -> None:
    Path(path).write_bytes(frame_to_bytes(frame))


def read_frame(path) -> np.ndarray:
    return frame_from_bytes(Path(path).read_bytes())


def list_frame_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    return sorted(d.glob("*.tpcf"))


def load_frames(directory) -> list[np.ndarray]:
    return [read_frame(p) for p in list_frame_files(directory)]
