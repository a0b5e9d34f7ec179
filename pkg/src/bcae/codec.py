"""Half-precision code container and frame reconstruction."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frames import ADC_MAX
from .losses import combine_output, combine_output_without_transform
from .network import ModelBundle, decode, encode, model_hash

log = logging.getLogger(__name__)

MAGIC = b"BCAE"
VERSION = 1
DTYPE_F16 = 1
F16_MAX = 65504.0
_HEADER = struct.Struct("<4sH8sB3I4If")
HEADER_BYTES = _HEADER.size


class ContainerFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ModelMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CompressedContainer:
    model_hash: bytes
    orig_shape: tuple[int, int, int]
    code: np.ndarray  # float16, shape (C, d0, d1, d2)
    threshold: float = 0.5

    @property
    def code_shape(self) -> tuple[int, ...]:
        return tuple(self.code.shape)

    def to_bytes(self) -> bytes:
        if len(self.model_hash) != 8:
            raise ValueError("model hash must be 8 bytes")
        if self.code.dtype != np.float16 or self.code.ndim != 4:
            raise ValueError("code must be a 4D float16 array")
        header = _HEADER.pack(
            MAGIC, VERSION, self.model_hash, DTYPE_F16, *self.orig_shape, *self.code.shape, self.threshold
        )
        return header + np.ascontiguousarray(self.code, dtype="<f2").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedContainer":
        if len(data) < HEADER_BYTES:
            raise ContainerFormatError(f"truncated header ({len(data)} bytes)", len(data))
        magic, version, mhash, dtype, *dims, threshold = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ContainerFormatError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise ContainerFormatError(f"unsupported version {version}", 4)
        if dtype != DTYPE_F16:
            raise ContainerFormatError(f"unsupported dtype code {dtype}", 14)
        orig, code_dims = tuple(dims[:3]), tuple(dims[3:])
        if min(orig) < 1 or min(code_dims) < 1:
            raise ContainerFormatError("zero-sized dimension in header", 15)
        n = math.prod(code_dims)
        if len(data) != HEADER_BYTES + 2 * n:
            raise ContainerFormatError(
                f"payload is {len(data) - HEADER_BYTES} bytes, expected {2 * n}", HEADER_BYTES
            )
        code = np.frombuffer(data, dtype="<f2", offset=HEADER_BYTES, count=n).reshape(code_dims)
        return cls(mhash, orig, code.astype(np.float16), float(threshold))

    def __eq__(self, other):
        return isinstance(other, CompressedContainer) and self.to_bytes() == other.to_bytes()


def to_half(latent: np.ndarray) -> np.ndarray:
    """Downcast to float16, saturating at +-65504 instead of overflowing to inf."""
    latent = np.asarray(latent, dtype=np.float32)
    if not np.isfinite(latent).all():
        raise FloatingPointError("non-finite latent")
    if np.abs(latent).max(initial=0) > F16_MAX:
        log.warning("latent exceeds float16 range; saturating")
    return np.clip(latent, -F16_MAX, F16_MAX).astype(np.float16)


def compress(bundle: ModelBundle, frame, threshold: float = 0.5) -> CompressedContainer:
    code = to_half(encode(bundle, frame))
    return CompressedContainer(model_hash(bundle), tuple(bundle.config.input_shape), code, float(threshold))


def decode_container(bundle: ModelBundle, container: CompressedContainer, mhash: bytes | None = None):
    """Upcast the code and run both decoders: (seg_out or None, reg_out), each (1, *shape)."""
    expected = model_hash(bundle) if mhash is None else mhash
    if container.model_hash != expected:
        raise ModelMismatchError(
            f"container was produced by model {container.model_hash.hex()}, not {expected.hex()}"
        )
    return decode(bundle, container.code.astype(np.float32))


def combine_heads(variant: str, seg, reg, h: float) -> np.ndarray:
    """Reconstruction in ADC units (real valued) for a given gate threshold."""
    if variant == "cae":
        return np.asarray(reg, dtype=np.float64)
    h = min(max(float(h), 0.0), 1.0)
    seg = np.asarray(seg, dtype=np.float64)
    reg = np.asarray(reg, dtype=np.float64)
    if variant == "bcae":
        return combine_output(reg, seg, h)
    return combine_output_without_transform(reg, seg, h)


def to_adc(recon: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(recon), 0, ADC_MAX).astype(np.uint16)


def decompress(bundle: ModelBundle, container: CompressedContainer, h: float | None = None,
               rounded: bool = True) -> np.ndarray:
    """Rebuild a frame; ``rounded=False`` keeps the real-valued reconstruction."""
    h = container.threshold if h is None else h
    seg, reg = decode_container(bundle, container)
    recon = combine_heads(bundle.variant, None if seg is None else seg[0], reg[0], h)
    return to_adc(recon) if rounded else recon.astype(np.float32)


def compression_ratio(input_shape, input_bits: int, code_shape, code_bits: int) -> float:
    """Element-bit ratio; container header bytes are not counted."""
    if min(input_shape) < 1 or min(code_shape) < 1 or input_bits < 1 or code_bits < 1:
        raise ValueError("dimensions and bit widths must be positive")
    return (math.prod(input_shape) * input_bits) / (math.prod(code_shape) * code_bits)


def write_container(container: CompressedContainer, path) -> None:
    Path(path).write_bytes(container.to_bytes())


def read_container(path) -> CompressedContainer:
    return CompressedContainer.from_bytes(Path(path).read_bytes())
