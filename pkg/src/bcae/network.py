"""Encoder and twin decoders built from per-layer tables, plus shape oracles.

Every convolution uses symmetric padding ``kernel // 2`` per axis and every
deconvolution output padding 0. With the default tables this takes the
(192, 249, 16) section to the (8, 13, 17, 16) code and back exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

Shape3 = tuple[int, int, int]

VARIANTS = ("bcae", "bcaewot", "cae")
CANONICAL_SHAPE: Shape3 = (192, 249, 16)
DOWNSCALE_SHAPE: Shape3 = (48, 64, 16)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "deconv"
    kernel: Shape3
    stride: Shape3
    padding: Shape3
    in_channels: int
    out_channels: int
    output_padding: Shape3 = (0, 0, 0)

    def __post_init__(self):
        if self.kind not in ("conv", "deconv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel/stride must be >= 1: {self}")
        if any(op >= s for op, s in zip(self.output_padding, self.stride)):
            raise ValueError(f"output_padding must be < stride: {self}")
        if self.kind == "conv" and any(self.output_padding):
            raise ValueError("output_padding only applies to deconvolutions")


def same_padding(kernel: Sequence[int]) -> Shape3:
    return tuple(k // 2 for k in kernel)


def conv_output_shape(in_shape: Sequence[int], layer: LayerSpec) -> Shape3:
    if layer.kind != "conv":
        raise ValueError("conv_output_shape needs a conv layer")
    out = []
    for axis, (n, f, s, p) in enumerate(zip(in_shape, layer.kernel, layer.stride, layer.padding)):
        m = (n + 2 * p - f) // s + 1
        if m <= 0:
            raise ShapeError(f"axis {axis}: conv of size {n} with kernel {f}, stride {s}, padding {p} gives {m}")
        out.append(m)
    return tuple(out)


def deconv_output_shape(in_shape: Sequence[int], layer: LayerSpec) -> Shape3:
    if layer.kind != "deconv":
        raise ValueError("deconv_output_shape needs a deconv layer")
    out = []
    for axis, (n, f, s, p, op) in enumerate(
        zip(in_shape, layer.kernel, layer.stride, layer.padding, layer.output_padding)
    ):
        m = (n - 1) * s - 2 * p + f + op
        if m <= 0:
            raise ShapeError(f"axis {axis}: deconv of size {n} gives {m}")
        out.append(m)
    return tuple(out)


def layer_output_shape(in_shape, layer: LayerSpec) -> Shape3:
    if layer.kind == "conv":
        return conv_output_shape(in_shape, layer)
    return deconv_output_shape(in_shape, layer)


@dataclass(frozen=True)
class ResBlockSpec:
    """First (resampling) layer; the second main-path layer is implied."""

    first: LayerSpec

    @property
    def second(self) -> LayerSpec:
        c = self.first.out_channels
        return LayerSpec(self.first.kind, (3, 3, 3), (1, 1, 1), (1, 1, 1), c, c)


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: Shape3 = CANONICAL_SHAPE
    encoder_kernels: tuple[Shape3, ...] = ((4, 5, 3), (3, 3, 3), (3, 3, 3), (3, 4, 3))
    encoder_channels: tuple[int, ...] = (1, 8, 16, 32, 32)
    code_channels: int = 8
    decoder_kernels: tuple[Shape3, ...] = ((3, 4, 3), (3, 3, 3), (3, 3, 3), (4, 5, 3))
    decoder_channels: tuple[int, ...] = (8, 8, 4, 2, 1)
    stride: Shape3 = (2, 2, 1)
    negative_slope: float = 0.1
    norm_eps: float = 1e-5
    variant: str = "bcae"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.encoder_channels) != len(self.encoder_kernels) + 1:
            raise ValueError("encoder_channels must have one more entry than encoder_kernels")
        if len(self.decoder_channels) != len(self.decoder_kernels) + 1:
            raise ValueError("decoder_channels must have one more entry than decoder_kernels")
        if self.decoder_channels[0] != self.code_channels:
            raise ValueError("decoder input channels must equal code channels")

    @property
    def encoder_blocks(self) -> list[ResBlockSpec]:
        ch = self.encoder_channels
        return [
            ResBlockSpec(LayerSpec("conv", tuple(k), self.stride, same_padding(k), ch[i], ch[i + 1]))
            for i, k in enumerate(self.encoder_kernels)
        ]

    @property
    def encoder_final(self) -> LayerSpec:
        return LayerSpec("conv", (1, 1, 1), (1, 1, 1), (0, 0, 0), self.encoder_channels[-1], self.code_channels)

    def _decoder_layer(self, i: int) -> LayerSpec:
        k = tuple(self.decoder_kernels[i])
        ch = self.decoder_channels
        return LayerSpec("deconv", k, self.stride, same_padding(k), ch[i], ch[i + 1])

    @property
    def decoder_blocks(self) -> list[ResBlockSpec]:
        return [ResBlockSpec(self._decoder_layer(i)) for i in range(len(self.decoder_kernels) - 1)]

    @property
    def decoder_final(self) -> LayerSpec:
        return self._decoder_layer(len(self.decoder_kernels) - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["stride"] = tuple(d["stride"])
        for key in ("encoder_kernels", "decoder_kernels"):
            d[key] = tuple(tuple(k) for k in d[key])
        for key in ("encoder_channels", "decoder_channels"):
            d[key] = tuple(d[key])
        return cls(**d)


def encoder_trace(config: NetworkConfig, shape: Sequence[int] | None = None) -> list[Shape3]:
    """Spatial shapes from the encoder input through every ResBlock."""
    shapes = [tuple(shape or padded_input_shape(config))]
    for block in config.encoder_blocks:
        shapes.append(conv_output_shape(shapes[-1], block.first))
    return shapes


def decoder_trace(config: NetworkConfig, code_shape: Sequence[int]) -> list[Shape3]:
    shapes = [tuple(code_shape)]
    for block in config.decoder_blocks:
        shapes.append(deconv_output_shape(shapes[-1], block.first))
    shapes.append(deconv_output_shape(shapes[-1], config.decoder_final))
    return shapes


def _axis_closes(config: NetworkConfig, axis: int, n: int) -> bool:
    # axes are independent; park the other axes at a size no kernel can break
    probe = [1024, 1024, 1024]
    probe[axis] = n
    try:
        enc = encoder_trace(config, tuple(probe))
        return decoder_trace(config, enc[-1])[-1][axis] == n
    except ShapeError:
        return False


def padded_input_shape(config: NetworkConfig, max_extra: int = 64) -> Shape3:
    """Smallest shape >= ``config.input_shape`` (per axis) that the network reproduces.

    Frames are zero-padded to this shape before encoding and decoder outputs
    are cropped back. The canonical section needs no padding.
    """
    out = []
    for axis, n in enumerate(config.input_shape):
        for m in range(n, n + max_extra + 1):
            if _axis_closes(config, axis, m):
                out.append(m)
                break
        else:
            raise ShapeError(f"axis {axis}: no size in [{n}, {n + max_extra}] survives encode/decode")
    return tuple(out)


def check_shape_closure(config: NetworkConfig) -> tuple[Shape3, Shape3]:
    """Return (padded input shape, code spatial shape), raising on any mismatch."""
    padded = padded_input_shape(config)
    enc = encoder_trace(config, padded)
    dec = decoder_trace(config, enc[-1])
    if dec[-1] != padded:
        raise ShapeError(f"decoder output {dec[-1]} != encoder input {padded}")
    return padded, enc[-1]


def code_shape(config: NetworkConfig) -> tuple[int, int, int, int]:
    _, spatial = check_shape_closure(config)
    return (config.code_channels,) + spatial


# ---------------------------------------------------------------------------
# functional pieces


def leaky_activation(x: torch.Tensor, slope: float = 0.1) -> torch.Tensor:
    return torch.where(x >= 0, x, slope * x)


def instance_normalize(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Standardize each (sample, channel) over its spatial axes (biased variance)."""
    dims = tuple(range(2, x.dim()))
    mean = x.mean(dim=dims, keepdim=True)
    var = x.var(dim=dims, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def _torch_layer(spec: LayerSpec) -> nn.Module:
    if spec.kind == "conv":
        return nn.Conv3d(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding)
    return nn.ConvTranspose3d(
        spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding, spec.output_padding
    )


class MainPath(nn.Module):
    def __init__(self, spec: ResBlockSpec, slope: float, eps: float):
        super().__init__()
        self.conv1 = _torch_layer(spec.first)
        self.norm = nn.InstanceNorm3d(spec.first.out_channels, eps=eps, affine=True)
        self.act = nn.LeakyReLU(slope)
        self.conv2 = _torch_layer(spec.second)

    def forward(self, x):
        return self.conv2(self.act(self.norm(self.conv1(x))))


class SidePath(nn.Module):
    def __init__(self, spec: ResBlockSpec, slope: float, eps: float):
        super().__init__()
        self.conv1 = _torch_layer(spec.first)
        self.norm = nn.InstanceNorm3d(spec.first.out_channels, eps=eps, affine=True)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return self.act(self.norm(self.conv1(x)))


class ResBlock(nn.Module):
    def __init__(self, spec: ResBlockSpec, slope: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.spec = spec
        self.main = MainPath(spec, slope, eps)
        self.side = SidePath(spec, slope, eps)

    def forward(self, x):
        if x.shape[1] != self.spec.first.in_channels:
            raise ShapeError(f"ResBlock expects {self.spec.first.in_channels} channels, got {x.shape[1]}")
        main, side = self.main(x), self.side(x)
        if main.shape != side.shape:
            raise ShapeError(f"main path {tuple(main.shape)} != side path {tuple(side.shape)}")
        return main + side


def resblock_forward(block: ResBlock, x: torch.Tensor) -> torch.Tensor:
    return block(x)


class Encoder(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.n_blocks = len(config.encoder_blocks)
        for i, spec in enumerate(config.encoder_blocks):
            self.add_module(f"block{i}", ResBlock(spec, config.negative_slope, config.norm_eps))
        self.final = _torch_layer(config.encoder_final)

    def forward(self, x):
        for i in range(self.n_blocks):
            x = getattr(self, f"block{i}")(x)
        return self.final(x)


class Decoder(nn.Module):
    """Three upsampling ResBlocks, a plain deconvolution and an output head.

    ``head`` is ``"sigmoid"`` (segmentation), ``"identity"`` or ``"relu"``.
    """

    def __init__(self, config: NetworkConfig, head: str):
        super().__init__()
        self.n_blocks = len(config.decoder_blocks)
        for i, spec in enumerate(config.decoder_blocks):
            self.add_module(f"block{i}", ResBlock(spec, config.negative_slope, config.norm_eps))
        self.final = _torch_layer(config.decoder_final)
        self.head = head

    def forward(self, x):
        for i in range(self.n_blocks):
            x = getattr(self, f"block{i}")(x)
        x = self.final(x)
        if self.head == "sigmoid":
            return torch.sigmoid(x)
        if self.head == "relu":
            return torch.relu(x)
        return x


class ModelBundle(nn.Module):
    """Encoder plus segmentation and regression decoders (no segmentation head for CAE)."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        self.padded_shape, spatial = check_shape_closure(config)
        self.code_shape = (config.code_channels,) + spatial
        self.encoder = Encoder(config)
        if config.variant == "cae":
            self.decoder_s = None
        else:
            self.decoder_s = Decoder(config, "sigmoid")
        self.decoder_r = Decoder(config, "identity" if config.variant == "bcae" else "relu")

    @property
    def variant(self) -> str:
        return self.config.variant

    def pad(self, x: torch.Tensor) -> torch.Tensor:
        extra = [p - n for p, n in zip(self.padded_shape, x.shape[-3:])]
        if not any(extra):
            return x
        # F.pad wants last axis first
        pads = []
        for e in reversed(extra):
            pads += [0, e]
        return nn.functional.pad(x, pads)

    def crop(self, x: torch.Tensor) -> torch.Tensor:
        a, b, c = self.config.input_shape
        return x[..., :a, :b, :c]

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, *input_shape) raw ADC counts -> (B, *code_shape)."""
        return self.encoder(self.pad(x))

    def decode_tensor(self, z: torch.Tensor):
        seg = None if self.decoder_s is None else self.crop(self.decoder_s(z))
        reg = self.crop(self.decoder_r(z))
        return seg, reg

    def forward(self, x):
        return self.decode_tensor(self.encode_tensor(x))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: NetworkConfig = NetworkConfig(), seed: int = 0) -> ModelBundle:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ModelBundle(config, seed)


def _frame_tensor(frame, bundle: ModelBundle) -> torch.Tensor:
    arr = np.asarray(frame)
    if arr.shape != tuple(bundle.config.input_shape):
        raise ShapeError(f"frame shape {arr.shape} != model input shape {bundle.config.input_shape}")
    return torch.from_numpy(arr.astype(np.float32))[None, None]


def encode(bundle: ModelBundle, frame) -> np.ndarray:
    """Raw ADC frame -> float32 latent of shape ``bundle.code_shape``."""
    with torch.no_grad():
        z = bundle.encode_tensor(_frame_tensor(frame, bundle))[0]
    if not torch.isfinite(z).all():
        raise FloatingPointError("non-finite encoder output")
    return z.numpy()


def decode(bundle: ModelBundle, latent) -> tuple[np.ndarray | None, np.ndarray]:
    """Latent -> (seg_out, reg_out), each (1, *input_shape); seg_out is None for CAE."""
    z = torch.as_tensor(np.asarray(latent, dtype=np.float32))
    if tuple(z.shape) != bundle.code_shape:
        raise ShapeError(f"latent shape {tuple(z.shape)} != {bundle.code_shape}")
    with torch.no_grad():
        seg, reg = bundle.decode_tensor(z[None])
    for name, t in (("seg_out", seg), ("reg_out", reg)):
        if t is not None and not torch.isfinite(t).all():
            raise FloatingPointError(f"non-finite {name}")
    return (None if seg is None else seg[0].numpy()), reg[0].numpy()


# ---------------------------------------------------------------------------
# weight export

WEIGHTS_MAGIC = b"BCAW"
WEIGHTS_VERSION = 1


def export_weights(bundle: ModelBundle) -> bytes:
    """Config (JSON) + named float32 little-endian row-major tensors."""
    state = bundle.state_dict()
    table, blobs, offset = [], [], 0
    for name, t in state.items():
        data = t.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C")
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": bundle.config.to_dict(), "seed": bundle.seed, "tensors": table}, sort_keys=True
    ).encode()
    return WEIGHTS_MAGIC + struct.pack("<HI", WEIGHTS_VERSION, len(header)) + header + b"".join(blobs)


def import_weights(data: bytes) -> ModelBundle:
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError("bad weights magic")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version {version}")
    header = json.loads(data[10 : 10 + hlen])
    base = 10 + hlen
    bundle = build_model(NetworkConfig.from_dict(header["config"]), header["seed"])
    state = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=entry["nbytes"] // 4, offset=start)
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    bundle.load_state_dict(state)
    return bundle


def save_weights(bundle: ModelBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(export_weights(bundle))


def load_weights(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return import_weights(fh.read())


def model_hash(bundle: ModelBundle) -> bytes:
    """8-byte fingerprint of the exported weights."""
    return hashlib.sha256(export_weights(bundle)).digest()[:8]
