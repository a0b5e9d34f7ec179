"""Print the layer-by-layer shape trace and the resulting compression ratio."""

import argparse

from bcae.codec import compression_ratio
from bcae.network import NetworkConfig, check_shape_closure, decoder_trace, encoder_trace


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--shape", default="192,249,16")
    args = ap.parse_args()
    shape = tuple(int(s) for s in args.shape.split(","))

    cfg = NetworkConfig(input_shape=shape)
    padded, spatial = check_shape_closure(cfg)
    if padded != shape:
        print(f"input {shape} zero-padded to {padded} so the decoder output closes")
    enc = encoder_trace(cfg, padded)
    chans = cfg.encoder_channels
    for i, s in enumerate(enc):
        print(f"encoder {i}: {(chans[i],) + s}")
    code = (cfg.code_channels,) + spatial
    print(f"code: {code}")
    for i, s in enumerate(decoder_trace(cfg, spatial)[1:]):
        print(f"decoder {i}: {(cfg.decoder_channels[i + 1],) + s}")
    print(f"compression ratio (16-bit in, 16-bit code): {compression_ratio(shape, 16, code, 16):.4f}")


if __name__ == "__main__":
    main()
