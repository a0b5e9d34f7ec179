"""Example external codec for the benchmark plugin protocol.

    python quantize_plugin.py compress --bound B < frame.tpcf > code.bin
    python quantize_plugin.py decompress < code.bin > recon.tpcf

Frames travel as frame files on stdin/stdout. Wraps the built-in
quantize-and-deflate reference codec, so it doubles as a protocol smoke test.
"""

import argparse
import sys

import numpy as np

from bcae.evaluation import ReferenceCodec
from bcae.frames import frame_from_bytes, frame_to_bytes


def main(argv=None) -> int:
    parser = argparse.ArgumentParser()
    sub = parser.add_subparsers(dest="cmd", required=True)
    comp = sub.add_parser("compress")
    comp.add_argument("--bound", type=float, required=True)
    sub.add_parser("decompress")
    args = parser.parse_args(argv)

    payload = sys.stdin.buffer.read()
    codec = ReferenceCodec()
    if args.cmd == "compress":
        out = codec.compress(frame_from_bytes(payload), args.bound)
    else:
        out = frame_to_bytes(codec.decompress(payload).astype(np.float32))
    sys.stdout.buffer.write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
