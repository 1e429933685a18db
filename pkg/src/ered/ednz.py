"""EDNZ framing for external denoiser processes.

A frame is little-endian::

    b"EDNZ" | version u32 (=1) | H u32 | W u32 | C u32 | sigma f32 | H*W*C f32 row-major

The parent writes one request frame to the child's stdin and reads one
response frame (same layout, denoised payload) from its stdout. Frames are
pipelined strictly one at a time.

Running ``python -m ered.ednz`` starts an echo server that returns every
payload unchanged; it doubles as a template for wrapping a real network.
"""

from __future__ import annotations

import struct
import sys
from typing import BinaryIO

import numpy as np

MAGIC = b"EDNZ"
VERSION = 1
HEADER = struct.Struct("<4sIIIIf")


class ProtocolError(RuntimeError):
    """Malformed or unexpected EDNZ frame."""


def encode_frame(x: np.ndarray, sigma: float) -> bytes:
    arr = np.asarray(x)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"EDNZ frames carry (H, W, C) tensors, got shape {arr.shape}")
    h, w, c = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return HEADER.pack(MAGIC, VERSION, h, w, c, float(sigma)) + payload


def parse_header(header: bytes) -> tuple[int, int, int, float]:
    if len(header) != HEADER.size:
        raise ProtocolError(f"truncated header: {len(header)} of {HEADER.size} bytes")
    magic, version, h, w, c, sigma = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    return h, w, c, sigma


def decode_frame(data: bytes) -> tuple[np.ndarray, float]:
    h, w, c, sigma = parse_header(data[: HEADER.size])
    body = data[HEADER.size :]
    if len(body) != 4 * h * w * c:
        raise ProtocolError(f"payload is {len(body)} bytes, header announces {h}x{w}x{c} floats")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).copy(), sigma


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    while n:
        chunk = stream.read(n)
        if not chunk:
            break
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> tuple[np.ndarray, float] | None:
    """Read one frame; ``None`` on a clean end of stream."""
    header = _read_exact(stream, HEADER.size)
    if not header:
        return None
    h, w, c, sigma = parse_header(header)
    body = _read_exact(stream, 4 * h * w * c)
    return decode_frame(header + body)


def write_frame(stream: BinaryIO, x: np.ndarray, sigma: float) -> None:
    stream.write(encode_frame(x, sigma))
    stream.flush()


def serve(denoise, stdin: BinaryIO | None = None, stdout: BinaryIO | None = None) -> None:
    """Answer frames from ``stdin`` with ``denoise(x, sigma)`` until end of stream."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    while (frame := read_frame(stdin)) is not None:
        x, sigma = frame
        write_frame(stdout, denoise(x, sigma), sigma)


def save_tensor(path, x: np.ndarray, sigma: float = 0.0) -> None:
    """Store a tensor as a single EDNZ frame on disk."""
    with open(path, "wb") as fh:
        fh.write(encode_frame(x, sigma))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        x, _ = decode_frame(fh.read())
    return x.astype(np.float64)


if __name__ == "__main__":
    serve(lambda x, sigma: x)
