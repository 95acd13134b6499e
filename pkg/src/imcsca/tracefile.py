"""Per-tile trace files.

Header line:  imc-trace v1, tile=<id>, rate=<Sa/s>, n=<count>
Text body:    one power sample in watts per line, decimal
Binary body:  little-endian 64-bit floats (optional variant)

Idle samples dominate most traces, so the text writer emits zero runs in
bulk; the reader sniffs text vs binary from the body bytes.
"""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np

from .powersim import PowerTrace

_HEADER_RE = re.compile(
    rb"^imc-trace v1, tile=(\d+), rate=([0-9.eE+-]+), n=(\d+)\s*$")
_TEXT_BYTES = frozenset(b"0123456789.eE+-\n\r ")


class TraceFormatError(ValueError):
    pass


def trace_filename(tile_id, binary=False):
    return f"tile_{tile_id:03d}.{'bin' if binary else 'txt'}"


def write_trace(path, trace: PowerTrace, binary=False):
    arr = np.asarray(trace.samples, dtype=np.float64)
    header = b"imc-trace v1, tile=%d, rate=%.10g, n=%d\n" % (
        trace.tile_id, trace.sample_rate, arr.size)
    with open(path, "wb") as f:
        f.write(header)
        if binary:
            f.write(arr.astype("<f8").tobytes())
            return
        chunk = 1 << 16
        for i in range(0, arr.size, chunk):
            c = arr[i:i + chunk]
            if not c.any():
                f.write(b"0\n" * c.size)
            else:
                f.write(("%.10g\n" * c.size % tuple(c)).encode())


def read_trace(path) -> PowerTrace:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    m = _HEADER_RE.match(data[:nl + 1]) if nl >= 0 else None
    if not m:
        raise TraceFormatError(f"{path}: missing imc-trace header")
    tile_id, rate, n = int(m.group(1)), float(m.group(2)), int(m.group(3))
    body = data[nl + 1:]
    if len(body) == 8 * n and (n == 0 or not _looks_like_text(body)):
        arr = np.frombuffer(body, dtype="<f8").copy()
    else:
        arr = np.loadtxt(io.BytesIO(body), dtype=np.float64, ndmin=1) if body.strip() \
            else np.zeros(0)
    if arr.size != n:
        raise TraceFormatError(f"{path}: header says n={n}, body holds {arr.size}")
    return PowerTrace(tile_id, rate, arr)


def _looks_like_text(body):
    probe = body[:4096]
    return all(b in _TEXT_BYTES for b in probe)


def write_traces(directory, traces, binary=False):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in traces:
        p = directory / trace_filename(t.tile_id, binary)
        write_trace(p, t, binary)
        paths.append(p)
    return paths


def read_traces(directory):
    """All traces in a directory, sorted by tile id."""
    directory = Path(directory)
    paths = sorted(directory.glob("tile_*.txt")) + sorted(directory.glob("tile_*.bin"))
    if not paths:
        raise TraceFormatError(f"no trace files in {directory}")
    traces = [read_trace(p) for p in paths]
    traces.sort(key=lambda t: t.tile_id)
    return traces
