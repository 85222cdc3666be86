"""Text checkpoints for :class:`~capforge.decoder.DecoderParams`.

Layout::

    # capforge-checkpoint v1
    dims V=.. m=.. H=.. D=.. a=..
    seed <int or none>
    tensor <name> <ndim> <shape...>
    <one line per row, values as shortest round-trip reprs>
    ...
    end

Values are written with ``repr`` so loading reproduces every float exactly.
"""

from __future__ import annotations

import io
import os

import numpy as np

from .decoder import PARAM_NAMES, DecoderDims, DecoderParams
from .fileio import write_atomic

CHECKPOINT_VERSION = "# capforge-checkpoint v1"


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def dump_checkpoint(params: DecoderParams) -> str:
    d = params.dims
    buf = io.StringIO()
    buf.write(CHECKPOINT_VERSION + "\n")
    buf.write(f"dims V={d.V} m={d.m} H={d.H} D={d.D} a={d.a}\n")
    buf.write(f"seed {'none' if params.seed is None else int(params.seed)}\n")
    for name, arr in params.items():
        buf.write(f"tensor {name} {arr.ndim} {' '.join(map(str, arr.shape))}\n")
        for row in np.atleast_2d(arr):
            buf.write(" ".join(repr(float(v)) for v in row) + "\n")
    buf.write("end\n")
    return buf.getvalue()


def _parse_dims(line: str) -> DecoderDims:
    parts = line.split()
    if not parts or parts[0] != "dims":
        raise CheckpointError(f"expected dims line, got {line!r}")
    try:
        kv = dict(p.split("=", 1) for p in parts[1:])
        return DecoderDims(**{k: int(kv[k]) for k in ("V", "m", "H", "D", "a")})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad dims line {line!r}") from exc


def parse_checkpoint(text: str) -> DecoderParams:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_VERSION:
        found = lines[0] if lines else "<empty file>"
        raise CheckpointVersionError(f"unsupported checkpoint version line {found!r}")
    if not lines[-1:] or lines[-1].strip() != "end" or len(lines) < 4:
        raise CheckpointTruncatedError("checkpoint ends before the 'end' marker")
    dims = _parse_dims(lines[1])
    seed_parts = lines[2].split()
    if len(seed_parts) != 2 or seed_parts[0] != "seed":
        raise CheckpointError(f"bad seed line {lines[2]!r}")
    seed = None if seed_parts[1] == "none" else int(seed_parts[1])

    expected = dims.shapes()
    tensors = {}
    pos = 3
    body_end = len(lines) - 1
    while pos < body_end:
        head = lines[pos].split()
        if len(head) < 3 or head[0] != "tensor":
            raise CheckpointError(f"expected tensor header, got {lines[pos]!r}")
        name, ndim = head[1], int(head[2])
        shape = tuple(int(s) for s in head[3:3 + ndim])
        if name not in expected:
            raise CheckpointShapeError(f"unknown tensor {name!r}")
        if shape != expected[name]:
            raise CheckpointShapeError(f"{name} has shape {shape}, dims imply {expected[name]}")
        n_rows = shape[0] if ndim == 2 else 1
        n_cols = shape[-1]
        rows = lines[pos + 1:pos + 1 + n_rows]
        if pos + 1 + n_rows > body_end:
            raise CheckpointTruncatedError(f"{name}: file ends mid-tensor")
        values = []
        for r in rows:
            vals = [float(v) for v in r.split()]
            if len(vals) != n_cols:
                raise CheckpointShapeError(f"{name}: row has {len(vals)} values, expected {n_cols}")
            values.append(vals)
        tensors[name] = np.array(values, dtype=np.float64).reshape(shape)
        pos += 1 + n_rows

    missing = [n for n in PARAM_NAMES if n not in tensors]
    if missing:
        raise CheckpointTruncatedError(f"missing tensors {missing}")
    return DecoderParams(dims, tensors, seed=seed)


def save_checkpoint(params: DecoderParams, path: str | os.PathLike) -> None:
    write_atomic(path, dump_checkpoint(params))


def load_checkpoint(path: str | os.PathLike) -> DecoderParams:
    with open(path, encoding="utf-8") as fh:
        return parse_checkpoint(fh.read())
