"""Series and model files.

Series files carry a ``canonical-v1`` layout tag. Canonical order lists each
observation's entries first-index-fastest, observations in time order.

* CSV: ``#`` header lines (tag, ``K=``, ``dims=``, ``T=``), a column line
  ``t,i1,...,iK,value`` and one row per cell with 1-based indices.
* Binary: magic ``TENAR1\\n``, one JSON header line, then little-endian
  float64 data in canonical order.

Every write goes to a temporary file in the target directory that is then
renamed over the destination.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .model import TenArModel, model_from_dict, model_to_dict

LAYOUT = "canonical-v1"
MAGIC = b"TENAR1\n"


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write(path, dumps_json(obj))


def read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from exc


# -- series -----------------------------------------------------------------

def _canonical(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1, order="F")


def write_series(path, x: np.ndarray, fmt: str | None = None) -> None:
    """Write a ``(T, *dims)`` array; ``fmt`` is ``csv`` or ``bin`` (default by suffix)."""
    x = np.asarray(x, dtype=float)
    if x.ndim < 2:
        raise ValidationError("a series needs shape (T, d_1, ..., d_K)")
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "bin")
    T, dims = x.shape[0], x.shape[1:]
    if fmt == "bin":
        header = json.dumps({"layout": LAYOUT, "K": len(dims), "dims": list(dims), "T": T})
        body = _canonical(x).astype("<f8").tobytes()
        atomic_write(path, MAGIC + header.encode() + b"\n" + body)
        return
    if fmt != "csv":
        raise ValidationError(f"unknown series format {fmt!r}")
    lines = [
        f"# tenar-series {LAYOUT}",
        f"# K={len(dims)}",
        "# dims=" + ",".join(str(d) for d in dims),
        f"# T={T}",
        ",".join(["t"] + [f"i{k + 1}" for k in range(len(dims))] + ["value"]),
    ]
    idx = np.indices(dims).reshape(len(dims), -1, order="F").T + 1
    labels = [",".join(str(v) for v in row) for row in idx]
    flat = _canonical(x)
    for t in range(T):
        for lab, v in zip(labels, flat[t]):
            lines.append(f"{t + 1},{lab},{float(v)!r}")
    atomic_write(path, "\n".join(lines) + "\n")


def _parse_header_int(value: str, what: str, line: int) -> int:
    try:
        out = int(value)
    except ValueError:
        raise ValidationError(f"line {line}: {what} must be an integer, got {value!r}") from None
    if out < 1:
        raise ValidationError(f"line {line}: {what} must be positive")
    return out


def _check_header(obj: dict, where: str) -> tuple[int, tuple[int, ...], int]:
    if obj.get("layout") != LAYOUT:
        raise ValidationError(f"{where}: unsupported layout {obj.get('layout')!r}")
    try:
        K = int(obj["K"])
        dims = tuple(int(d) for d in obj["dims"])
        T = int(obj["T"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: malformed header ({exc})") from None
    if K != len(dims) or K < 1 or T < 1 or any(d < 1 for d in dims):
        raise ValidationError(f"{where}: inconsistent header K={K} dims={dims} T={T}")
    return K, dims, T


def _read_binary(path, raw: bytes) -> np.ndarray:
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise ValidationError(f"{path}: missing header line after magic bytes")
    try:
        header = json.loads(raw[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: header at byte offset {len(MAGIC)} is not JSON: {exc.msg}") from None
    if not isinstance(header, dict):
        raise ValidationError(f"{path}: header must be a JSON object")
    _, dims, T = _check_header(header, f"{path} (byte offset {len(MAGIC)})")
    body = raw[end + 1:]
    want = T * int(np.prod(dims)) * 8
    if len(body) != want:
        raise ValidationError(
            f"{path}: data section at byte offset {end + 1} holds {len(body)} bytes, expected {want}"
        )
    flat = np.frombuffer(body, dtype="<f8").astype(float)
    # rows are observations in canonical (first-index-fastest) order
    return flat.reshape(T, -1).reshape((T,) + dims, order="F")


def _read_csv(path, text: str) -> np.ndarray:
    header = {}
    lines = text.splitlines()
    pos = 0
    while pos < len(lines) and lines[pos].startswith("#"):
        body = lines[pos][1:].strip()
        if body.startswith("tenar-series"):
            header["layout"] = body.split()[-1]
        elif "=" in body:
            key, _, val = body.partition("=")
            header[key.strip()] = (val.strip(), pos + 1)
        pos += 1
    if "layout" not in header:
        raise ValidationError(f"{path}: line 1: missing 'tenar-series' layout tag")
    for key in ("K", "dims", "T"):
        if key not in header:
            raise ValidationError(f"{path}: header lacks '{key}='")
    K = _parse_header_int(header["K"][0], "K", header["K"][1])
    T = _parse_header_int(header["T"][0], "T", header["T"][1])
    try:
        dims = tuple(int(v) for v in header["dims"][0].split(","))
    except ValueError:
        raise ValidationError(f"{path}: line {header['dims'][1]}: malformed dims") from None
    _check_header({"layout": header["layout"], "K": K, "dims": dims, "T": T}, str(path))

    columns = ["t"] + [f"i{k + 1}" for k in range(K)] + ["value"]
    if pos >= len(lines) or [c.strip() for c in lines[pos].split(",")] != columns:
        raise ValidationError(f"{path}: line {pos + 1}: expected column line {','.join(columns)}")
    shape = (T,) + dims
    out = np.zeros(shape)
    seen = np.zeros(shape, dtype=bool)
    bounds = (T,) + dims
    for lineno, row in enumerate(csv.reader(lines[pos + 1:]), start=pos + 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != K + 2:
            raise ValidationError(f"{path}: line {lineno}: expected {K + 2} fields, got {len(row)}")
        try:
            index = tuple(int(c) for c in row[:-1])
            value = float(row[-1])
        except ValueError:
            raise ValidationError(f"{path}: line {lineno}: unparsable field") from None
        for name, v, hi in zip(columns, index, bounds):
            if not 1 <= v <= hi:
                raise ValidationError(f"{path}: line {lineno}: {name}={v} out of range 1..{hi}")
        cell = tuple(v - 1 for v in index)
        if seen[cell]:
            raise ValidationError(f"{path}: line {lineno}: duplicate cell {index}")
        seen[cell] = True
        out[cell] = value
    if not seen.all():
        # report the first gap in canonical order
        flat_seen = _canonical(seen)
        t, j = np.argwhere(~flat_seen)[0]
        gap = np.unravel_index(j, dims, order="F")
        missing = int((~seen).sum())
        raise ValidationError(
            f"{path}: cell count mismatch: {missing} missing; first gap at "
            f"t={t + 1}, index=({','.join(str(g + 1) for g in gap)})"
        )
    return out


def read_series(path) -> np.ndarray:
    """Read a series file (format detected from the magic bytes)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from exc
    if raw.startswith(MAGIC):
        return _read_binary(path, raw)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ValidationError(f"{path}: neither a binary series nor UTF-8 text") from None
    return _read_csv(path, text)


# -- models -----------------------------------------------------------------

def write_model(path, m: TenArModel) -> None:
    write_json(path, model_to_dict(m))


def read_model(path) -> TenArModel:
    obj = read_json(path)
    try:
        return model_from_dict(obj)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def write_table_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    atomic_write(path, "\n".join(lines) + "\n")
