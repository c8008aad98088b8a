"""File formats: binary signal batches, CSV exports, dictionary CSV and checkpoints.

Binary batch layout (all integers and floats little-endian):

    bytes 0..7    unsigned 64-bit length L of the header
    bytes 8..8+L  UTF-8 JSON header
    then          float64 blocks X (m x n), A0 (p x n), E (m x n), each column-major

The header holds ``m, p, k, n, sigma, seed, distribution`` and the list of
blocks in file order.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from .dictionary import Dictionary, as_matrix
from .errors import InvalidArgumentError
from .model import SignalBatch

FORMAT_NAME = "sparse-localmin-batch"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_F64 = np.dtype("<f8")


def save_batch(path, batch: SignalBatch) -> None:
    meta = dict(batch.metadata)
    header = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION,
        "m": batch.m, "p": batch.p, "k": batch.k, "n": batch.n,
        "sigma": float(meta.get("sigma", 0.0)), "seed": int(batch.seed),
        "distribution": meta.get("distribution", {}),
        "layout": "float64-le-column-major", "blocks": ["X", "A0", "E"],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(raw)))
        fh.write(raw)
        for block in (batch.X, batch.A0, batch.E):
            fh.write(np.asarray(block, dtype=_F64).tobytes(order="F"))


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        (size,) = _LEN.unpack(fh.read(_LEN.size))
        return json.loads(fh.read(size).decode("utf-8"))


def load_batch(path) -> SignalBatch:
    data = Path(path).read_bytes()
    if len(data) < _LEN.size:
        raise InvalidArgumentError("truncated batch file")
    (size,) = _LEN.unpack_from(data)
    try:
        header = json.loads(data[_LEN.size:_LEN.size + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise InvalidArgumentError(f"unreadable batch header: {err}") from err
    if header.get("format") != FORMAT_NAME:
        raise InvalidArgumentError("not a signal batch file")
    m, p, k, n = (int(header[key]) for key in ("m", "p", "k", "n"))
    offset = _LEN.size + size
    blocks = {}
    for name, rows in zip(header["blocks"], (m, p, m)):
        count = rows * n
        if offset + 8 * count > len(data):
            raise InvalidArgumentError("truncated batch file")
        flat = np.frombuffer(data, dtype=_F64, count=count, offset=offset)
        blocks[name] = flat.reshape((rows, n), order="F").astype(np.float64)
        offset += 8 * count
    A0 = blocks["A0"]
    supports = np.array([np.flatnonzero(A0[:, i]) for i in range(n)], dtype=np.intp).reshape(n, k)
    meta = {"m": m, "p": p, "k": k, "sigma": header["sigma"], "seed": header["seed"],
            "distribution": header["distribution"]}
    return SignalBatch(blocks["X"], A0, blocks["E"], supports, int(header["seed"]), meta)


def export_batch_csv(path, batch: SignalBatch) -> None:
    """One signal per row: ``x_0..x_{m-1}`` then ``a_0..a_{p-1}``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{i}" for i in range(batch.m)] + [f"a_{j}" for j in range(batch.p)])
        for i in range(batch.n):
            w.writerow([repr(float(v)) for v in batch.X[:, i]]
                       + [repr(float(v)) for v in batch.A0[:, i]])


def save_dictionary_csv(path, D) -> None:
    """First line ``m,p``, then the m rows of the matrix."""
    M = as_matrix(D)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(M.shape)
        for row in M:
            w.writerow([repr(float(v)) for v in row])


def load_dictionary_csv(path) -> Dictionary:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    try:
        m, p = (int(v) for v in rows[0])
        M = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except (ValueError, IndexError) as err:
        raise InvalidArgumentError(f"malformed dictionary CSV: {err}") from err
    if M.shape != (m, p):
        raise InvalidArgumentError(f"dictionary CSV declares {m}x{p} but holds {M.shape}")
    return Dictionary(M)


def _jsonable(obj):
    if is_dataclass(obj):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_checkpoint(directory, epoch: int, D, config, extra: dict | None = None) -> Path:
    """Write ``epoch_XXXX.csv`` and its ``.json`` sidecar; return the CSV path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / f"epoch_{epoch:04d}"
    save_dictionary_csv(stem.with_suffix(".csv"), D)
    side = {"epoch": epoch, "config": _jsonable(config)}
    if extra:
        side.update(_jsonable(extra))
    stem.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return stem.with_suffix(".csv")
