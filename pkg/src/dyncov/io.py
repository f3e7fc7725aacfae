"""File formats: sample tensors, matrices, ground truth, estimates and reports.

Sample tensors use a small binary container: the 4-byte magic ``DCOV``, a
little-endian u32 version, the dimensions (N, J, P) as little-endian u64,
then N*J*P little-endian float64 values in n, j, p order. The CSV
alternative has one row per (n, j) with header ``n,j,p1,...,pP``. Floats in
CSV files are written with 17 significant digits, so they round-trip exactly.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
from pathlib import Path

import numpy as np

from .estimation import FactorEstimate, SampleSet
from .simulation import GroundTruth
from .exceptions import DataError

MAGIC = b"DCOV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")
_FLOAT_FMT = "%.17g"


class OutputSet:
    """Collects files written by one command and removes them if the command fails.

    Files are written to a temporary name and renamed into place, so a
    crash never leaves a half-written file under its final name.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self._created_dir = not self.directory.exists()
        self.written: list[Path] = []

    def __enter__(self):
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create output directory {self.directory}: {exc}") from exc
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self.rollback()
        return False

    def rollback(self):
        for path in self.written:
            path.unlink(missing_ok=True)
        self.written.clear()
        if self._created_dir:
            shutil.rmtree(self.directory, ignore_errors=True)

    def path(self, name: str) -> Path:
        return self.directory / name

    def _commit(self, name: str, writer):
        final = self.path(name)
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                writer(fh)
            os.replace(tmp, final)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        self.written.append(final)
        return final

    def write_bytes(self, name: str, data: bytes):
        return self._commit(name, lambda fh: fh.write(data))

    def write_text(self, name: str, text: str):
        return self.write_bytes(name, text.encode("utf-8"))

    def write_json(self, name: str, obj):
        return self.write_text(name, dumps_json(obj))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps_json(obj) -> str:
    # json writes floats with repr, i.e. the shortest string that round-trips
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc


# sample tensors


def encode_samples(x) -> bytes:
    x = np.asarray(x, dtype="<f8")
    if x.ndim != 3:
        raise DataError(f"sample tensor must be 3-D, got shape {x.shape}")
    N, J, P = x.shape
    return _HEADER.pack(MAGIC, FORMAT_VERSION, N, J, P) + np.ascontiguousarray(x).tobytes()


def decode_samples(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise DataError("truncated sample file header")
    magic, version, N, J, P = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported sample format version {version}")
    expected = _HEADER.size + 8 * N * J * P
    if len(data) != expected:
        raise DataError(f"sample file has {len(data)} bytes, expected {expected} for N={N}, J={J}, P={P}")
    return np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(N, J, P).astype(float)


def samples_to_csv(x) -> str:
    x = np.asarray(x, dtype=float)
    N, J, P = x.shape
    header = ",".join(["n", "j"] + [f"p{i + 1}" for i in range(P)])
    lines = [header]
    for n in range(N):
        for j in range(J):
            lines.append(f"{n},{j}," + ",".join(_FLOAT_FMT % v for v in x[n, j]))
    return "\n".join(lines) + "\n"


def samples_from_csv(text: str) -> np.ndarray:
    rows = [line for line in text.splitlines() if line.strip()]
    if not rows:
        raise DataError("empty sample CSV")
    header = rows[0].split(",")
    if header[:2] != ["n", "j"] or header[2:] != [f"p{i + 1}" for i in range(len(header) - 2)]:
        raise DataError("sample CSV header must be n,j,p1,...,pP")
    P = len(header) - 2
    try:
        table = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"non-numeric entry in sample CSV: {exc}") from exc
    if table.ndim != 2 or table.shape[1] != P + 2:
        raise DataError("ragged sample CSV")
    idx = table[:, :2].astype(int)
    N, J = idx[:, 0].max() + 1, idx[:, 1].max() + 1
    if table.shape[0] != N * J:
        raise DataError(f"sample CSV has {table.shape[0]} rows, expected N*J={N * J}")
    x = np.full((N, J, P), np.nan)
    x[idx[:, 0], idx[:, 1]] = table[:, 2:]
    if np.isnan(x).any():
        raise DataError("sample CSV has missing or duplicated (n, j) rows")
    return x


def read_samples(path) -> SampleSet:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"sample file not found: {path}") from exc
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if data[:4] == MAGIC:
        return SampleSet(decode_samples(data))
    return SampleSet(samples_from_csv(data.decode("utf-8")))


def write_samples(out: OutputSet, name: str, samples, fmt: str = "binary"):
    x = samples.x if isinstance(samples, SampleSet) else samples
    if fmt == "binary":
        return out.write_bytes(name, encode_samples(x))
    if fmt == "csv":
        return out.write_text(name, samples_to_csv(x))
    raise DataError(f"unknown sample format {fmt!r}")


# matrices


def matrix_to_csv(M, row_label: str, col_prefix: str) -> str:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    header = ",".join([row_label] + [f"{col_prefix}{i + 1}" for i in range(M.shape[1])])
    lines = [header] + [f"{r}," + ",".join(_FLOAT_FMT % v for v in row) for r, row in enumerate(M)]
    return "\n".join(lines) + "\n"


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [line for line in text.splitlines() if line.strip()]
    if len(rows) < 2:
        raise DataError("matrix CSV needs a header and at least one row")
    try:
        table = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"non-numeric matrix entry: {exc}") from exc
    if table.ndim != 2:
        raise DataError("ragged matrix CSV")
    return table


def read_matrix(path) -> np.ndarray:
    try:
        return matrix_from_csv(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"matrix file not found: {path}") from exc


def covariances_to_csv(Sigmas) -> str:
    Sigmas = np.asarray(Sigmas, dtype=float)
    J, P, _ = Sigmas.shape
    lines = ["j,row,col,value"]
    for j in range(J):
        for r in range(P):
            for c in range(P):
                lines.append(f"{j},{r},{c}," + _FLOAT_FMT % Sigmas[j, r, c])
    return "\n".join(lines) + "\n"


def write_estimate(out: OutputSet, Z: FactorEstimate, prefix: str = ""):
    out.write_text(f"{prefix}V.csv", matrix_to_csv(Z.V, "p", "k"))
    out.write_text(f"{prefix}A.csv", matrix_to_csv(Z.A, "k", "j"))


def read_estimate(directory, prefix: str = "") -> FactorEstimate:
    directory = Path(directory)
    V = read_matrix(directory / f"{prefix}V.csv")
    A = read_matrix(directory / f"{prefix}A.csv")
    if V.shape[1] != A.shape[0]:
        raise DataError(f"V has {V.shape[1]} columns but A has {A.shape[0]} rows")
    return FactorEstimate(V, A)


def write_truth(out: OutputSet, truth: GroundTruth, extra: dict | None = None):
    meta = {
        "P": truth.P,
        "K": truth.K,
        "J": truth.J,
        "sigma": truth.sigma,
        "sparsity": truth.sparsity(),
        "c_star": truth.c_star(),
        "metadata": truth.metadata,
    }
    meta.update(extra or {})
    out.write_text("Vstar.csv", matrix_to_csv(truth.Vstar, "p", "k"))
    out.write_text("Astar.csv", matrix_to_csv(truth.Astar, "k", "j"))
    out.write_json("truth.json", meta)


def read_truth(directory) -> GroundTruth:
    directory = Path(directory)
    meta = read_json(directory / "truth.json")
    V = read_matrix(directory / "Vstar.csv")
    A = read_matrix(directory / "Astar.csv")
    if V.shape[1] != A.shape[0]:
        raise DataError(f"Vstar has {V.shape[1]} columns but Astar has {A.shape[0]} rows")
    return GroundTruth(V, A, float(meta.get("sigma", 0.0)), meta.get("metadata", {}))
