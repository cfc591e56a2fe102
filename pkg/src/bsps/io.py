"""File formats: input CSVs, posterior artifacts and key = value config files.

Posterior artifact layout (all integers and floats little-endian):

    offset 0   8 bytes   magic b"BSPSPOST"
    offset 8   uint32    format version (1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header, keys sorted, no whitespace
    then       float64   static arrays, in header["static"] order, C order
    then       float64   draw block: for draw k = 0..K-1, every column of
                         header["columns"] in order, each C-ordered

The header records, for each static array and draw column, its name and
shape (draw columns give the per-draw shape), plus ``n_draws`` and the
echoed run configuration under ``config``.
"""
import csv
import json
import math
import struct

import numpy as np

from .agents import BERNOULLI, GAUSSIAN, AgentForecastSet
from .errors import ArtifactMismatch, ConfigError, EmptyData, SchemaError

MAGIC = b"BSPSPOST"
VERSION = 1


# ---------------------------------------------------------------------------
# CSV


class InputData:
    def __init__(self, coords, y, forecasts):
        self.coords = coords
        self.y = y
        self.forecasts = forecasts

    @property
    def n(self):
        return len(self.coords)


def _expected_header(J, kind, with_y):
    head = ["s1", "s2"] + (["y"] if with_y else [])
    for j in range(1, J + 1):
        head.append(f"a_{j}")
        if kind == GAUSSIAN:
            head.append(f"b_{j}")
    return head


def _parse_header(header, with_y):
    names = [h.strip() for h in header]
    lead = 3 if with_y else 2
    rest = names[lead:]
    kind = GAUSSIAN if any(c.startswith("b_") for c in rest) else BERNOULLI
    J = len(rest) // 2 if kind == GAUSSIAN else len(rest)
    expected = _expected_header(J, kind, with_y)
    if J < 1:
        raise SchemaError("no agent forecast columns", row=1)
    for pos, want in enumerate(expected):
        got = names[pos] if pos < len(names) else None
        if got != want:
            raise SchemaError(f"expected header {want!r}, found {got!r}", row=1,
                              column=got if got is not None else want)
    if len(names) != len(expected):
        raise SchemaError("unexpected trailing columns", row=1, column=names[len(expected)])
    return names, kind, J


def read_sites_csv(path, with_y=True):
    """Read a training (``with_y``) or new-site CSV.

    Header: s1,s2[,y],a_1,b_1,...,a_J,b_J (gaussian) or s1,s2[,y],a_1,...,a_J
    (bernoulli). Row numbers in errors count the header as row 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise EmptyData(f"{path}: file is empty")
    names, kind, J = _parse_header(rows[0], with_y)
    data = rows[1:]
    if not data:
        raise EmptyData(f"{path}: no data rows")
    vals = np.empty((len(data), len(names)))
    for r, row in enumerate(data, start=2):
        if len(row) != len(names):
            raise SchemaError(f"expected {len(names)} fields, found {len(row)}", row=r)
        for c, (name, cell) in enumerate(zip(names, row)):
            try:
                v = float(cell.strip())
            except ValueError:
                raise SchemaError(f"not a number: {cell!r}", row=r, column=name) from None
            if not math.isfinite(v):
                raise SchemaError(f"non-finite value {cell!r}", row=r, column=name)
            if name.startswith("b_") and v <= 0:
                raise SchemaError(f"variance must be positive, got {v}", row=r, column=name)
            if kind == BERNOULLI and name.startswith("a_") and not 0 <= v <= 1:
                raise SchemaError(f"probability outside [0, 1]: {v}", row=r, column=name)
            if kind == BERNOULLI and name == "y" and v not in (0.0, 1.0):
                raise SchemaError(f"binary response must be 0 or 1, got {v}", row=r, column=name)
            vals[r - 2, c] = v
    coords = vals[:, :2]
    lead = 3 if with_y else 2
    y = vals[:, 2] if with_y else None
    if kind == GAUSSIAN:
        forecasts = AgentForecastSet(vals[:, lead::2], vals[:, lead + 1::2], GAUSSIAN)
    else:
        forecasts = AgentForecastSet(vals[:, lead:], None, BERNOULLI)
    return InputData(coords, y, forecasts)


def _fmt(v):
    return repr(float(v))


def write_csv(path, header, columns):
    cols = [np.asarray(c) for c in columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(cols[0]) if cols else 0):
            w.writerow([_fmt(c[i]) for c in cols])


def write_sites_csv(path, coords, forecasts, y=None):
    with_y = y is not None
    header = _expected_header(forecasts.J, forecasts.kind, with_y)
    cols = [coords[:, 0], coords[:, 1]] + ([y] if with_y else [])
    for j in range(forecasts.J):
        cols.append(forecasts.a[:, j])
        if forecasts.kind == GAUSSIAN:
            cols.append(forecasts.b[:, j])
    write_csv(path, header, cols)


def write_rows_csv(path, rows):
    """List of dicts with identical keys to CSV; floats written with repr."""
    if not rows:
        raise EmptyData("nothing to write")
    keys = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r[k]) if isinstance(r[k], (float, np.floating)) else r[k]
                        for k in keys])


# ---------------------------------------------------------------------------
# posterior artifact


def write_artifact(path, config, static, columns=None):
    """``static``: name -> array; ``columns``: name -> (K, ...) draw arrays."""
    columns = columns or {}
    K = None
    for name, arr in columns.items():
        k = np.asarray(arr).shape[0]
        if K is not None and k != K:
            raise ValueError(f"draw column {name!r} has {k} draws, expected {K}")
        K = k
    K = 0 if K is None else K
    static = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in static.items()}
    columns = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in columns.items()}
    header = {
        "config": config,
        "static": [{"name": k, "shape": list(v.shape)} for k, v in static.items()],
        "columns": [{"name": k, "shape": list(v.shape[1:])} for k, v in columns.items()],
        "n_draws": K,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":"),
                    allow_nan=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hb)))
        fh.write(hb)
        for v in static.values():
            fh.write(v.tobytes(order="C"))
        if K:
            block = np.concatenate([v.reshape(K, -1) for v in columns.values()], axis=1)
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes(order="C"))


def read_artifact(path):
    """Returns (config, static dict, columns dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ArtifactMismatch(f"{path}: not a posterior artifact")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise ArtifactMismatch(f"{path}: unsupported artifact version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    pos = 20 + hlen
    static = {}
    for ent in header["static"]:
        size = int(np.prod(ent["shape"], dtype=np.int64))
        static[ent["name"]] = np.frombuffer(raw, "<f8", size, pos).reshape(ent["shape"]).copy()
        pos += 8 * size
    K = header["n_draws"]
    sizes = [int(np.prod(c["shape"], dtype=np.int64)) for c in header["columns"]]
    columns = {}
    if K:
        block = np.frombuffer(raw, "<f8", K * sum(sizes), pos).reshape(K, sum(sizes))
        off = 0
        for ent, size in zip(header["columns"], sizes):
            columns[ent["name"]] = block[:, off:off + size].reshape([K] + ent["shape"]).copy()
            off += size
        pos += 8 * K * sum(sizes)
    if pos != len(raw):
        raise ArtifactMismatch(f"{path}: {len(raw) - pos} trailing bytes")
    return header["config"], static, columns


# ---------------------------------------------------------------------------
# config file

CONFIG_KEYS = {
    "seed": int,
    "method": str,
    "alpha": float,
    "threads": int,
    "priors.a_sigma": float,
    "priors.b_sigma": float,
    "priors.a_tau": float,
    "priors.b_tau": float,
    "priors.g_lo": float,
    "priors.g_hi": float,
    "priors.beta_bar": "floats",
    "chain.backend": str,
    "chain.m": int,
    "chain.n_burn": int,
    "chain.n_keep": int,
    "chain.thin": int,
    "chain.mh_step": float,
    "vb.tol": float,
    "vb.max_iter": int,
    "vb.grid_size": int,
    "vb.n_draws": int,
    "experiment.name": str,
    "experiment.p": int,
    "experiment.reps": int,
}


def _convert(key, text, where):
    kind = CONFIG_KEYS[key]
    try:
        if kind == "floats":
            return tuple(float(t) for t in text.split(","))
        if kind is int:
            return int(text)
        if kind is float:
            v = float(text)
            if not math.isfinite(v):
                raise ValueError
            return v
        return text
    except ValueError:
        raise ConfigError(f"{where}: bad value {text!r} for {key}") from None


def parse_config_text(text, source="<config>"):
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        out[key] = _convert(key, value, where)
    return out


def read_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))
