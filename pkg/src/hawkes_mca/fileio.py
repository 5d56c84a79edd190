"""File formats: atomic writes, tagged CSV, and reproducible ``.npz`` archives.

Archives are written with fixed zip timestamps so the same arrays always give
the same bytes.
"""
from __future__ import annotations

import hashlib
import io
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .lattice import LatticeSpec, TransitionModel
from .solver import ACTION_NAMES, Policy, ValueTable

__all__ = [
    "FORMAT_VERSION",
    "ChecksumError",
    "atomic_write",
    "csv_header",
    "write_csv",
    "save_npz",
    "load_npz",
    "export_transitions",
    "import_transitions",
    "save_solution",
    "load_solution",
    "value_slice_csv",
]

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class ChecksumError(ValueError):
    pass


def atomic_write(path, data) -> Path:
    """Write bytes or text to ``path`` through a temp file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def csv_header(**meta) -> str:
    """``# key=value ...`` comment line carried by every emitted CSV."""
    return "# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n"


def write_csv(path, body: str, **meta) -> Path:
    text = csv_header(**meta) + body
    return atomic_write(path, text.replace("\r\n", "\n"))


def _npz_bytes(arrays: dict) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            arr = io.BytesIO()
            np.lib.format.write_array(arr, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, arr.getvalue())
    return buf.getvalue()


def save_npz(path, **arrays) -> Path:
    return atomic_write(path, _npz_bytes(arrays))


def load_npz(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def _digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- transitions

def export_transitions(tm: TransitionModel, path) -> Path:
    """Sparse rows per control pair, with version header and checksum."""
    arrays = {
        "format_version": np.array(FORMAT_VERSION),
        "lattice_hash": np.array(tm.lattice_hash),
        "pairs": np.array(tm.pairs, dtype=float).reshape(-1, 2),
        "inject_to": tm.inject_to,
        "p_up": tm.p_up,
        "p_down": tm.p_down,
        "p_stay": tm.p_stay,
        "p_jump": tm.p_jump,
        "time": np.array(tm.time),
        "n_states": np.array(tm.diffuse[0].shape[0]),
    }
    for p, P in enumerate(tm.diffuse):
        arrays[f"indptr_{p}"] = P.indptr.astype(np.int64)
        arrays[f"indices_{p}"] = P.indices.astype(np.int64)
        arrays[f"data_{p}"] = P.data
    for key, (frm, to) in tm.reflect.items():
        arrays[f"reflect_{key}"] = np.stack([frm, to])
    arrays["checksum"] = np.array(_digest(arrays))
    return save_npz(path, **arrays)


def import_transitions(path, lattice: LatticeSpec | None = None) -> TransitionModel:
    a = load_npz(path)
    if "checksum" not in a or "format_version" not in a:
        raise ChecksumError("missing checksum or version header")
    version = int(a["format_version"])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported transition format version {version}")
    stored = str(a.pop("checksum"))
    if _digest(a) != stored:
        raise ChecksumError(f"checksum mismatch in {path}")
    lh = str(a["lattice_hash"])
    if lattice is not None and lattice.hash != lh:
        raise ValueError("transition file belongs to a different lattice")
    S = int(a["n_states"])
    pairs = [tuple(map(float, p)) for p in a["pairs"]]
    mats = [sp.csr_matrix((a[f"data_{p}"], a[f"indices_{p}"], a[f"indptr_{p}"]), shape=(S, S))
            for p in range(len(pairs))]
    reflect = {k[len("reflect_"):]: (v[0], v[1]) for k, v in a.items() if k.startswith("reflect_")}
    return TransitionModel(lattice_hash=lh, pairs=pairs, diffuse=mats, inject_to=a["inject_to"],
                           reflect=reflect, p_up=a["p_up"], p_down=a["p_down"], p_stay=a["p_stay"],
                           p_jump=a["p_jump"], time=float(a["time"]))


# ---------------------------------------------------------------- solutions

def save_solution(path, table: ValueTable, policy: Policy | None = None) -> Path:
    arrays = {
        "format_version": np.array(FORMAT_VERSION),
        "lattice_hash": np.array(table.lattice_hash),
        "values": table.values,
        "layers": table.layers,
        "x_grid": table.lattice.x_grid,
    }
    for k, g in enumerate(table.lattice.sigma_grids):
        arrays[f"sigma_grid_{k + 1}"] = g
    if policy is not None:
        if policy.lattice_hash != table.lattice_hash:
            raise ValueError("policy and table disagree on the lattice")
        arrays["action"] = policy.action
        arrays["control"] = policy.control
    arrays["checksum"] = np.array(_digest(arrays))
    return save_npz(path, **arrays)


def load_solution(path, lattice: LatticeSpec):
    a = load_npz(path)
    stored = str(a.pop("checksum"))
    if _digest(a) != stored:
        raise ChecksumError(f"checksum mismatch in {path}")
    if str(a["lattice_hash"]) != lattice.hash:
        raise ValueError("solution file belongs to a different lattice")
    table = ValueTable(a["values"], a["layers"], lattice)
    pol = Policy(a["action"], a["control"], lattice.hash) if "action" in a else None
    return table, pol


def value_slice_csv(table: ValueTable, i: int, policy: Policy | None = None) -> str:
    """Columns ``x, sigma_1..n, value, action`` for layer ``i``."""
    lat = table.lattice
    V = table.layer(i).reshape(lat.nx, lat.n_sigma)
    pts = lat.sigma_points()
    n = pts.shape[1]
    act = None
    if policy is not None and i < policy.action.shape[0]:
        act = policy.action[i].reshape(lat.nx, lat.n_sigma)
    buf = io.StringIO()
    buf.write(",".join(["x", *[f"sigma_{k + 1}" for k in range(n)], "value", "action"]) + "\n")
    for ix, x in enumerate(lat.x_grid):
        for js in range(lat.n_sigma):
            a = "terminal" if i == lat.n_steps else (ACTION_NAMES[int(act[ix, js])] if act is not None else "")
            cells = [repr(float(x)), *[repr(float(v)) for v in pts[js]], repr(float(V[ix, js])), a]
            buf.write(",".join(cells) + "\n")
    return buf.getvalue()
