"""Reading and writing datasets, imputed pools, checkpoints, traces and sweep reports.

Checkpoint layout (all integers and floats little-endian)::

    b"CBCKPT01"                    8 bytes magic
    n                              uint64, length of the metadata block
    metadata                       n bytes of UTF-8 JSON
    for a in 0..k-1:
        A[a]                       d*d float64, row-major
        b[a]                       d float64
        theta[a]                   d float64
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .bandit_core import ArmState, Context, HyperParams, PolicyState
from .environment import ImputedContext, LoggedExample, RoundRecord

PathLike = Union[str, os.PathLike]

MAGIC = b"CBCKPT01"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_F8 = np.dtype("<f8")

DATASET_KEYS = ("item_id", "class_label", "features", "logged_action", "loss", "propensity")
POOL_KEYS = ("item_id", "class_label", "features", "dr_losses", "best_set")
TRACE_COLUMNS = ("t", "item_id", "class", "action", "propensity", "loss", "success", "cumulative_loss")


class DataFormatError(ValueError):
    """Malformed input file."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CheckpointError(DataFormatError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# -- datasets -----------------------------------------------------------------


def _require_keys(obj: dict, keys: Sequence[str], lineno: int) -> None:
    if not isinstance(obj, dict):
        raise DataFormatError("expected a JSON object", lineno)
    missing = [k for k in keys if k not in obj]
    extra = sorted(set(obj) - set(keys))
    if missing:
        raise DataFormatError(f"missing keys {missing}", lineno)
    if extra:
        raise DataFormatError(f"unknown keys {extra}", lineno)


def _vector(value, name: str, lineno: int, dim: Optional[int]) -> np.ndarray:
    if not isinstance(value, list) or not value:
        raise DataFormatError(f"{name} must be a non-empty array", lineno)
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise DataFormatError(f"{name} must contain only numbers", lineno)
    x = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataFormatError(f"{name} contains non-finite values", lineno)
    if dim is not None and x.shape[0] != dim:
        raise DataFormatError(f"{name} has length {x.shape[0]}, expected {dim}", lineno)
    return x


def _json_lines(path: PathLike) -> Iterable[tuple[int, dict]]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"invalid JSON ({exc.msg})", lineno) from None


def parse_dataset(path: PathLike) -> list[LoggedExample]:
    out: list[LoggedExample] = []
    dim: Optional[int] = None
    for lineno, obj in _json_lines(path):
        _require_keys(obj, DATASET_KEYS, lineno)
        x = _vector(obj["features"], "features", lineno, dim)
        dim = x.shape[0]
        action = obj["logged_action"]
        if not isinstance(action, int) or isinstance(action, bool) or action < 0:
            raise DataFormatError(f"logged_action must be a non-negative integer, got {action!r}", lineno)
        loss = obj["loss"]
        if isinstance(loss, bool) or loss not in (0, 1):
            raise DataFormatError(f"loss must be 0 or 1, got {loss!r}", lineno)
        p = obj["propensity"]
        if isinstance(p, bool) or not isinstance(p, (int, float)) or not (0 < p <= 1):
            raise DataFormatError(f"propensity must be in (0, 1], got {p!r}", lineno)
        if not isinstance(obj["item_id"], str) or not isinstance(obj["class_label"], str):
            raise DataFormatError("item_id and class_label must be strings", lineno)
        out.append(LoggedExample(obj["item_id"], obj["class_label"], x, action, float(loss), float(p)))
    return out


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_dataset(examples: Iterable[LoggedExample], path: PathLike) -> None:
    lines = [
        _dumps(
            {
                "item_id": ex.item_id,
                "class_label": ex.class_label,
                "features": ex.features.tolist(),
                "logged_action": int(ex.logged_action),
                "loss": int(ex.loss),
                "propensity": float(ex.propensity),
            }
        )
        for ex in examples
    ]
    atomic_write_bytes(path, "".join(line + "\n" for line in lines).encode("utf-8"))


def write_pool(pool: Iterable[ImputedContext], path: PathLike) -> None:
    lines = [
        _dumps(
            {
                "item_id": item.context.item_id,
                "class_label": item.context.class_label,
                "features": item.context.features.tolist(),
                "dr_losses": item.dr_losses.tolist(),
                "best_set": sorted(item.best_set),
            }
        )
        for item in pool
    ]
    atomic_write_bytes(path, "".join(line + "\n" for line in lines).encode("utf-8"))


def parse_pool(path: PathLike) -> list[ImputedContext]:
    out: list[ImputedContext] = []
    dim = k = None
    for lineno, obj in _json_lines(path):
        _require_keys(obj, POOL_KEYS, lineno)
        x = _vector(obj["features"], "features", lineno, dim)
        losses = _vector(obj["dr_losses"], "dr_losses", lineno, k)
        dim, k = x.shape[0], losses.shape[0]
        best = obj["best_set"]
        if not isinstance(best, list) or not all(isinstance(a, int) and 0 <= a < k for a in best):
            raise DataFormatError("best_set must be a list of action indices", lineno)
        ctx = Context(x, item_id=str(obj["item_id"]), class_label=str(obj["class_label"]))
        out.append(ImputedContext(ctx, losses, frozenset(best)))
    return out


# -- checkpoints --------------------------------------------------------------


def checkpoint_bytes(policy: PolicyState) -> bytes:
    h = policy.hyper
    meta = {
        "format_version": FORMAT_VERSION,
        "d": h.d,
        "k": h.k,
        "lambda": h.lam,
        "algorithm": policy.algorithm,
        "exploration_params": {"epsilon": h.epsilon, "alpha": h.alpha},
        "rounds_learned": policy.rounds_learned,
    }
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_LEN.pack(len(header)))
    buf.write(header)
    for arm in policy.arms:
        buf.write(np.ascontiguousarray(arm.A, dtype=_F8).tobytes())
        buf.write(np.ascontiguousarray(arm.b, dtype=_F8).tobytes())
        buf.write(np.ascontiguousarray(arm.theta, dtype=_F8).tobytes())
    return buf.getvalue()


def save_checkpoint(policy: PolicyState, path: PathLike) -> None:
    atomic_write_bytes(path, checkpoint_bytes(policy))


def payload_size(d: int, k: int) -> int:
    return k * (d * d + 2 * d) * 8


def checkpoint_from_bytes(data: bytes) -> PolicyState:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic: not a policy checkpoint")
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise TruncatedCheckpointError("truncated checkpoint: missing metadata length")
    (n,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if len(data) < pos + n:
        raise TruncatedCheckpointError("truncated checkpoint: metadata block cut short")
    try:
        meta = json.loads(data[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    pos += n
    if not isinstance(meta, dict):
        raise CheckpointError("corrupt checkpoint metadata: not an object")
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format_version {meta.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    try:
        d, k = int(meta["d"]), int(meta["k"])
        params = meta.get("exploration_params") or {}
        hyper = HyperParams(
            d=d,
            k=k,
            lam=float(meta["lambda"]),
            epsilon=float(params.get("epsilon", 0.0)),
            alpha=float(params.get("alpha", 0.0)),
        )
        rounds = int(meta["rounds_learned"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    expected = payload_size(d, k)
    remaining = len(data) - pos
    if remaining < expected:
        raise TruncatedCheckpointError(
            f"truncated checkpoint: payload has {remaining} bytes, expected {expected}"
        )
    if remaining > expected:
        raise CheckpointError(f"checkpoint has {remaining - expected} trailing bytes")
    flat = np.frombuffer(data, dtype=_F8, offset=pos).astype(np.float64)
    arms = []
    step = d * d + 2 * d
    for a in range(k):
        chunk = flat[a * step : (a + 1) * step]
        A = chunk[: d * d].reshape(d, d).copy()
        b = chunk[d * d : d * d + d].copy()
        theta = chunk[d * d + d :].copy()
        arms.append(ArmState(A=A, b=b, theta=theta))
    return PolicyState(hyper=hyper, arms=arms, rounds_learned=rounds, algorithm=meta.get("algorithm"))


def load_checkpoint(path: PathLike) -> PolicyState:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(data)


# -- CSV ----------------------------------------------------------------------


def _num(x: Optional[float]) -> str:
    if x is None:
        return ""
    x = float(x)
    return repr(x) if math.isfinite(x) else ""


def _param(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return _num(v)


def _write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    try:
        atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
    except OSError as exc:
        raise DataFormatError(f"cannot write {path}: {exc}") from exc


def _trace_row(r: RoundRecord) -> list[str]:
    return [
        str(r.t),
        r.item_id or "",
        r.class_label or "",
        str(r.action),
        _num(r.propensity),
        _num(r.loss),
        "1" if r.success else "0",
        _num(r.cumulative_loss),
    ]


def write_trace_csv(trace: Sequence[RoundRecord], path: PathLike) -> None:
    _write_csv(path, TRACE_COLUMNS, (_trace_row(r) for r in trace))


def write_ucb_trace_csv(trace: Sequence[RoundRecord], path: PathLike, k: int) -> None:
    """Trace plus per-arm ``estimate_a`` and ``width_a`` columns."""
    header = list(TRACE_COLUMNS)
    header += [f"estimate_{a}" for a in range(k)] + [f"width_{a}" for a in range(k)]

    def rows():
        for r in trace:
            est = r.estimates if r.estimates is not None else [None] * k
            wid = r.widths if r.widths is not None else [None] * k
            yield _trace_row(r) + [_num(v) for v in est] + [_num(v) for v in wid]

    _write_csv(path, header, rows())


def read_trace_csv(path: PathLike) -> list[dict]:
    """Parse a trace CSV back into dicts with numeric fields converted."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ints = {"t", "action"}
    out = []
    for row in rows:
        rec: dict = {}
        for key, value in row.items():
            if key in ints:
                rec[key] = int(value)
            elif key == "success":
                rec[key] = value == "1"
            elif key in ("item_id", "class"):
                rec[key] = value
            else:
                rec[key] = float(value) if value != "" else None
        out.append(rec)
    return out


def write_sweep_csv(report, path: PathLike) -> None:
    params = report.param_names
    header = list(params) + [
        "mean", "std", "ci95", "seeds", "regret_mean", "regret_ci95", "pi_star_loss", "error",
    ]
    rows = []
    for cell in report.cells:
        rows.append(
            [_param(cell.params.get(p)) for p in params]
            + [
                _num(cell.mean),
                _num(cell.std),
                _num(cell.ci95),
                str(cell.seeds),
                _num(cell.regret_mean),
                _num(cell.regret_ci95),
                _num(cell.pi_star_loss),
                cell.error or "",
            ]
        )
    _write_csv(path, header, rows)


def read_csv(path: PathLike) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
