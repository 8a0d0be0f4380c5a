"""File formats: trajectories (JSON lines or binary), model artifacts, calibration
results, and CSV/SVG reports.

Binary trajectory layout (all little-endian)::

    "ORCA" | u32 version=1 | u32 embed_dim | u32 count
    per trajectory:
      u32 id | u32 length
      length * embed_dim float32, row-major
      length u8 correctness flags (0xFF = absent)
      length u32 answer ids (0xFFFFFFFF = absent)
      length u32 token counts (0 = absent)

Model artifacts are one canonical JSON line, a checksum line
``fnv1a64:<16 hex digits>`` over that line's bytes, and an optional
``meta:`` line that is not covered by the checksum.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .data import Trajectory
from .errors import FormatError
from .probe import ProbeConfig, SlowWeights, Variant

MAGIC = b"ORCA"
TRAJ_VERSION = 1
MODEL_FORMAT = "onlinecal-model"
MODEL_VERSION = 1
ABSENT_U8 = 0xFF
ABSENT_U32 = 0xFFFFFFFF

PathLike = Union[str, Path]


# --- trajectories -----------------------------------------------------------

def _step_records(tr: Trajectory) -> list:
    steps = []
    for t in range(len(tr)):
        rec = {"embedding": tr.embeddings[t].tolist()}
        if tr.correct is not None:
            rec["correct"] = int(tr.correct[t])
        if tr.answer_ids is not None:
            rec["answer_id"] = int(tr.answer_ids[t])
        if tr.tokens is not None:
            rec["tokens"] = int(tr.tokens[t])
        steps.append(rec)
    return steps


def _optional_column(steps: list, key: str, tid) -> Optional[list]:
    present = [key in s for s in steps]
    if not any(present):
        return None
    if not all(present):
        raise FormatError(f"trajectory {tid}: field {key!r} present on some steps only")
    return [s[key] for s in steps]


def write_trajectories_text(path: PathLike, dataset: Sequence[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in dataset:
            doc = {"id": int(tr.id), "dim": tr.dim, "steps": _step_records(tr)}
            fh.write(json.dumps(doc, separators=(",", ":"), allow_nan=False))
            fh.write("\n")


def read_trajectories_text(path: PathLike) -> List[Trajectory]:
    out = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                steps = doc["steps"]
                emb = np.array([s["embedding"] for s in steps], dtype=np.float64)
                tid = int(doc["id"])
                d = int(doc["dim"])
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed trajectory record ({exc})") from None
            if emb.ndim != 2 or emb.shape[1] != d or emb.shape[0] == 0:
                raise FormatError(f"{path}:{lineno}: embeddings do not match dim={d}")
            if dim is not None and d != dim:
                raise FormatError(f"{path}:{lineno}: dim {d} differs from earlier records ({dim})")
            dim = d
            out.append(Trajectory(
                emb,
                _optional_column(steps, "correct", tid),
                _optional_column(steps, "answer_id", tid),
                _optional_column(steps, "tokens", tid),
                id=tid,
            ))
    return out


def write_trajectories_binary(path: PathLike, dataset: Sequence[Trajectory], embed_dim: Optional[int] = None) -> None:
    if embed_dim is None:
        embed_dim = dataset[0].dim if dataset else 0
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", TRAJ_VERSION, embed_dim, len(dataset)))
    for tr in dataset:
        T = len(tr)
        if tr.dim != embed_dim:
            raise FormatError(f"trajectory {tr.id} has dim {tr.dim}, file uses {embed_dim}")
        buf.write(struct.pack("<II", tr.id, T))
        buf.write(tr.embeddings.astype("<f4").tobytes())
        flags = np.full(T, ABSENT_U8, dtype=np.uint8) if tr.correct is None else tr.correct.astype(np.uint8)
        buf.write(flags.tobytes())
        if tr.answer_ids is None:
            ids = np.full(T, ABSENT_U32, dtype="<u4")
        else:
            if np.any(tr.answer_ids < 0) or np.any(tr.answer_ids >= ABSENT_U32):
                raise FormatError(f"trajectory {tr.id}: answer ids must fit below 0xFFFFFFFF")
            ids = tr.answer_ids.astype("<u4")
        buf.write(ids.tobytes())
        toks = np.zeros(T, dtype="<u4") if tr.tokens is None else tr.tokens.astype("<u4")
        buf.write(toks.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_trajectories_binary(path: PathLike) -> List[Trajectory]:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, dim, count = struct.unpack_from("<III", data, 4)
    if version != TRAJ_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 16
    out = []
    for n in range(count):
        if pos + 8 > len(data):
            raise FormatError(f"{path}: truncated at trajectory {n}")
        tid, T = struct.unpack_from("<II", data, pos)
        pos += 8
        need = T * dim * 4 + T + 8 * T
        if T == 0 or pos + need > len(data):
            raise FormatError(f"{path}: trajectory {n} has malformed length {T}")
        emb = np.frombuffer(data, "<f4", T * dim, pos).reshape(T, dim).astype(np.float64)
        pos += T * dim * 4
        flags = np.frombuffer(data, np.uint8, T, pos)
        pos += T
        ids = np.frombuffer(data, "<u4", T, pos)
        pos += 4 * T
        toks = np.frombuffer(data, "<u4", T, pos)
        pos += 4 * T
        out.append(Trajectory(
            emb,
            _sentinel_column(flags, ABSENT_U8, tid, "correct"),
            _sentinel_column(ids, ABSENT_U32, tid, "answer_id"),
            None if not toks.any() else toks.astype(np.int64),
            id=tid,
        ))
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def _sentinel_column(values: np.ndarray, absent: int, tid: int, name: str):
    missing = values == absent
    if missing.all():
        return None
    if missing.any():
        raise FormatError(f"trajectory {tid}: field {name!r} present on some steps only")
    return values.astype(np.int64)


def write_trajectories(path: PathLike, dataset: Sequence[Trajectory]) -> None:
    """Text format for ``.jsonl``/``.json`` paths, binary otherwise."""
    if str(path).endswith((".jsonl", ".json")):
        write_trajectories_text(path, dataset)
    else:
        write_trajectories_binary(path, dataset)


def read_trajectories(path: PathLike) -> List[Trajectory]:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return read_trajectories_binary(path)
    if str(path).endswith((".jsonl", ".json")) or head[:1] in (b"{", b""):
        return read_trajectories_text(path)
    raise FormatError(f"{path}: bad magic {head!r}")


# --- model artifacts --------------------------------------------------------

def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class ModelArtifact:
    probe: ProbeConfig
    slow: SlowWeights
    train: dict = field(default_factory=dict)
    label_mode: dict = field(default_factory=dict)
    static: bool = False
    meta: dict = field(default_factory=dict)


def _slow_to_doc(slow: SlowWeights) -> dict:
    doc = {"w0": slow.w0.tolist(), "b0": slow.b0, "eta": slow.eta}
    doc["theta_q"] = None if slow.theta_q is None else slow.theta_q.tolist()
    if slow.theta_k is None:
        doc["theta_k"] = None
    elif slow.shared:
        doc["theta_k"] = "shared"
    else:
        doc["theta_k"] = slow.theta_k.tolist()
    return doc


def _slow_from_doc(doc: dict) -> SlowWeights:
    tq = None if doc["theta_q"] is None else np.array(doc["theta_q"], dtype=np.float64)
    tk_doc = doc["theta_k"]
    if tk_doc is None:
        tk = None
    elif tk_doc == "shared":
        tk = tq
    else:
        tk = np.array(tk_doc, dtype=np.float64)
    return SlowWeights(np.array(doc["w0"], dtype=np.float64), doc["b0"], tq, tk, doc["eta"])


def _canonical(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def model_body(art: ModelArtifact) -> bytes:
    probe = asdict(art.probe)
    probe["variant"] = art.probe.variant.value
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "probe": probe,
        "slow": _slow_to_doc(art.slow),
        "train": art.train,
        "label_mode": art.label_mode,
        "static": art.static,
    }
    return _canonical(doc)


def write_model(path: PathLike, art: ModelArtifact) -> None:
    body = model_body(art)
    text = body + b"\nfnv1a64:%016x\n" % fnv1a64(body)
    if art.meta:
        text += b"meta:" + _canonical(art.meta) + b"\n"
    Path(path).write_bytes(text)


def read_model(path: PathLike) -> ModelArtifact:
    lines = Path(path).read_bytes().split(b"\n")
    if len(lines) < 2 or not lines[1].startswith(b"fnv1a64:"):
        raise FormatError(f"{path}: missing checksum line")
    body = lines[0]
    try:
        expected = int(lines[1][len(b"fnv1a64:"):], 16)
    except ValueError:
        raise FormatError(f"{path}: unreadable checksum") from None
    if fnv1a64(body) != expected:
        raise FormatError(f"{path}: checksum mismatch")
    try:
        doc = json.loads(body)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed model body ({exc})") from None
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise FormatError(f"{path}: unknown model format/version {doc.get('format')}/{doc.get('version')}")
    meta = {}
    for extra in lines[2:]:
        if extra.startswith(b"meta:"):
            meta = json.loads(extra[5:])
    p = doc["probe"]
    probe = ProbeConfig(Variant(p["variant"]), p["embed_dim"], p["proj_dim"], p["smoothing_window"], p["inner_lr_learnable"])
    slow = _slow_from_doc(doc["slow"])
    slow.check(probe)
    return ModelArtifact(probe, slow, doc["train"], doc["label_mode"], doc["static"], meta)


# --- calibration results ----------------------------------------------------

def calibration_to_doc(res) -> dict:
    spec = asdict(res.spec)
    spec["loss_mode"] = res.spec.loss_mode.value
    return {
        "lambda_star": res.lambda_star,
        "n": res.n,
        "spec": spec,
        "records": [asdict(r) for r in res.records],
    }


def write_calibration(path: PathLike, res) -> None:
    Path(path).write_bytes(_canonical(calibration_to_doc(res)) + b"\n")


def read_calibration(path: PathLike):
    from .calibration import CalibrationResult, ThresholdRecord
    from .runtime import RiskSpec

    try:
        doc = json.loads(Path(path).read_bytes())
        spec = RiskSpec(**doc["spec"])
        records = [ThresholdRecord(**r) for r in doc["records"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed calibration result ({exc})") from None
    return CalibrationResult(doc["lambda_star"], records, doc["n"], spec)


# --- reports ----------------------------------------------------------------

SWEEP_COLUMNS = ["delta", "lambda_star", "savings_step", "savings_token", "error_rate", "n"]
EVAL_COLUMNS = ["n", "threshold", "savings_step", "savings_token", "error_rate", "delta", "epsilon", "loss_mode"]
CALIB_COLUMNS = ["lambda", "risk", "losses", "pvalue", "rejected"]
TRACE_COLUMNS = ["step", "raw", "smoothed", "stopped", "first_correct"]
EPOCH_COLUMNS = ["epoch", "mean_loss"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: PathLike, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: PathLike) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _report_kind(report) -> str:
    from .calibration import CalibrationResult
    from .runtime import EvalReport, SweepRow, TraceRecord

    if isinstance(report, EvalReport):
        return "eval"
    if isinstance(report, CalibrationResult):
        return "calibration"
    if isinstance(report, (list, tuple)) and report and isinstance(report[0], SweepRow):
        return "sweep"
    if isinstance(report, (list, tuple)) and report and isinstance(report[0], TraceRecord):
        return "trace"
    raise TypeError(f"cannot emit a report for {type(report).__name__}")


def emit_report(report, path: PathLike, fmt: str = "csv", **plot_kw) -> None:
    """Write an EvalReport, CalibrationResult, sweep table or trace as CSV or SVG."""
    kind = _report_kind(report)
    if fmt == "csv":
        if kind == "sweep":
            rows = [[getattr(r, c) for c in SWEEP_COLUMNS] for r in report]
            write_csv(path, SWEEP_COLUMNS, rows)
        elif kind == "eval":
            s = report.spec
            write_csv(path, EVAL_COLUMNS, [[
                report.n, report.threshold, report.savings_step, report.savings_token, report.error_rate,
                None if s is None else s.delta, None if s is None else s.epsilon,
                None if s is None else s.loss_mode.value,
            ]])
        elif kind == "calibration":
            write_csv(path, CALIB_COLUMNS, [[r.lam, r.risk, r.losses, r.pvalue, r.rejected] for r in report.records])
        else:
            write_csv(path, TRACE_COLUMNS, [[r.step, r.raw, r.smoothed, r.stopped, r.first_correct] for r in report])
    elif fmt == "svg":
        from . import plots

        {"sweep": plots.sweep_svg, "eval": plots.savings_hist_svg,
         "calibration": plots.calibration_svg, "trace": plots.trace_svg}[kind](report, path, **plot_kw)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
