"""Readers and writers for every on-disk format.

Model files
-----------
A linear MTP model is stored as::

    b"MTPROVER-MODEL\\n"          magic line
    uint32 LE                     format version (currently 1)
    uint32 LE                     header length in bytes
    header                        UTF-8 JSON: vocab_size, hidden_dim,
                                  num_branches, context_window, dtype "<f8",
                                  blocks [{"name", "shape"}, ...]
    payload                       the blocks in header order, row-major
                                  little-endian float64

Block order is E, F, G1..GH, U. Readers reject unknown versions, and any
file whose length differs from what the header implies.

JSONL records
-------------
Clip input:     {"clip_id", "start", "end", "hyps": [3 strings], "lang"?}
Fusion result:  {"clip_id", "fused_tokens", "disagreed_positions",
                 "text_units", "e_hat", "kept", "verdict"}
Samples:        {"sample_id", "clip_ids", "text", "duration", "unrefined"}
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from mtprover.decoding import AcceptanceStats, acceptance_summary, stats_from_summary
from mtprover.models import LinearMTPModel
from mtprover.rover import ClipRecord, FusionResult, LongFormSample

MODEL_MAGIC = b"MTPROVER-MODEL\n"
MODEL_VERSION = 1


class FormatError(ValueError):
    """Malformed input; ``line`` is 1-based when the input is line-oriented."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.path = path
        self.line = line


class ModelVersionError(FormatError):
    pass


# -- models -----------------------------------------------------------------


def model_to_bytes(model: LinearMTPModel) -> bytes:
    blocks = [("E", model.E), ("F", model.F)]
    blocks += [(f"G{h}", g) for h, g in enumerate(model.G, start=1)]
    blocks.append(("U", model.U))
    header = {
        "vocab_size": model.vocab_size,
        "hidden_dim": model.hidden_dim,
        "num_branches": model.num_branches,
        "context_window": model.context_window,
        "dtype": "<f8",
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in blocks)
    return MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(head)) + head + payload


def model_from_bytes(data: bytes, path=None) -> LinearMTPModel:
    if not data.startswith(MODEL_MAGIC):
        raise FormatError("not a model file (bad magic)", path)
    pos = len(MODEL_MAGIC)
    if len(data) < pos + 8:
        raise FormatError(f"truncated model file: {len(data)} bytes, header incomplete", path)
    version, head_len = struct.unpack_from("<II", data, pos)
    if version != MODEL_VERSION:
        raise ModelVersionError(f"unsupported model format version {version} (this build reads {MODEL_VERSION})", path)
    pos += 8
    if len(data) < pos + head_len:
        raise FormatError(f"truncated model file: header needs {head_len} bytes", path)
    try:
        header = json.loads(data[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable model header: {exc}", path) from exc
    pos += head_len
    if header.get("dtype") != "<f8":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}", path)
    arrays = {}
    for block in header["blocks"]:
        shape = tuple(int(s) for s in block["shape"])
        nbytes = 8 * int(np.prod(shape))
        if len(data) < pos + nbytes:
            raise FormatError(
                f"truncated model file: block {block['name']} needs {nbytes} bytes, {len(data) - pos} remain", path
            )
        arrays[block["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"model file has {len(data) - pos} trailing bytes", path)
    H = int(header["num_branches"])
    try:
        G = [arrays[f"G{h}"] for h in range(1, H + 1)]
        return LinearMTPModel(arrays["E"], arrays["F"], tuple(G), arrays["U"], header["context_window"])
    except KeyError as exc:
        raise FormatError(f"model file lacks block {exc}", path) from exc


def save_model(model: LinearMTPModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> LinearMTPModel:
    return model_from_bytes(Path(path).read_bytes(), path)


# -- JSONL records ----------------------------------------------------------


def dumps_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def clip_to_dict(clip: ClipRecord) -> dict:
    d = {"clip_id": clip.clip_id, "start": clip.start, "end": clip.end, "hyps": list(clip.hyps)}
    if clip.lang is not None:
        d["lang"] = clip.lang
    return d


def clip_from_dict(d: dict) -> ClipRecord:
    if not isinstance(d, dict):
        raise ValueError("record is not a JSON object")
    missing = [k for k in ("clip_id", "start", "end", "hyps") if k not in d]
    if missing:
        raise ValueError(f"missing field(s): {', '.join(missing)}")
    hyps = d["hyps"]
    if not isinstance(hyps, list) or not all(isinstance(h, str) for h in hyps):
        raise ValueError("hyps must be an array of strings")
    return ClipRecord(str(d["clip_id"]), float(d["start"]), float(d["end"]), tuple(hyps), d.get("lang"))


def fusion_to_dict(r: FusionResult) -> dict:
    return {
        "clip_id": r.clip_id,
        "fused_tokens": list(r.fused_tokens),
        "disagreed_positions": r.disagreed_positions,
        "text_units": r.text_units,
        "e_hat": r.e_hat,
        "kept": r.kept,
        "verdict": r.verdict,
    }


def fusion_from_dict(d: dict) -> FusionResult:
    return FusionResult(
        tuple(d["fused_tokens"]),
        int(d["disagreed_positions"]),
        int(d["text_units"]),
        float(d["e_hat"]),
        bool(d["kept"]),
        d["verdict"],
        d.get("clip_id"),
    )


def sample_to_dict(s: LongFormSample) -> dict:
    return {
        "sample_id": s.sample_id,
        "clip_ids": list(s.clip_ids),
        "text": s.text,
        "duration": s.duration,
        "unrefined": s.unrefined,
    }


def sample_from_dict(d: dict) -> LongFormSample:
    return LongFormSample(d["sample_id"], tuple(d["clip_ids"]), d["text"], float(d["duration"]), bool(d["unrefined"]))


def iter_jsonl(lines: Iterable[str], path=None) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, object)`` for non-blank lines."""
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            yield n, json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", path, n) from exc


def read_clips(path) -> list[ClipRecord]:
    clips = []
    with open(path, encoding="utf-8") as fh:
        for n, obj in iter_jsonl(fh, path):
            try:
                clips.append(clip_from_dict(obj))
            except (ValueError, TypeError) as exc:
                raise FormatError(str(exc), path, n) from exc
    return clips


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_line(rec))
            fh.write("\n")


def read_jsonl(path, decode) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, obj in iter_jsonl(fh, path):
            try:
                out.append(decode(obj))
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(str(exc), path, n) from exc
    return out


# -- stats reports, token files ---------------------------------------------


def write_stats(path, stats: AcceptanceStats) -> None:
    Path(path).write_text(json.dumps(acceptance_summary(stats), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_stats(path) -> AcceptanceStats:
    try:
        return stats_from_summary(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad stats report: {exc}", path) from exc


def format_tokens(tokens: Iterable[int]) -> str:
    return " ".join(str(int(t)) for t in tokens) + "\n"


def parse_token_line(line: str, path=None, n: int | None = None) -> list[int]:
    try:
        return [int(t) for t in line.replace(",", " ").split()]
    except ValueError as exc:
        raise FormatError(f"expected integer token ids: {exc}", path, n) from exc


def read_corpus(path) -> list[list[int]]:
    """One token sequence per line, ids separated by spaces or commas."""
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                seqs.append(parse_token_line(line, path, n))
    return seqs


def write_corpus(path, seqs: Iterable[Iterable[int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(format_tokens(s))
