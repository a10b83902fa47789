"""Fill masked instances with candidate tokens and write sorted logits records.

Input and output are the detector's JSONL wire formats: masked instances
({"id", "tokens", "mask_index"}, with tokens[mask_index] == "[MASK]"; an
optional "original" field carries the masked-out surface) and logits records
({"id", "candidates": [{"token", "logit"}, ...]} sorted by logit descending
with unique surfaces, the original trigger removed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Protocol

MASK_TOKEN = "[MASK]"


class SchemaError(ValueError):
    """A masked-instances or logits record violates its schema."""


@dataclass(frozen=True)
class MaskedRecord:
    id: str
    tokens: tuple[str, ...]
    mask_index: int
    original: tuple[str, ...]


@dataclass(frozen=True)
class ExportJob:
    input_path: str
    model: str
    top_n: int
    output_path: str

    def __post_init__(self) -> None:
        if self.top_n < 1:
            raise SchemaError("top_n must be >= 1")


class MaskFiller(Protocol):
    def candidates(self, record: MaskedRecord, top_n: int) -> list[tuple[str, float]]:
        """(token, logit) pairs, highest logit first."""


def read_masked_instances(path) -> list[MaskedRecord]:
    records = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                record = MaskedRecord(
                    id=str(payload["id"]),
                    tokens=tuple(payload["tokens"]),
                    mask_index=int(payload["mask_index"]),
                    original=tuple(payload.get("original", ())),
                )
            except (KeyError, TypeError) as exc:
                raise SchemaError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if not 0 <= record.mask_index < len(record.tokens):
                raise SchemaError(f"{path}:{lineno}: mask_index out of range")
            if record.tokens[record.mask_index] != MASK_TOKEN:
                raise SchemaError(
                    f"{path}:{lineno}: tokens[mask_index] must be the literal {MASK_TOKEN}"
                )
            if record.id in seen:
                raise SchemaError(f"{path}:{lineno}: duplicate id {record.id!r}")
            seen.add(record.id)
            records.append(record)
    return records


class HashFiller:
    """Offline deterministic stand-in for a masked language model.

    The candidate vocabulary is every non-mask token seen in the input file;
    a token's logit is a stable hash of (window around the mask, token), so
    output is byte-identical across runs and platforms.
    """

    def __init__(self, records: Iterable[MaskedRecord], window: int = 2):
        vocabulary = set()
        for record in records:
            for token in record.tokens:
                if token != MASK_TOKEN:
                    vocabulary.add(token)
        self.vocabulary = sorted(vocabulary)
        self.window = window

    def candidates(self, record: MaskedRecord, top_n: int) -> list[tuple[str, float]]:
        i = record.mask_index
        lo = max(0, i - self.window)
        hi = min(len(record.tokens), i + self.window + 1)
        context = " ".join(record.tokens[lo:i] + ("_",) + record.tokens[i + 1 : hi])
        scored = []
        for token in self.vocabulary:
            digest = hashlib.sha256(f"{context}|{token}".encode()).digest()
            logit = int.from_bytes(digest[:4], "big") / 2**28
            scored.append((token, logit))
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        return scored[:top_n]


def _transformers_filler(model_name: str):
    try:
        import torch
        from transformers import AutoModelForMaskedLM, AutoTokenizer
    except ImportError as exc:
        raise SchemaError(
            f"model load failure: transformers backend unavailable ({exc})"
        ) from exc

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_name)
        model = AutoModelForMaskedLM.from_pretrained(model_name)
    except Exception as exc:
        raise SchemaError(f"model load failure: {model_name!r} ({exc})") from exc
    model.eval()

    class TransformersFiller:
        def candidates(self, record: MaskedRecord, top_n: int):
            text = " ".join(
                tokenizer.mask_token if t == MASK_TOKEN else t for t in record.tokens
            )
            encoded = tokenizer(text, return_tensors="pt", truncation=True)
            with torch.no_grad():
                logits = model(**encoded).logits[0]
            mask_positions = (
                encoded["input_ids"][0] == tokenizer.mask_token_id
            ).nonzero(as_tuple=True)[0]
            row = logits[mask_positions[0]]
            scored = []
            for token_id in row.argsort(descending=True).tolist():
                token = tokenizer.convert_ids_to_tokens(token_id)
                word = tokenizer.convert_tokens_to_string([token]).strip()
                # single whole-word pieces only
                if not word or " " in word or word != word.strip("#"):
                    continue
                scored.append((word, float(row[token_id])))
                if len(scored) >= top_n * 3:
                    break
            scored.sort(key=lambda pair: (-pair[1], pair[0]))
            return scored[:top_n]

    return TransformersFiller()


def make_filler(model: str, records: list[MaskedRecord]) -> MaskFiller:
    if model == "hash":
        return HashFiller(records)
    return _transformers_filler(model)


def export_logits(job: ExportJob) -> int:
    """Write one sorted logits record per input record; returns the count."""
    records = read_masked_instances(job.input_path)
    filler = make_filler(job.model, records)
    written = 0
    with open(job.output_path, "w", encoding="utf-8") as fh:
        for record in records:
            pairs = filler.candidates(record, job.top_n + len(record.original))
            forbidden = set(record.original)
            if len(record.original) == 1:
                forbidden.add(record.original[0])
            kept = [
                {"token": token, "logit": logit}
                for token, logit in pairs
                if token not in forbidden
            ][: job.top_n]
            fh.write(json.dumps({"id": record.id, "candidates": kept}) + "\n")
            written += 1
    return written


@dataclass
class ValidationReport:
    records: int = 0
    sort_violations: int = 0
    duplicate_surfaces: int = 0
    parse_errors: int = 0

    @property
    def ok(self) -> bool:
        return (
            self.parse_errors == 0
            and self.sort_violations == 0
            and self.duplicate_surfaces == 0
        )


def validate(path) -> ValidationReport:
    """Lint a logits file: record count, sort order, duplicate surfaces."""
    report = ValidationReport()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                candidates = payload["candidates"]
                logits = [float(c["logit"]) for c in candidates]
                tokens = [str(c["token"]) for c in candidates]
                str(payload["id"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                report.parse_errors += 1
                continue
            report.records += 1
            if any(a < b for a, b in zip(logits, logits[1:])):
                report.sort_violations += 1
            if len(set(tokens)) != len(tokens):
                report.duplicate_surfaces += 1
    return report
