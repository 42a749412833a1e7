"""EMBER-style JSONL ingestion, taxonomy sidecars, family grouping and splits."""
from __future__ import annotations

import csv
import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional

import numpy as np

from .record import RawFeatureRecord

log = logging.getLogger(__name__)

OTHER = "other"
BENIGN = "benign"
TAXONOMY_FIELDS = ("threat_type", "family", "behavior")

_SHA256 = re.compile(r"^[0-9a-f]{64}$")


class NoFamilies(ValueError):
    """No malicious sample carries a family label."""


@dataclass(frozen=True)
class Labels:
    malware: int
    threat_type: Optional[str] = None
    family: Optional[str] = None
    behavior: Optional[str] = None


@dataclass
class LabeledSample:
    record: RawFeatureRecord
    labels: Labels
    vector: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def sha256(self) -> str:
        return self.record.sha256


class RecordStream:
    """Iterates the records of a JSONL file, skipping lines that fail to parse.

    ``skipped`` holds the number of rejected lines once iteration is done.
    """

    def __init__(self, path):
        self.path = path
        self.skipped = 0
        self.read = 0

    def __iter__(self) -> Iterator[RawFeatureRecord]:
        self.skipped = self.read = 0
        with open(self.path, "r", encoding="utf-8", errors="replace") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = RawFeatureRecord.from_json(line)
                except (ValueError, TypeError, KeyError) as exc:
                    self.skipped += 1
                    log.debug("%s:%d skipped: %s", self.path, lineno, exc)
                    continue
                self.read += 1
                yield rec


def read_jsonl(path) -> RecordStream:
    return RecordStream(path)


def write_jsonl(records: Iterable[RawFeatureRecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
            n += 1
    return n


# -- taxonomy sidecar ------------------------------------------------------------

def read_sidecar(path) -> dict[str, tuple[str, str, str]]:
    """``sha256<TAB>type<TAB>family<TAB>behavior`` rows; empty column = absent."""
    out: dict[str, tuple[str, str, str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            key = cols[0].strip().lower()
            if not _SHA256.match(key):
                log.warning("%s:%d: not a sha256 key, row ignored", path, lineno)
                continue
            cols = (cols[1:] + ["", "", ""])[:3]
            out[key] = tuple(c.strip() for c in cols)
    return out


def write_sidecar(rows: dict[str, tuple[str, str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sha in sorted(rows):
            fh.write("\t".join((sha, *rows[sha])) + "\n")


@dataclass
class AttachStats:
    dropped_unlabeled: int = 0
    missing_taxonomy: int = 0
    attached: int = 0


def attach_taxonomy(records: Iterable[RawFeatureRecord], sidecar: Optional[dict], stats: Optional[AttachStats] = None
                    ) -> Iterator[LabeledSample]:
    """Join records with taxonomy labels by sha256.

    Benign records never receive taxonomy; unlabeled (-1) records are dropped.
    Without a sidecar, the labels embedded in the records are used.
    """
    stats = stats if stats is not None else AttachStats()
    for rec in records:
        if rec.label == -1:
            stats.dropped_unlabeled += 1
            continue
        if rec.label == 0:
            yield LabeledSample(rec, Labels(0))
            continue
        if sidecar is None:
            tt, fam, beh = rec.threat_type or "", rec.avclass_family or "", rec.behavior or ""
            found = bool(tt or fam or beh)
        else:
            found = rec.sha256 in sidecar
            tt, fam, beh = sidecar.get(rec.sha256, ("", "", ""))
        if not found:
            stats.missing_taxonomy += 1
        else:
            stats.attached += 1
        yield LabeledSample(rec, Labels(1, tt or None, fam or None, beh or None))


# -- family grouping -------------------------------------------------------------

def group_families(samples: Iterable[LabeledSample], k: int = 20) -> tuple[list[str], list[LabeledSample]]:
    """Keep the ``k`` most frequent families; relabel the rest as ``other``.

    Frequencies are counted over malicious samples; ties go to the
    lexicographically smaller name. The returned vocabulary is the kept
    families followed by ``other``.
    """
    samples = list(samples)
    counts = Counter(
        s.labels.family for s in samples if s.labels.malware == 1 and s.labels.family and s.labels.family != OTHER
    )
    if not counts and not any(s.labels.malware == 1 and s.labels.family for s in samples):
        raise NoFamilies("no malicious sample has a family label")
    kept = [name for name, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]
    vocab = kept + [OTHER]
    return vocab, apply_family_vocabulary(samples, vocab)


def apply_family_vocabulary(samples: Iterable[LabeledSample], vocab: list[str]) -> list[LabeledSample]:
    keep = set(vocab)
    out = []
    for s in samples:
        if s.labels.malware == 1:
            fam = s.labels.family if s.labels.family in keep else OTHER
            if fam != s.labels.family:
                s = replace(s, labels=replace(s.labels, family=fam))
        out.append(s)
    return out


# -- splitting -------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    validation_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")


def split_key(sha256: str, seed: int) -> float:
    """Uniform value in [0, 1) derived from (sha256, seed)."""
    digest = hashlib.sha256(f"{sha256}:{seed & 0xFFFFFFFFFFFFFFFF}".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2.0**64


def is_validation(sha256: str, spec: SplitSpec) -> bool:
    return split_key(sha256, spec.seed) < spec.validation_fraction


def split(samples: Iterable[LabeledSample], spec: SplitSpec) -> tuple[list[LabeledSample], list[LabeledSample]]:
    train, val = [], []
    for s in samples:
        (val if is_validation(s.sha256, spec) else train).append(s)
    return train, val


def class_frequencies(samples: Iterable[LabeledSample], field_name: str) -> list[tuple[str, int]]:
    if field_name not in TAXONOMY_FIELDS:
        raise ValueError(f"field must be one of {TAXONOMY_FIELDS}")
    counts = Counter(getattr(s.labels, field_name) for s in samples)
    counts.pop(None, None)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def write_frequencies_csv(freqs: list[tuple[str, int]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "count"])
        w.writerows(freqs)
