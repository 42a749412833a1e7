"""Fixed-length vectorization of raw feature records.

The layout is versioned. Every index has a human-readable name, and block
names are the unit used for importance roll-ups.
"""
from __future__ import annotations

import csv
import struct
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .record import DATA_DIRECTORY_NAMES, GENERAL_FIELDS, SIZE_FIELDS, VERSION_FIELDS, RawFeatureRecord

LAYOUT_VERSION = 1
VOCAB_SIZE = 151
ENTROPY_WINDOW = 2048
ENTROPY_STRIDE = 1024

HASH_BINS = {
    "header.machine_hashed": 10,
    "header.characteristics_hashed": 10,
    "header.subsystem_hashed": 10,
    "header.dll_characteristics_hashed": 10,
    "header.magic_hashed": 10,
    "sections.size_hashed": 50,
    "sections.entropy_hashed": 50,
    "sections.vsize_hashed": 50,
    "sections.entry_name_hashed": 50,
    "sections.entry_props_hashed": 50,
    "imports.libraries_hashed": 128,
    "exports.hashed": 128,
}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class LayoutMismatch(ValueError):
    """A record or vector does not fit the active feature layout."""


class EmptyStream(ValueError):
    """No records were supplied where at least one is required."""


# -- counting primitives -----------------------------------------------------

def byte_counts(data: bytes) -> np.ndarray:
    if not data:
        return np.zeros(256, dtype=np.int64)
    return np.bincount(np.frombuffer(bytes(data), dtype=np.uint8), minlength=256).astype(np.int64)


def byte_entropy_counts(data: bytes, window: int = ENTROPY_WINDOW, stride: int = ENTROPY_STRIDE) -> np.ndarray:
    """Flattened 16x16 (entropy bin, byte >> 4) counts over sliding windows."""
    if window <= 0 or stride <= 0:
        raise ValueError("window and stride must be positive")
    if not data:
        return np.zeros(256, dtype=np.int64)
    return kernels.byte_entropy_counts(bytes(data), window, stride).ravel()


def _normalize(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    return counts / total if total > 0 else np.zeros_like(counts)


def byte_histogram(data: bytes) -> np.ndarray:
    return _normalize(byte_counts(data))


def byte_entropy_histogram(data: bytes, window: int = ENTROPY_WINDOW, stride: int = ENTROPY_STRIDE) -> np.ndarray:
    return _normalize(byte_entropy_counts(data, window, stride))


# -- hashing trick -------------------------------------------------------------

def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=65536)
def hash_bucket(name: str, bins: int) -> int:
    """FNV-1a 64 of the UTF-8 name, reduced modulo ``bins``.

    Stable across runs and platforms; trained models depend on it.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    return fnv1a64(name.encode("utf-8")) % bins


def hashed_pairs(pairs: Iterable[tuple[str, float]], bins: int) -> np.ndarray:
    out = np.zeros(bins, dtype=np.float64)
    for name, value in pairs:
        out[hash_bucket(name, bins)] += value
    return out


# -- import vocabulary -------------------------------------------------------

def import_keys(imports: dict[str, list[str]]) -> list[str]:
    return [f"{lib.lower()}.{fn.lower()}" for lib, fns in imports.items() for fn in fns]


def import_vocab_features(imports: dict[str, list[str]], vocabulary: Sequence[str]) -> np.ndarray:
    index = {name: i for i, name in enumerate(vocabulary)}
    out = np.zeros(len(vocabulary), dtype=np.float64)
    for key in import_keys(imports or {}):
        i = index.get(key)
        if i is not None:
            out[i] += 1.0
    return out


def build_import_vocabulary(records: Iterable[RawFeatureRecord], k: int = VOCAB_SIZE) -> list[str]:
    """The ``k`` imports with the highest document frequency.

    Ties go to the lexicographically smaller name. May return fewer than ``k``
    names when the stream has fewer distinct imports.
    """
    df: Counter[str] = Counter()
    seen = 0
    for rec in records:
        seen += 1
        df.update(set(import_keys(rec.imports or {})))
    if not seen:
        raise EmptyStream("cannot build an import vocabulary from an empty stream")
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))
    return [name for name, _ in ranked[:k]]


# -- layout ------------------------------------------------------------------

def _pad_vocabulary(vocab: Sequence[str], size: int) -> tuple[str, ...]:
    vocab = list(vocab)[:size]
    # placeholders contain no '.', so they never match a real import key
    vocab += [f"__unused{i}__" for i in range(len(vocab), size)]
    return tuple(vocab)


@dataclass(frozen=True)
class FeatureLayout:
    version: int
    blocks: tuple[tuple[str, int, tuple[str, ...]], ...]
    hash_bins: dict[str, int]
    import_vocabulary: tuple[str, ...]
    total_length: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total_length", sum(length for _, length, _ in self.blocks))
        names = [n for _, _, idx in self.blocks for n in idx]
        if len(names) != self.total_length or len(set(names)) != len(names):
            raise ValueError("layout index names must cover every index exactly once")
        if len(self.import_vocabulary) != VOCAB_SIZE or len(set(self.import_vocabulary)) != VOCAB_SIZE:
            raise ValueError(f"import vocabulary must hold {VOCAB_SIZE} unique entries")

    @classmethod
    def build(cls, vocabulary: Sequence[str] = ()) -> "FeatureLayout":
        vocab = _pad_vocabulary(vocabulary, VOCAB_SIZE)
        blocks: list[tuple[str, int, tuple[str, ...]]] = []

        def scalar(name):
            blocks.append((name, 1, (name,)))

        def array(name, n):
            blocks.append((name, n, tuple(f"{name}[{i}]" for i in range(n))))

        array("histogram", 256)
        array("byteentropy", 256)
        scalar("strings.numstrings")
        scalar("strings.avlength")
        array("strings.printabledist", 96)
        for name in ("printables", "entropy", "paths", "urls", "registry", "MZ"):
            scalar(f"strings.{name}")
        for name in GENERAL_FIELDS:
            scalar(f"general.{name}")
        scalar("header.timestamp")
        for name in ("machine", "characteristics", "subsystem", "dll_characteristics", "magic"):
            array(f"header.{name}_hashed", HASH_BINS[f"header.{name}_hashed"])
        for name in VERSION_FIELDS + SIZE_FIELDS:
            scalar(f"header.{name}")
        for name in ("count", "zero_size", "empty_name", "rx", "w"):
            scalar(f"sections.{name}")
        for name in ("size", "entropy", "vsize", "entry_name", "entry_props"):
            array(f"sections.{name}_hashed", HASH_BINS[f"sections.{name}_hashed"])
        array("imports.libraries_hashed", HASH_BINS["imports.libraries_hashed"])
        blocks.append(("imports.vocab", VOCAB_SIZE, tuple(f"imports.vocab[{v}]" for v in vocab)))
        array("exports.hashed", HASH_BINS["exports.hashed"])
        for name in DATA_DIRECTORY_NAMES:
            scalar(f"datadirectories.{name}.size")
            scalar(f"datadirectories.{name}.virtual_address")
        return cls(LAYOUT_VERSION, tuple(blocks), dict(HASH_BINS), vocab)

    def block_of_index(self) -> list[str]:
        return [name for name, length, _ in self.blocks for _ in range(length)]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "hash_bins": dict(self.hash_bins),
            "import_vocabulary": list(self.import_vocabulary),
            "total_length": self.total_length,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureLayout":
        if obj.get("version") != LAYOUT_VERSION:
            raise LayoutMismatch(f"unsupported layout version {obj.get('version')!r}")
        if obj.get("hash_bins") != HASH_BINS:
            raise LayoutMismatch("hash bin configuration differs from this build")
        layout = cls.build(obj["import_vocabulary"])
        if obj.get("total_length", layout.total_length) != layout.total_length:
            raise LayoutMismatch("stored total length disagrees with the rebuilt layout")
        return layout


def layout_manifest(layout: FeatureLayout) -> list[tuple[int, str]]:
    names = [n for _, _, idx in layout.blocks for n in idx]
    return list(enumerate(names))


def write_manifest_csv(layout: FeatureLayout, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "name"])
        w.writerows(layout_manifest(layout))


# -- vectorization -----------------------------------------------------------

@dataclass
class FeatureVector:
    values: np.ndarray
    layout_version: int = LAYOUT_VERSION


def _num(obj: dict, key: str) -> float:
    value = obj.get(key, 0)
    if isinstance(value, bool):
        return float(value)
    try:
        return float(value or 0)
    except (TypeError, ValueError):
        return 0.0


def _strings_block(s: dict) -> list[np.ndarray]:
    printables = _num(s, "printables")
    dist = np.asarray(s.get("printabledist") or [0] * 96, dtype=np.float64)
    if dist.shape != (96,):
        raise LayoutMismatch("strings.printabledist must have 96 entries")
    dist = dist / printables if printables > 0 else dist * 0.0
    return [
        np.array([_num(s, "numstrings"), _num(s, "avlength")]),
        dist,
        np.array([printables] + [_num(s, k) for k in ("entropy", "paths", "urls", "registry", "MZ")]),
    ]


def _header_block(hdr: dict) -> list[np.ndarray]:
    coff = hdr.get("coff") or {}
    opt = hdr.get("optional") or {}

    def one(value, bins):
        return hashed_pairs([(str(value), 1.0)], bins)

    def many(values, bins):
        return hashed_pairs([(str(v), 1.0) for v in values or []], bins)

    return [
        np.array([_num(coff, "timestamp")]),
        one(coff.get("machine", ""), 10),
        many(coff.get("characteristics"), 10),
        one(opt.get("subsystem", ""), 10),
        many(opt.get("dll_characteristics"), 10),
        one(opt.get("magic", ""), 10),
        np.array([_num(opt, k) for k in VERSION_FIELDS + SIZE_FIELDS]),
    ]


def _sections_block(sec: dict) -> list[np.ndarray]:
    sections = sec.get("sections") or []
    entry = sec.get("entry", "") or ""
    general = np.array(
        [
            len(sections),
            sum(1 for s in sections if _num(s, "size") == 0),
            sum(1 for s in sections if not s.get("name")),
            sum(1 for s in sections if "MEM_READ" in (s.get("props") or []) and "MEM_EXECUTE" in (s.get("props") or [])),
            sum(1 for s in sections if "MEM_WRITE" in (s.get("props") or [])),
        ],
        dtype=np.float64,
    )
    names = [str(s.get("name", "")) for s in sections]
    entry_props = next((s.get("props") or [] for s in sections if s.get("name") == entry), [])
    return [
        general,
        hashed_pairs([(n, _num(s, "size")) for n, s in zip(names, sections)], 50),
        hashed_pairs([(n, _num(s, "entropy")) for n, s in zip(names, sections)], 50),
        hashed_pairs([(n, _num(s, "vsize")) for n, s in zip(names, sections)], 50),
        hashed_pairs([(entry, 1.0)], 50),
        hashed_pairs([(str(p), 1.0) for p in entry_props], 50),
    ]


def _datadirectories_block(dirs: list) -> np.ndarray:
    by_name = {}
    for i, d in enumerate(dirs):
        if not isinstance(d, dict):
            continue
        name = d.get("name") or (DATA_DIRECTORY_NAMES[i] if i < len(DATA_DIRECTORY_NAMES) else None)
        by_name[name] = d
    out = []
    for name in DATA_DIRECTORY_NAMES:
        d = by_name.get(name, {})
        out += [_num(d, "size"), _num(d, "virtual_address")]
    return np.array(out)


def vectorize(record: RawFeatureRecord, layout: FeatureLayout) -> FeatureVector:
    """Map a raw record onto ``layout``."""
    missing = record.missing_groups()
    if missing:
        raise LayoutMismatch(f"record {record.sha256} lacks groups: {', '.join(missing)}")
    if len(record.histogram) != 256 or len(record.byteentropy) != 256:
        raise LayoutMismatch("histogram and byteentropy must have 256 entries")
    imports = record.imports or {}
    libs = sorted({lib.lower() for lib in imports})
    parts = [
        _normalize(record.histogram),
        _normalize(record.byteentropy),
        *_strings_block(record.strings),
        np.array([_num(record.general, k) for k in GENERAL_FIELDS]),
        *_header_block(record.header),
        *_sections_block(record.sections),
        hashed_pairs([(lib, 1.0) for lib in libs], 128),
        import_vocab_features(imports, layout.import_vocabulary),
        hashed_pairs([(str(e), 1.0) for e in record.exports], 128),
        _datadirectories_block(record.datadirectories),
    ]
    values = np.concatenate(parts).astype(np.float64)
    if values.shape[0] != layout.total_length:
        raise LayoutMismatch(f"vector length {values.shape[0]} != layout length {layout.total_length}")
    if not np.all(np.isfinite(values)):
        raise LayoutMismatch(f"record {record.sha256} produced non-finite features")
    return FeatureVector(values, layout.version)


def vectorize_many(records: Iterable[RawFeatureRecord], layout: FeatureLayout) -> np.ndarray:
    rows = [vectorize(r, layout).values for r in records]
    if not rows:
        return np.zeros((0, layout.total_length))
    return np.vstack(rows)


# -- feature matrix container --------------------------------------------------

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1


def write_fvec(path, matrix: np.ndarray) -> None:
    """Row-major float32 matrix with a small little-endian header."""
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(FVEC_MAGIC + struct.pack("<IQQ", FVEC_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_fvec(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(24)
        if len(head) < 24 or head[:4] != FVEC_MAGIC:
            raise ValueError(f"{path}: not an FVEC file")
        version, rows, cols = struct.unpack("<IQQ", head[4:])
        if version != FVEC_VERSION:
            raise ValueError(f"{path}: unsupported FVEC version {version}")
        body = fh.read()
    if len(body) != rows * cols * 4:
        raise ValueError(f"{path}: truncated FVEC payload")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
