"""Synthetic labeled corpora with planted, learnable structure.

Records are produced directly in raw JSON shape, so they exercise the same
ingestion, vectorization and training path as real data. Each label level
owns its own signal:

* family: a tight per-family template (timestamp, sizes, directory
  addresses, byte profile) plus marker sections; tail-family samples and
  benign files draw all of these from the same broad distributions;
* threat type: subsystem, DLL characteristics and a few imports;
* behavior: a few imports and string statistics;
* detection: signing, debug info, relocations, exports and a writable code
  section, with a small share of malware built to look benign.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .record import DATA_DIRECTORY_NAMES, RawFeatureRecord

THREAT_TYPES = ("grayware", "virus", "downloader", "backdoor", "worm", "spyware")
FAMILIES = ("xtrat", "vtflooder", "sivis", "upatre", "zbot", "virut", "emotet", "gandcrab", "berbew", "ramnit")
BEHAVIORS = ("filemodify", "execdownload", "autorun", "inject", "keylog", "persist", "spam", "encrypt")

_COMMON_LIBS = ("kernel32.dll", "user32.dll", "advapi32.dll", "gdi32.dll", "msvcrt.dll", "shell32.dll", "ole32.dll")
# 100 common imports shared by everything
COMMON_IMPORTS = tuple((_COMMON_LIBS[i % len(_COMMON_LIBS)], f"Api{i:03d}") for i in range(100))

TYPE_IMPORTS = {
    t: tuple(("ntdll.dll" if k % 2 else "kernel32.dll", f"{t.capitalize()}Call{k}") for k in range(3))
    for t in THREAT_TYPES
}
BEHAVIOR_IMPORTS = {
    b: tuple(("ws2_32.dll" if k % 2 else "wininet.dll", f"{b.capitalize()}Op{k}") for k in range(3))
    for b in BEHAVIORS
}

_TYPE_HEADERS = {
    "grayware": ("WINDOWS_GUI", ["DYNAMIC_BASE", "NX_COMPAT", "TERMINAL_SERVER_AWARE"]),
    "virus": ("WINDOWS_GUI", []),
    "downloader": ("WINDOWS_CUI", ["NX_COMPAT"]),
    "backdoor": ("WINDOWS_GUI", ["DYNAMIC_BASE"]),
    "worm": ("WINDOWS_CUI", ["DYNAMIC_BASE", "NO_SEH"]),
    "spyware": ("NATIVE", ["HIGH_ENTROPY_VA", "GUARD_CF"]),
}

_BEHAVIOR_STRINGS = {
    "execdownload": ("urls", 12.0),
    "autorun": ("registry", 10.0),
    "persist": ("registry", 6.0),
    "spam": ("urls", 30.0),
    "filemodify": ("paths", 15.0),
    "encrypt": ("paths", 40.0),
    "keylog": ("MZ", 6.0),
    "inject": ("MZ", 12.0),
}

BENIGN_SECTIONS = (".text", ".rdata", ".data", ".rsrc", ".reloc")

TS_LOW, TS_HIGH = 1.0e9, 1.6e9


@dataclass
class SynthConfig:
    samples: int = 20000
    malware_fraction: float = 0.6
    families: int = len(FAMILIES)
    tail_families: int = 40
    tail_share: float = 0.12
    stealth_share: float = 0.02
    type_purity: float = 0.7
    behavior_purity: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.families <= len(FAMILIES):
            raise ValueError(f"families must be in [1, {len(FAMILIES)}]")
        if self.samples < 1:
            raise ValueError("samples must be positive")
        for name in ("malware_fraction", "tail_share", "stealth_share", "type_purity", "behavior_purity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


@dataclass
class _Template:
    timestamp: float
    size: float
    code: float
    headers: float
    heap: float
    rva_base: float
    profile: np.ndarray
    sections: tuple[str, ...]
    entropy: float
    main_type: str
    main_behavior: str


def _sha(seed: int, i: int) -> str:
    return hashlib.sha256(f"synth:{seed}:{i}".encode()).hexdigest()


def _name_seed(name: str) -> int:
    return int.from_bytes(hashlib.sha256(f"family:{name}".encode()).digest()[:8], "little")


def _profile(rng: np.random.Generator, sharpness: float) -> np.ndarray:
    p = rng.gamma(sharpness, size=256)
    p[0] += p.sum() * 0.3  # zero padding is common in every PE
    return p / p.sum()


def _template(rng, name: str, tight: bool) -> _Template:
    tag = name[:5]
    return _Template(
        timestamp=rng.uniform(TS_LOW, TS_HIGH),
        size=float(np.exp(rng.uniform(np.log(3e4), np.log(3e6)))),
        code=float(np.exp(rng.uniform(np.log(4e3), np.log(1e6)))),
        headers=float(rng.choice([512, 1024, 4096])),
        heap=float(rng.choice([4096, 8192, 65536])),
        rva_base=float(rng.integers(1, 4096) * 4096),
        profile=_profile(rng, rng.uniform(0.3, 3.0)),
        sections=(f".{tag}0", f".{tag}1", ".text") if tight else (".text", ".data"),
        entropy=float(rng.uniform(5.5, 7.9)),
        main_type=str(rng.choice(THREAT_TYPES)),
        main_behavior=str(rng.choice(BEHAVIORS)),
    )


def _family_sizes(rng, n_malware: int, cfg: SynthConfig) -> tuple[list[str], np.ndarray]:
    """Zipf-like counts for the kept families, small counts for the tail."""
    top = list(FAMILIES[: cfg.families])
    weights = 1.0 / np.arange(1, len(top) + 1) ** 0.5
    n_tail = int(round(n_malware * cfg.tail_share)) if cfg.tail_families else 0
    n_top = n_malware - n_tail
    top_counts = np.floor(weights / weights.sum() * n_top).astype(int)
    top_counts[0] += n_top - top_counts.sum()
    names = top + [f"tail{i:02d}" for i in range(cfg.tail_families)]
    if cfg.tail_families:
        # keep every tail family well below the smallest kept family
        cap = max(1, min(int(top_counts.min() * 0.5), n_tail))
        tail = rng.multinomial(n_tail, np.ones(cfg.tail_families) / cfg.tail_families)
        tail = np.minimum(tail, cap)
        top_counts[0] += n_tail - tail.sum()
        counts = np.concatenate([top_counts, tail])
    else:
        counts = top_counts
    return names, counts


def _jitter(rng, value: float, rel: float) -> float:
    return float(value * (1.0 + rel * rng.standard_normal()))


def _histograms(rng, size: int, profile: np.ndarray, entropy: float) -> tuple[list[int], list[int]]:
    n = int(max(size, 1024))
    hist = rng.multinomial(n, profile)
    # byte-entropy cells: mass concentrated near the file's entropy bin
    bins = np.arange(16)
    h = min(int(entropy * 2), 15)
    weight_h = np.exp(-0.5 * ((bins - h) / 1.5) ** 2)
    weight_b = profile.reshape(16, 16).sum(axis=1)
    cells = np.outer(weight_h, weight_b).ravel()
    be = rng.multinomial(n, cells / cells.sum())
    return hist.tolist(), be.tolist()


def _strings(rng, size: int, profile: np.ndarray, extra: Optional[tuple[str, float]], benign: bool) -> dict:
    printables = int(size * rng.uniform(0.05, 0.2))
    dist = rng.multinomial(printables, profile[0x20:0x80] / profile[0x20:0x80].sum()) if printables else np.zeros(96)
    p = dist[dist > 0] / max(dist.sum(), 1)
    numstrings = max(1, printables // int(rng.integers(8, 30)))
    out = {
        "numstrings": int(numstrings),
        "avlength": float(printables / numstrings),
        "printabledist": [int(v) for v in dist],
        "printables": int(printables),
        "entropy": float(-(p * np.log2(p)).sum()) if len(p) else 0.0,
        "paths": int(rng.poisson(2)),
        "urls": int(rng.poisson(1)),
        "registry": int(rng.poisson(1)),
        "MZ": int(rng.poisson(2)),
    }
    if extra is not None:
        key, mean = extra
        out[key] += int(rng.poisson(mean))
    return out


def _imports(rng, benign: bool, specific: list[tuple[str, str]]) -> dict[str, list[str]]:
    k = int(rng.integers(10, 60))
    picks = rng.choice(len(COMMON_IMPORTS), size=k, replace=False)
    pairs = [COMMON_IMPORTS[i] for i in sorted(picks)] + specific
    out: dict[str, list[str]] = {}
    for lib, fn in pairs:
        if fn not in out.setdefault(lib, []):
            out[lib].append(fn)
    return out


def _record(rng, sha: str, label: int, tpl: _Template, tight: bool, threat: Optional[str],
            behavior: Optional[str], looks_benign: bool) -> RawFeatureRecord:
    rel = 0.01 if tight else 0.0
    size = int(max(2048, _jitter(rng, tpl.size, rel)))
    entropy = min(7.99, max(0.5, rng.normal(tpl.entropy, 0.1) if tight else rng.uniform(4.5, 7.99)))
    hist, be = _histograms(rng, size, tpl.profile, entropy)

    specific: list[tuple[str, str]] = []
    if threat is not None:
        specific += [imp for imp in TYPE_IMPORTS[threat] if rng.random() < 0.9]
    if behavior is not None:
        specific += [imp for imp in BEHAVIOR_IMPORTS[behavior] if rng.random() < 0.85]
    imports = _imports(rng, looks_benign, specific)

    if threat is not None:
        subsystem, dll_chars = _TYPE_HEADERS[threat]
    else:
        subsystem = str(rng.choice(["WINDOWS_GUI", "WINDOWS_CUI"]))
        dll_chars = [f for f in ("DYNAMIC_BASE", "NX_COMPAT", "HIGH_ENTROPY_VA", "TERMINAL_SERVER_AWARE")
                     if rng.random() < 0.7]

    names = list(tpl.sections) if tight else list(BENIGN_SECTIONS[: int(rng.integers(3, 6))])
    sections = []
    for j, name in enumerate(names):
        ent = entropy if j == 0 else float(rng.uniform(1.0, 5.0))
        sec_size = int(max(0, _jitter(rng, tpl.code if j == 0 else tpl.code * 0.25, max(rel, 0.05))))
        props = ["CNT_CODE", "MEM_EXECUTE", "MEM_READ"] if j == 0 else ["CNT_INITIALIZED_DATA", "MEM_READ"]
        if not looks_benign and j == 0:
            props.append("MEM_WRITE")
        sections.append({"name": name, "size": sec_size, "entropy": ent,
                         "vsize": int(sec_size * rng.uniform(1.0, 1.3)), "props": props})

    has_sig = int(looks_benign and rng.random() < 0.7)
    has_debug = int(looks_benign and rng.random() < 0.8)
    n_imports = sum(len(v) for v in imports.values())
    n_exports = int(rng.integers(0, 5)) if looks_benign else 0
    exports = [f"Export{int(rng.integers(0, 50))}" for _ in range(n_exports)]
    general = {
        "size": size, "vsize": int(size * rng.uniform(1.0, 1.5)), "has_debug": has_debug, "exports": n_exports,
        "imports": n_imports, "has_relocations": int(looks_benign), "has_resources": int(rng.random() < 0.8),
        "has_signature": has_sig, "has_tls": int(rng.random() < 0.1), "symbols": 0,
    }
    ts = rng.normal(tpl.timestamp, 2e5) if tight else rng.uniform(TS_LOW, TS_HIGH)
    header = {
        "coff": {"timestamp": int(ts), "machine": "I386", "characteristics": ["EXECUTABLE_IMAGE", "CHARA_32BIT_MACHINE"]},
        "optional": {
            "subsystem": subsystem, "dll_characteristics": list(dll_chars), "magic": "PE32",
            "major_image_version": int(rng.integers(0, 3)), "minor_image_version": 0,
            "major_linker_version": int(rng.choice([9, 10, 14])), "minor_linker_version": 0,
            "major_operating_system_version": 5, "minor_operating_system_version": 1,
            "major_subsystem_version": 5, "minor_subsystem_version": 1,
            "sizeof_code": int(_jitter(rng, tpl.code, rel)), "sizeof_headers": int(tpl.headers),
            "sizeof_heap_commit": int(tpl.heap),
        },
    }
    base = tpl.rva_base if tight else float(rng.integers(1, 4096) * 4096)
    dirs = []
    for k, name in enumerate(DATA_DIRECTORY_NAMES):
        present = name in ("IMPORT_TABLE", "IAT", "RESOURCE_TABLE") or (name == "DEBUG" and has_debug) or (
            name == "CERTIFICATE_TABLE" and has_sig) or (name == "EXPORT_TABLE" and n_exports)
        dirs.append({"name": name, "size": int(rng.integers(64, 4096)) if present else 0,
                     "virtual_address": int(base + 4096 * k) if present else 0})
    return RawFeatureRecord(
        sha256=sha,
        histogram=hist,
        byteentropy=be,
        strings=_strings(rng, size, tpl.profile, _BEHAVIOR_STRINGS.get(behavior) if behavior else None, looks_benign),
        general=general,
        header=header,
        sections={"entry": names[0], "sections": sections},
        imports=imports,
        exports=exports,
        datadirectories=dirs,
        label=label,
    )


@dataclass
class SyntheticCorpus:
    records: list[RawFeatureRecord]
    taxonomy: dict[str, tuple[str, str, str]]  # sha256 -> (type, family, behavior)

    def embedded(self) -> list[RawFeatureRecord]:
        """Copies of the records with their taxonomy stored inline."""
        out = []
        for r in self.records:
            tt, fam, beh = self.taxonomy.get(r.sha256, ("", "", ""))
            d = r.to_dict()
            d.update({"threat_type": tt or None, "avclass_family": fam or None, "behavior": beh or None})
            out.append(RawFeatureRecord.from_dict(d))
        return out


def generate(cfg: Optional[SynthConfig] = None) -> SyntheticCorpus:
    """Build a corpus; identical configs give identical corpora."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    n_mal = int(round(cfg.samples * cfg.malware_fraction))
    n_ben = cfg.samples - n_mal
    names, counts = _family_sizes(rng, n_mal, cfg)
    # head families look the same in every corpus, so held-out corpora from
    # other seeds share their fingerprints; tail templates are per-sample
    templates = {name: _template(np.random.default_rng(_name_seed(name)), name, True) for name in names[: cfg.families]}

    plan: list[tuple[int, Optional[str]]] = [(0, None)] * n_ben
    for name, c in zip(names, counts):
        plan += [(1, name)] * int(c)
    order = rng.permutation(len(plan))

    records, taxonomy = [], {}
    for i, j in enumerate(order):
        label, fam = plan[j]
        sha = _sha(cfg.seed, i)
        if label == 0:
            tpl = _template(rng, "benign", False)
            records.append(_record(rng, sha, 0, tpl, False, None, None, True))
            continue
        tight = not fam.startswith("tail")
        # tail families share nothing but the label: a fresh broad template each
        tpl = templates[fam] if tight else _template(rng, fam, False)
        threat = tpl.main_type if rng.random() < cfg.type_purity else str(rng.choice(THREAT_TYPES))
        behavior = tpl.main_behavior if rng.random() < cfg.behavior_purity else str(rng.choice(BEHAVIORS))
        if rng.random() < cfg.stealth_share:
            # looks benign in every respect; only the label says otherwise
            rec = _record(rng, sha, 1, _template(rng, "benign", False), False, None, None, True)
        else:
            rec = _record(rng, sha, 1, tpl, tight, threat, behavior, False)
        records.append(rec)
        taxonomy[sha] = (threat, fam, behavior)
    return SyntheticCorpus(records, taxonomy)
