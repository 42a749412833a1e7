"""The semi-raw static feature record and its JSONL form."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

DATA_DIRECTORY_NAMES = (
    "EXPORT_TABLE",
    "IMPORT_TABLE",
    "RESOURCE_TABLE",
    "EXCEPTION_TABLE",
    "CERTIFICATE_TABLE",
    "BASE_RELOCATION_TABLE",
    "DEBUG",
    "ARCHITECTURE",
    "GLOBAL_PTR",
    "TLS_TABLE",
    "LOAD_CONFIG_TABLE",
    "BOUND_IMPORT",
    "IAT",
    "DELAY_IMPORT_DESCRIPTOR",
    "CLR_RUNTIME_HEADER",
)

GENERAL_FIELDS = (
    "size",
    "vsize",
    "has_debug",
    "exports",
    "imports",
    "has_relocations",
    "has_resources",
    "has_signature",
    "has_tls",
    "symbols",
)

VERSION_FIELDS = (
    "major_image_version",
    "minor_image_version",
    "major_linker_version",
    "minor_linker_version",
    "major_operating_system_version",
    "minor_operating_system_version",
    "major_subsystem_version",
    "minor_subsystem_version",
)

SIZE_FIELDS = ("sizeof_code", "sizeof_headers", "sizeof_heap_commit")

# groups a record must carry to be vectorized
FEATURE_GROUPS = (
    "histogram",
    "byteentropy",
    "strings",
    "general",
    "header",
    "sections",
    "imports",
    "exports",
    "datadirectories",
)

# EMBER spells a couple of fields differently
_ALIASES = {"section": "sections", "avclass": "avclass_family"}


@dataclass
class StringStats:
    numstrings: int = 0
    avlength: float = 0.0
    printabledist: list[int] = field(default_factory=lambda: [0] * 96)
    printables: int = 0
    entropy: float = 0.0
    paths: int = 0
    urls: int = 0
    registry: int = 0
    MZ: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class RawFeatureRecord:
    """Static features of one PE sample plus its identity and labels.

    Feature groups are kept in their JSON shape; a group set to ``None`` is
    missing from the source line.
    """

    sha256: str
    histogram: Optional[list[int]] = None
    byteentropy: Optional[list[int]] = None
    strings: Optional[dict[str, Any]] = None
    general: Optional[dict[str, Any]] = None
    header: Optional[dict[str, Any]] = None
    sections: Optional[dict[str, Any]] = None
    imports: Optional[dict[str, list[str]]] = None
    exports: Optional[list[str]] = None
    datadirectories: Optional[list[dict[str, Any]]] = None
    label: int = -1
    avclass_family: Optional[str] = None
    threat_type: Optional[str] = None
    behavior: Optional[str] = None

    def missing_groups(self) -> list[str]:
        return [g for g in FEATURE_GROUPS if getattr(self, g) is None]

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for key in ("avclass_family", "threat_type", "behavior"):
            if out[key] is None:
                del out[key]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "RawFeatureRecord":
        if not isinstance(obj, dict):
            raise ValueError("record must be a JSON object")
        data = {_ALIASES.get(k, k): v for k, v in obj.items()}
        sha = data.get("sha256")
        if not isinstance(sha, str) or not sha:
            raise ValueError("record has no sha256")
        label = data.get("label", -1)
        if label not in (-1, 0, 1):
            raise ValueError(f"bad label {label!r}")
        kwargs = {"sha256": sha.lower(), "label": int(label)}
        for name in FEATURE_GROUPS:
            if data.get(name) is not None:
                kwargs[name] = data[name]
        for name in ("avclass_family", "threat_type", "behavior"):
            value = data.get(name)
            if value:
                kwargs[name] = str(value)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, line: str) -> "RawFeatureRecord":
        return cls.from_dict(json.loads(line))
