"""Minimal, defensive PE parser and raw feature extraction.

Parsing never fails on a damaged file once the DOS magic and the PE signature
are found: every field that cannot be read keeps its default.
"""
from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .record import DATA_DIRECTORY_NAMES, RawFeatureRecord, StringStats
from . import vectorizer

__all__ = [
    "NotPE",
    "SectionInfo",
    "PEFileInfo",
    "parse_pe",
    "section_entropy",
    "scan_strings",
    "extract_record",
]

MACHINES = {
    0x0: "UNKNOWN",
    0x14C: "I386",
    0x166: "R4000",
    0x1C0: "ARM",
    0x1C2: "THUMB",
    0x1C4: "ARMNT",
    0x200: "IA64",
    0xEBC: "EBC",
    0x8664: "AMD64",
    0xAA64: "ARM64",
}

COFF_CHARACTERISTICS = (
    (0x0001, "RELOCS_STRIPPED"),
    (0x0002, "EXECUTABLE_IMAGE"),
    (0x0004, "LINE_NUMS_STRIPPED"),
    (0x0008, "LOCAL_SYMS_STRIPPED"),
    (0x0010, "AGGRESSIVE_WS_TRIM"),
    (0x0020, "LARGE_ADDRESS_AWARE"),
    (0x0080, "BYTES_REVERSED_LO"),
    (0x0100, "CHARA_32BIT_MACHINE"),
    (0x0200, "DEBUG_STRIPPED"),
    (0x0400, "REMOVABLE_RUN_FROM_SWAP"),
    (0x0800, "NET_RUN_FROM_SWAP"),
    (0x1000, "SYSTEM"),
    (0x2000, "DLL"),
    (0x4000, "UP_SYSTEM_ONLY"),
    (0x8000, "BYTES_REVERSED_HI"),
)

DLL_CHARACTERISTICS = (
    (0x0020, "HIGH_ENTROPY_VA"),
    (0x0040, "DYNAMIC_BASE"),
    (0x0080, "FORCE_INTEGRITY"),
    (0x0100, "NX_COMPAT"),
    (0x0200, "NO_ISOLATION"),
    (0x0400, "NO_SEH"),
    (0x0800, "NO_BIND"),
    (0x1000, "APPCONTAINER"),
    (0x2000, "WDM_DRIVER"),
    (0x4000, "GUARD_CF"),
    (0x8000, "TERMINAL_SERVER_AWARE"),
)

SUBSYSTEMS = {
    0: "UNKNOWN",
    1: "NATIVE",
    2: "WINDOWS_GUI",
    3: "WINDOWS_CUI",
    5: "OS2_CUI",
    7: "POSIX_CUI",
    8: "NATIVE_WINDOWS",
    9: "WINDOWS_CE_GUI",
    10: "EFI_APPLICATION",
    11: "EFI_BOOT_SERVICE_DRIVER",
    12: "EFI_RUNTIME_DRIVER",
    13: "EFI_ROM",
    14: "XBOX",
    16: "WINDOWS_BOOT_APPLICATION",
}

SECTION_CHARACTERISTICS = (
    (0x00000020, "CNT_CODE"),
    (0x00000040, "CNT_INITIALIZED_DATA"),
    (0x00000080, "CNT_UNINITIALIZED_DATA"),
    (0x00000200, "LNK_INFO"),
    (0x00000800, "LNK_REMOVE"),
    (0x00001000, "LNK_COMDAT"),
    (0x00008000, "GPREL"),
    (0x01000000, "LNK_NRELOC_OVFL"),
    (0x02000000, "MEM_DISCARDABLE"),
    (0x04000000, "MEM_NOT_CACHED"),
    (0x08000000, "MEM_NOT_PAGED"),
    (0x10000000, "MEM_SHARED"),
    (0x20000000, "MEM_EXECUTE"),
    (0x40000000, "MEM_READ"),
    (0x80000000, "MEM_WRITE"),
)

MAGIC_PE32 = 0x10B
MAGIC_PE32_PLUS = 0x20B

# caps against hostile tables
MAX_SECTIONS = 4096
MAX_IMPORT_DESCRIPTORS = 4096
MAX_THUNKS = 65536
MAX_EXPORT_NAMES = 65536
MAX_NAME_LEN = 512


class NotPE(ValueError):
    """Raised when the buffer lacks the DOS magic or the PE signature."""


@dataclass
class SectionInfo:
    name: str = ""
    size: int = 0
    vsize: int = 0
    entropy: float = 0.0
    properties: list[str] = field(default_factory=list)
    virtual_address: int = 0
    pointer_to_raw_data: int = 0


@dataclass
class PEFileInfo:
    coff_timestamp: int = 0
    machine: str = "UNKNOWN"
    characteristics: list[str] = field(default_factory=list)
    subsystem: str = "UNKNOWN"
    dll_characteristics: list[str] = field(default_factory=list)
    magic: str = ""
    image_version: tuple[int, int] = (0, 0)
    linker_version: tuple[int, int] = (0, 0)
    os_version: tuple[int, int] = (0, 0)
    subsystem_version: tuple[int, int] = (0, 0)
    sizeof_code: int = 0
    sizeof_headers: int = 0
    sizeof_heap_commit: int = 0
    entry_section: str = ""
    sections: list[SectionInfo] = field(default_factory=list)
    imports: dict[str, list[str]] = field(default_factory=dict)
    exports: list[str] = field(default_factory=list)
    data_directories: list[tuple[str, int, int]] = field(
        default_factory=lambda: [(n, 0, 0) for n in DATA_DIRECTORY_NAMES]
    )
    vsize: int = 0
    has_debug: bool = False
    has_tls: bool = False
    has_relocations: bool = False
    has_resources: bool = False
    has_signature: bool = False
    symbol_count: int = 0

    def directory(self, name: str) -> tuple[int, int]:
        """(virtual_address, size) of a named data directory."""
        for dname, va, size in self.data_directories:
            if dname == name:
                return va, size
        return 0, 0


class _Reader:
    """Bounds-checked little-endian reads; out-of-range reads yield 0."""

    def __init__(self, data: bytes):
        self.data = data
        self.n = len(data)

    def u8(self, off: int) -> int:
        return self.data[off] if 0 <= off < self.n else 0

    def u16(self, off: int) -> int:
        if 0 <= off and off + 2 <= self.n:
            return struct.unpack_from("<H", self.data, off)[0]
        return 0

    def u32(self, off: int) -> int:
        if 0 <= off and off + 4 <= self.n:
            return struct.unpack_from("<I", self.data, off)[0]
        return 0

    def u64(self, off: int) -> int:
        if 0 <= off and off + 8 <= self.n:
            return struct.unpack_from("<Q", self.data, off)[0]
        return 0

    def cstring(self, off: int, limit: int = MAX_NAME_LEN) -> str:
        if not 0 <= off < self.n:
            return ""
        end = self.data.find(b"\x00", off, min(self.n, off + limit))
        if end < 0:
            end = min(self.n, off + limit)
        return self.data[off:end].decode("latin-1")


def _flags(value: int, table) -> list[str]:
    return [name for bit, name in table if value & bit]


def section_entropy(data: bytes) -> float:
    """Shannon entropy in bits per byte; 0 for an empty buffer."""
    if not data:
        return 0.0
    counts = np.bincount(np.frombuffer(bytes(data), dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    return float(max(0.0, -(p * np.log2(p)).sum()))


_PRINTABLE_RUN = re.compile(rb"[\x20-\x7f]{5,}")


def scan_strings(data: bytes) -> StringStats:
    """Statistics over maximal runs of at least 5 printable characters."""
    data = bytes(data)
    runs = _PRINTABLE_RUN.findall(data)
    stats = StringStats(MZ=data.count(b"MZ"))
    if not runs:
        return stats
    dist = np.zeros(96, dtype=np.int64)
    for run in runs:
        dist += np.bincount(np.frombuffer(run, dtype=np.uint8) - 0x20, minlength=96)
    total = int(dist.sum())
    p = dist[dist > 0] / total
    stats.numstrings = len(runs)
    stats.avlength = total / len(runs)
    stats.printabledist = dist.tolist()
    stats.printables = total
    stats.entropy = float(max(0.0, -(p * np.log2(p)).sum()))
    stats.paths = sum(1 for r in runs if r[:3].lower() == b"c:\\")
    stats.urls = sum(1 for r in runs if b"http://" in r or b"https://" in r)
    stats.registry = sum(1 for r in runs if b"HKEY_" in r)
    return stats


def parse_pe(data: bytes) -> PEFileInfo:
    """Parse headers, sections, imports and exports from raw PE bytes."""
    data = bytes(data)
    if len(data) < 2 or data[:2] != b"MZ":
        raise NotPE("missing DOS magic")
    rd = _Reader(data)
    pe_off = rd.u32(0x3C)
    if len(data) < 0x40 or pe_off + 4 > len(data) or data[pe_off : pe_off + 4] != b"PE\x00\x00":
        raise NotPE("missing PE signature")

    info = PEFileInfo()
    coff = pe_off + 4
    info.machine = MACHINES.get(rd.u16(coff), "UNKNOWN")
    n_sections = min(rd.u16(coff + 2), MAX_SECTIONS)
    info.coff_timestamp = rd.u32(coff + 4)
    info.symbol_count = rd.u32(coff + 12)
    opt_size = rd.u16(coff + 16)
    info.characteristics = _flags(rd.u16(coff + 18), COFF_CHARACTERISTICS)

    opt = coff + 20
    magic = rd.u16(opt)
    plus = magic == MAGIC_PE32_PLUS
    info.magic = {MAGIC_PE32: "PE32", MAGIC_PE32_PLUS: "PE32+"}.get(magic, "")
    info.linker_version = (rd.u8(opt + 2), rd.u8(opt + 3))
    info.sizeof_code = rd.u32(opt + 4)
    entry_rva = rd.u32(opt + 16)
    section_alignment = rd.u32(opt + 32)
    info.os_version = (rd.u16(opt + 40), rd.u16(opt + 42))
    info.image_version = (rd.u16(opt + 44), rd.u16(opt + 46))
    info.subsystem_version = (rd.u16(opt + 48), rd.u16(opt + 50))
    info.sizeof_headers = rd.u32(opt + 60)
    info.subsystem = SUBSYSTEMS.get(rd.u16(opt + 68), "UNKNOWN")
    info.dll_characteristics = _flags(rd.u16(opt + 70), DLL_CHARACTERISTICS)
    if plus:
        info.sizeof_heap_commit = rd.u64(opt + 96)
        n_dirs, dirs_off = rd.u32(opt + 108), opt + 112
    else:
        info.sizeof_heap_commit = rd.u32(opt + 84)
        n_dirs, dirs_off = rd.u32(opt + 92), opt + 96
    # directories past the optional header belong to the section table
    n_dirs = min(n_dirs, len(DATA_DIRECTORY_NAMES), max(0, (opt + opt_size - dirs_off) // 8))
    info.data_directories = [
        (name, rd.u32(dirs_off + 8 * i), rd.u32(dirs_off + 8 * i + 4)) if i < n_dirs else (name, 0, 0)
        for i, name in enumerate(DATA_DIRECTORY_NAMES)
    ]

    sec_off = opt + opt_size
    for i in range(n_sections):
        off = sec_off + 40 * i
        if off + 40 > len(data):
            break
        raw_name = data[off : off + 8].split(b"\x00", 1)[0]
        vsize = rd.u32(off + 8)
        va = rd.u32(off + 12)
        size = rd.u32(off + 16)
        ptr = rd.u32(off + 20)
        chars = rd.u32(off + 36)
        body = data[ptr : ptr + size] if ptr < len(data) else b""
        info.sections.append(
            SectionInfo(
                name=raw_name.decode("latin-1"),
                size=size,
                vsize=vsize,
                entropy=section_entropy(body),
                properties=_flags(chars, SECTION_CHARACTERISTICS),
                virtual_address=va,
                pointer_to_raw_data=ptr,
            )
        )

    for s in info.sections:
        span = max(s.vsize, s.size)
        if s.virtual_address <= entry_rva < s.virtual_address + span:
            info.entry_section = s.name
            break

    align = section_alignment or 1
    info.vsize = sum(-(-s.vsize // align) * align for s in info.sections)

    _, dbg = info.directory("DEBUG")
    _, tls = info.directory("TLS_TABLE")
    _, reloc = info.directory("BASE_RELOCATION_TABLE")
    _, rsrc = info.directory("RESOURCE_TABLE")
    _, cert = info.directory("CERTIFICATE_TABLE")
    info.has_debug, info.has_tls = dbg > 0, tls > 0
    info.has_relocations, info.has_resources, info.has_signature = reloc > 0, rsrc > 0, cert > 0

    info.imports = _parse_imports(rd, info, plus)
    info.exports = _parse_exports(rd, info)
    return info


def _rva_to_offset(info: PEFileInfo, rva: int) -> int:
    for s in info.sections:
        span = max(s.vsize, s.size)
        if s.virtual_address <= rva < s.virtual_address + span:
            return rva - s.virtual_address + s.pointer_to_raw_data
    if rva < info.sizeof_headers:
        return rva
    return -1


def _parse_imports(rd: _Reader, info: PEFileInfo, plus: bool) -> dict[str, list[str]]:
    rva, size = info.directory("IMPORT_TABLE")
    imports: dict[str, list[str]] = {}
    if not rva or not size:
        return imports
    base = _rva_to_offset(info, rva)
    if base < 0:
        return imports
    thunk_size = 8 if plus else 4
    ordinal_bit = 1 << 63 if plus else 1 << 31
    read_thunk = rd.u64 if plus else rd.u32
    for i in range(MAX_IMPORT_DESCRIPTORS):
        desc = base + 20 * i
        if desc + 20 > rd.n:
            break
        lookup, name_rva, first_thunk = rd.u32(desc), rd.u32(desc + 12), rd.u32(desc + 16)
        if not (lookup or name_rva or first_thunk):
            break
        lib = rd.cstring(_rva_to_offset(info, name_rva)) if name_rva else ""
        funcs = imports.setdefault(lib, [])
        table = _rva_to_offset(info, lookup or first_thunk)
        if table < 0:
            continue
        for j in range(MAX_THUNKS):
            off = table + thunk_size * j
            if off + thunk_size > rd.n:
                break
            thunk = read_thunk(off)
            if thunk == 0:
                break
            if thunk & ordinal_bit:
                funcs.append(f"ordinal{thunk & 0xFFFF}")
            else:
                name_off = _rva_to_offset(info, thunk & 0x7FFFFFFF)
                if name_off < 0:
                    break
                funcs.append(rd.cstring(name_off + 2))
    return imports


def _parse_exports(rd: _Reader, info: PEFileInfo) -> list[str]:
    rva, size = info.directory("EXPORT_TABLE")
    if not rva or not size:
        return []
    base = _rva_to_offset(info, rva)
    if base < 0 or base + 40 > rd.n:
        return []
    count = min(rd.u32(base + 24), MAX_EXPORT_NAMES)
    names_off = _rva_to_offset(info, rd.u32(base + 32))
    if names_off < 0:
        return []
    names = []
    for i in range(count):
        off = names_off + 4 * i
        if off + 4 > rd.n:
            break
        name_off = _rva_to_offset(info, rd.u32(off))
        if name_off < 0:
            break
        names.append(rd.cstring(name_off))
    return names


def extract_record(info: PEFileInfo, data: bytes) -> RawFeatureRecord:
    """Assemble the nine feature groups for one parsed sample."""
    data = bytes(data)
    n_imports = sum(len(v) for v in info.imports.values())
    header = {
        "coff": {
            "timestamp": info.coff_timestamp,
            "machine": info.machine,
            "characteristics": list(info.characteristics),
        },
        "optional": {
            "subsystem": info.subsystem,
            "dll_characteristics": list(info.dll_characteristics),
            "magic": info.magic,
            "major_image_version": info.image_version[0],
            "minor_image_version": info.image_version[1],
            "major_linker_version": info.linker_version[0],
            "minor_linker_version": info.linker_version[1],
            "major_operating_system_version": info.os_version[0],
            "minor_operating_system_version": info.os_version[1],
            "major_subsystem_version": info.subsystem_version[0],
            "minor_subsystem_version": info.subsystem_version[1],
            "sizeof_code": info.sizeof_code,
            "sizeof_headers": info.sizeof_headers,
            "sizeof_heap_commit": info.sizeof_heap_commit,
        },
    }
    sections = {
        "entry": info.entry_section,
        "sections": [
            {"name": s.name, "size": s.size, "entropy": s.entropy, "vsize": s.vsize, "props": list(s.properties)}
            for s in info.sections
        ],
    }
    return RawFeatureRecord(
        sha256=hashlib.sha256(data).hexdigest(),
        histogram=vectorizer.byte_counts(data).tolist(),
        byteentropy=vectorizer.byte_entropy_counts(data).tolist(),
        strings=scan_strings(data).to_dict(),
        general={
            "size": len(data),
            "vsize": info.vsize,
            "has_debug": int(info.has_debug),
            "exports": len(info.exports),
            "imports": n_imports,
            "has_relocations": int(info.has_relocations),
            "has_resources": int(info.has_resources),
            "has_signature": int(info.has_signature),
            "has_tls": int(info.has_tls),
            "symbols": info.symbol_count,
        },
        header=header,
        sections=sections,
        imports={lib: list(funcs) for lib, funcs in info.imports.items()},
        exports=list(info.exports),
        datadirectories=[
            {"name": name, "size": size, "virtual_address": va} for name, va, size in info.data_directories
        ],
    )
