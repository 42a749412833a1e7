"""Builds small synthetic PE images with known contents.

Used by the test-suite and the demo corpus; the output parses with
:func:`malpipe.pe_parser.parse_pe` and with ordinary PE tooling.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .record import DATA_DIRECTORY_NAMES

IMAGE_SCN_CNT_CODE = 0x00000020
IMAGE_SCN_CNT_INITIALIZED_DATA = 0x00000040
IMAGE_SCN_MEM_EXECUTE = 0x20000000
IMAGE_SCN_MEM_READ = 0x40000000
IMAGE_SCN_MEM_WRITE = 0x80000000

CODE = IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ
DATA = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ | IMAGE_SCN_MEM_WRITE
RDATA = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ


def _align(value: int, alignment: int) -> int:
    return -(-value // alignment) * alignment


@dataclass
class SectionSpec:
    name: str
    data: bytes = b""
    vsize: Optional[int] = None
    characteristics: int = DATA


@dataclass
class PESpec:
    sections: list[SectionSpec] = field(default_factory=list)
    imports: dict[str, list[str]] = field(default_factory=dict)
    exports: list[str] = field(default_factory=list)
    machine: int = 0x14C
    timestamp: int = 0x5F000000
    characteristics: int = 0x0102
    pe32_plus: bool = False
    subsystem: int = 2
    dll_characteristics: int = 0x8140
    linker_version: tuple[int, int] = (14, 0)
    os_version: tuple[int, int] = (6, 0)
    image_version: tuple[int, int] = (0, 0)
    subsystem_version: tuple[int, int] = (6, 0)
    sizeof_heap_commit: int = 0x1000
    entry_section: int = 0
    entry_offset: int = 0
    symbol_count: int = 0
    file_alignment: int = 0x200
    section_alignment: int = 0x1000
    # extra (va, size) overrides for the flag-style directories
    directories: dict[str, tuple[int, int]] = field(default_factory=dict)


def _import_blob(imports: dict[str, list[str]], base_rva: int, plus: bool) -> bytes:
    thunk = 8 if plus else 4
    libs = list(imports)
    desc_size = 20 * (len(libs) + 1)
    tables_size = sum(thunk * (len(imports[lib]) + 1) for lib in libs)
    # layout: descriptors | lookup tables | address tables | hint/name + dll names
    lookup_off = desc_size
    iat_off = lookup_off + tables_size
    names_off = iat_off + tables_size
    names = bytearray()
    name_rvas: dict[tuple[str, str], int] = {}
    lib_rvas: dict[str, int] = {}
    for lib in libs:
        for fn in imports[lib]:
            name_rvas[(lib, fn)] = base_rva + names_off + len(names)
            entry = struct.pack("<H", 0) + fn.encode("latin-1") + b"\x00"
            if len(entry) % 2:
                entry += b"\x00"
            names += entry
        lib_rvas[lib] = base_rva + names_off + len(names)
        names += lib.encode("latin-1") + b"\x00"
    out = bytearray(names_off) + names
    fmt = "<Q" if plus else "<I"
    cursor = 0
    for i, lib in enumerate(libs):
        lt = lookup_off + cursor
        at = iat_off + cursor
        struct.pack_into("<IIIII", out, 20 * i, base_rva + lt, 0, 0, lib_rvas[lib], base_rva + at)
        for j, fn in enumerate(imports[lib]):
            struct.pack_into(fmt, out, lt + thunk * j, name_rvas[(lib, fn)])
            struct.pack_into(fmt, out, at + thunk * j, name_rvas[(lib, fn)])
        cursor += thunk * (len(imports[lib]) + 1)
    return bytes(out)


def _export_blob(names: list[str], base_rva: int) -> bytes:
    n = len(names)
    funcs_off = 40
    names_tbl = funcs_off + 4 * n
    ords_off = names_tbl + 4 * n
    strings_off = ords_off + 2 * n
    strings = bytearray(b"synthetic.dll\x00")
    out = bytearray(strings_off)
    name_rvas = []
    for fn in names:
        name_rvas.append(base_rva + strings_off + len(strings))
        strings += fn.encode("latin-1") + b"\x00"
    struct.pack_into(
        "<IIHHIIIIIII", out, 0,
        0, 0, 0, 0, base_rva + strings_off, 1, n, n,
        base_rva + funcs_off, base_rva + names_tbl, base_rva + ords_off,
    )
    for i in range(n):
        struct.pack_into("<I", out, funcs_off + 4 * i, 0x1000)
        struct.pack_into("<I", out, names_tbl + 4 * i, name_rvas[i])
        struct.pack_into("<H", out, ords_off + 2 * i, i)
    return bytes(out + strings)


def build_pe(spec: PESpec) -> bytes:
    """Serialize ``spec`` into a PE image."""
    plus = spec.pe32_plus
    sections = list(spec.sections)
    opt_size = 240 if plus else 224
    n_sections = len(sections) + bool(spec.imports) + bool(spec.exports)
    headers_len = 0x40 + 4 + 20 + opt_size + 40 * n_sections
    sizeof_headers = _align(headers_len, spec.file_alignment)

    va = spec.section_alignment
    layout = []  # (name, data, vsize, chars, va)
    for s in sections:
        vsize = len(s.data) if s.vsize is None else s.vsize
        layout.append([s.name, s.data, vsize, s.characteristics, va])
        va += _align(max(vsize, len(s.data), 1), spec.section_alignment)
    dirs = {name: (0, 0) for name in DATA_DIRECTORY_NAMES}
    if spec.imports:
        blob = _import_blob(spec.imports, va, plus)
        layout.append([".idata", blob, len(blob), RDATA, va])
        dirs["IMPORT_TABLE"] = (va, 20 * (len(spec.imports) + 1))
        va += _align(len(blob), spec.section_alignment)
    if spec.exports:
        blob = _export_blob(spec.exports, va)
        layout.append([".edata", blob, len(blob), RDATA, va])
        dirs["EXPORT_TABLE"] = (va, len(blob))
        va += _align(len(blob), spec.section_alignment)
    dirs.update(spec.directories)
    size_of_image = va

    raw_ptr = sizeof_headers
    raw_ptrs = []
    for entry in layout:
        raw_ptrs.append(raw_ptr)
        raw_ptr += _align(len(entry[1]), spec.file_alignment)

    out = bytearray(raw_ptr)
    out[0:2] = b"MZ"
    struct.pack_into("<I", out, 0x3C, 0x40)
    out[0x40:0x44] = b"PE\x00\x00"
    coff = 0x44
    struct.pack_into(
        "<HHIIIHH", out, coff,
        spec.machine, n_sections, spec.timestamp, 0, spec.symbol_count, opt_size, spec.characteristics,
    )
    opt = coff + 20
    code_size = sum(_align(len(e[1]), spec.file_alignment) for e in layout if e[3] & IMAGE_SCN_CNT_CODE)
    entry_rva = layout[spec.entry_section][4] + spec.entry_offset if sections else 0
    struct.pack_into("<HBBI", out, opt, 0x20B if plus else 0x10B, *spec.linker_version, code_size)
    struct.pack_into("<I", out, opt + 16, entry_rva)
    struct.pack_into("<II", out, opt + 32, spec.section_alignment, spec.file_alignment)
    struct.pack_into("<HHHHHH", out, opt + 40, *spec.os_version, *spec.image_version, *spec.subsystem_version)
    struct.pack_into("<II", out, opt + 56, size_of_image, sizeof_headers)
    struct.pack_into("<HH", out, opt + 68, spec.subsystem, spec.dll_characteristics)
    if plus:
        struct.pack_into("<QQQQII", out, opt + 72, 0x100000, 0x1000, 0x100000, spec.sizeof_heap_commit, 0, 16)
        dirs_off = opt + 112
    else:
        struct.pack_into("<IIIIII", out, opt + 72, 0x100000, 0x1000, 0x100000, spec.sizeof_heap_commit, 0, 16)
        dirs_off = opt + 96
    for i, name in enumerate(DATA_DIRECTORY_NAMES):
        struct.pack_into("<II", out, dirs_off + 8 * i, *dirs[name])

    table = opt + opt_size
    for i, (name, data, vsize, chars, sva) in enumerate(layout):
        raw_name = name.encode("latin-1")[:8].ljust(8, b"\x00")
        struct.pack_into(
            "<8sIIIIIIHHI", out, table + 40 * i,
            raw_name, vsize, sva, len(data), raw_ptrs[i], 0, 0, 0, 0, chars,
        )
        out[raw_ptrs[i] : raw_ptrs[i] + len(data)] = data
    return bytes(out)


def section_table_end(pe: bytes) -> int:
    """Offset of the first byte after the section table of a built image."""
    pe_off = struct.unpack_from("<I", pe, 0x3C)[0]
    n_sections, opt_size = struct.unpack_from("<H", pe, pe_off + 6)[0], struct.unpack_from("<H", pe, pe_off + 20)[0]
    return pe_off + 24 + opt_size + 40 * n_sections
