"""Lossless reading and byte-exact writing of PE images.

The model keeps every byte of the input somewhere: the structured headers,
the optional-header fields we do not interpret (``raw_fields``/``raw_tail``),
uncovered regions between the section table and the end of the last section
(``gaps``) and the trailing overlay.  ``serialize_pe(parse_pe(b)[0]) == b``
for every accepted input.

Layout reference: https://learn.microsoft.com/en-us/windows/win32/debug/pe-format
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple

from .errors import IndexOutOfRange, LayoutConflict, MalformedPe

DOS_HEADER_SIZE = 64
PE_SIGNATURE = b"PE\0\0"
COFF_SIZE = 20
SECTION_HEADER_SIZE = 40
MIN_FILE_SIZE = 97

PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B
_FIXED_OPTIONAL_SIZE = {PE32_MAGIC: 96, PE32PLUS_MAGIC: 112}
_DIRECTORY_COUNT_OFFSET = {PE32_MAGIC: 92, PE32PLUS_MAGIC: 108}
MAX_DATA_DIRECTORIES = 16

_COFF = struct.Struct("<HHIIIHH")
_SECTION = struct.Struct("<8sIIII12sI")
_DIRECTORY = struct.Struct("<II")

# offsets of the modelled fields inside the optional header (same for PE32/PE32+)
_OPT_ENTRY = 16
_OPT_SECTION_ALIGN = 32
_OPT_FILE_ALIGN = 36
_OPT_SIZE_OF_IMAGE = 56
_OPT_SIZE_OF_HEADERS = 60
_OPT_CHECKSUM = 64


class DirectoryKind(enum.IntEnum):
    EXPORT = 0
    IMPORT = 1
    RESOURCE = 2
    EXCEPTION = 3
    SECURITY = 4
    BASERELOC = 5
    DEBUG = 6
    ARCHITECTURE = 7
    GLOBALPTR = 8
    TLS = 9
    LOAD_CONFIG = 10
    BOUND_IMPORT = 11
    IAT = 12
    DELAY_IMPORT = 13
    CLR_RUNTIME = 14
    RESERVED = 15


@dataclass(frozen=True)
class DosHeader:
    magic: bytes
    pe_offset: int
    reserved_words: bytes  # bytes 2..60 of the DOS header

    def pack(self) -> bytes:
        return self.magic + self.reserved_words + struct.pack("<I", self.pe_offset)


@dataclass(frozen=True)
class CoffHeader:
    machine: int
    number_of_sections: int
    time_date_stamp: int
    symbol_table_offset: int
    number_of_symbols: int
    size_of_optional_header: int
    characteristics: int

    def pack(self) -> bytes:
        return _COFF.pack(
            self.machine,
            self.number_of_sections,
            self.time_date_stamp,
            self.symbol_table_offset,
            self.number_of_symbols,
            self.size_of_optional_header,
            self.characteristics,
        )


@dataclass(frozen=True)
class OptionalHeader:
    magic: int
    size_of_image: int
    size_of_headers: int
    checksum: int
    file_alignment: int
    section_alignment: int
    entry_point_rva: int
    data_directory_count: int
    # fixed-size part of the header; modelled fields are overlaid on write
    raw_fields: bytes
    # bytes between the last data directory and size_of_optional_header
    raw_tail: bytes = b""

    def __post_init__(self):
        # keep raw_fields in sync with the modelled fields so that replace()
        # yields a header equal to what parse_pe would read back
        if self.magic not in _FIXED_OPTIONAL_SIZE or len(self.raw_fields) != _FIXED_OPTIONAL_SIZE[self.magic]:
            raise LayoutConflict("raw_fields length does not match the optional header magic")
        out = bytearray(self.raw_fields)
        struct.pack_into("<H", out, 0, self.magic)
        struct.pack_into("<I", out, _OPT_ENTRY, self.entry_point_rva)
        struct.pack_into("<I", out, _OPT_SECTION_ALIGN, self.section_alignment)
        struct.pack_into("<I", out, _OPT_FILE_ALIGN, self.file_alignment)
        struct.pack_into("<I", out, _OPT_SIZE_OF_IMAGE, self.size_of_image)
        struct.pack_into("<I", out, _OPT_SIZE_OF_HEADERS, self.size_of_headers)
        struct.pack_into("<I", out, _OPT_CHECKSUM, self.checksum)
        struct.pack_into("<I", out, _DIRECTORY_COUNT_OFFSET[self.magic], self.data_directory_count)
        object.__setattr__(self, "raw_fields", bytes(out))

    @property
    def is_pe32plus(self) -> bool:
        return self.magic == PE32PLUS_MAGIC

    def pack(self, directories: tuple[DataDirectory, ...]) -> bytes:
        return self.raw_fields + b"".join(_DIRECTORY.pack(d.rva, d.size) for d in directories) + self.raw_tail


@dataclass(frozen=True)
class DataDirectory:
    kind: int
    rva: int
    size: int

    @property
    def present(self) -> bool:
        return self.rva != 0 and self.size != 0


@dataclass(frozen=True)
class SectionHeader:
    name: bytes  # 8-byte field, NUL padded
    virtual_size: int
    virtual_address: int
    raw_data_size: int
    raw_data_offset: int
    characteristics: int
    # relocation/line-number pointers and counts, kept verbatim
    reserved: bytes = bytes(12)

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\0").decode("latin-1")

    def pack(self) -> bytes:
        return _SECTION.pack(
            self.name,
            self.virtual_size,
            self.virtual_address,
            self.raw_data_size,
            self.raw_data_offset,
            self.reserved,
            self.characteristics,
        )


@dataclass(frozen=True)
class Section:
    header: SectionHeader
    data: bytes  # raw data; shorter than raw_data_size only when truncated by EOF

    @property
    def raw_end(self) -> int:
        return self.header.raw_data_offset + len(self.data)

    @property
    def mapped_size(self) -> int:
        vs = self.header.virtual_size
        # VirtualSize 0 is treated by loaders as "use SizeOfRawData"
        return len(self.data) if vs == 0 else min(vs, len(self.data))

    @property
    def mapped(self) -> bytes:
        return self.data[: self.mapped_size]

    @property
    def slack(self) -> range:
        return range(self.mapped_size, len(self.data))


class ParseWarning(NamedTuple):
    code: str
    message: str
    offset: int


@dataclass
class ParseDiagnostics:
    warnings: list[ParseWarning] = field(default_factory=list)

    def warn(self, code: str, message: str, offset: int = -1) -> None:
        self.warnings.append(ParseWarning(code, message, offset))

    @property
    def is_canonical(self) -> bool:
        return not self.warnings

    def codes(self) -> list[str]:
        return [w.code for w in self.warnings]


@dataclass(frozen=True)
class PeFile:
    dos_header: DosHeader
    dos_stub: bytes
    coff: CoffHeader
    optional: OptionalHeader
    data_directories: tuple[DataDirectory, ...]
    sections: tuple[Section, ...]
    overlay: bytes = b""
    # uncovered byte runs between the section table and the overlay, as (offset, bytes)
    gaps: tuple[tuple[int, bytes], ...] = ()

    @property
    def pe_offset(self) -> int:
        return self.dos_header.pe_offset

    @property
    def section_table_offset(self) -> int:
        return self.pe_offset + len(PE_SIGNATURE) + COFF_SIZE + self.coff.size_of_optional_header

    @property
    def headers_end(self) -> int:
        """Offset one past the last section header."""
        return self.section_table_offset + SECTION_HEADER_SIZE * len(self.sections)

    @property
    def overlay_start(self) -> int:
        ends = [self.headers_end]
        ends += [s.raw_end for s in self.sections if s.data]
        ends += [off + len(b) for off, b in self.gaps]
        return max(ends)

    @property
    def source_length(self) -> int:
        return self.overlay_start + len(self.overlay)

    def directory(self, kind: int) -> DataDirectory | None:
        if kind < len(self.data_directories):
            d = self.data_directories[kind]
            return d if d.present else None
        return None

    def with_directory(self, kind: int, rva: int, size: int) -> PeFile:
        if kind >= len(self.data_directories):
            return self
        dirs = list(self.data_directories)
        dirs[kind] = DataDirectory(kind, rva, size)
        return replace(self, data_directories=tuple(dirs))


def _is_power_of_two(v: int) -> bool:
    return v > 0 and v & (v - 1) == 0


def align_up(value: int, alignment: int) -> int:
    return -(-value // alignment) * alignment


def parse_pe(data: bytes) -> tuple[PeFile, ParseDiagnostics]:
    """Parse ``data`` into a :class:`PeFile`, tolerating and recording anomalies.

    Raises :class:`MalformedPe` when the layout cannot be recovered.
    """
    data = bytes(data)
    diag = ParseDiagnostics()
    size = len(data)
    if size < MIN_FILE_SIZE:
        raise MalformedPe("file too short", size)
    if data[:2] != b"MZ":
        raise MalformedPe("missing MZ magic", 0)
    (pe_offset,) = struct.unpack_from("<I", data, 60)
    if pe_offset < DOS_HEADER_SIZE or pe_offset + len(PE_SIGNATURE) + COFF_SIZE > size:
        raise MalformedPe("pe_offset out of range", 60)
    if data[pe_offset : pe_offset + 4] != PE_SIGNATURE:
        raise MalformedPe("missing PE signature", pe_offset)

    dos = DosHeader(data[:2], pe_offset, data[2:60])
    coff = CoffHeader(*_COFF.unpack_from(data, pe_offset + 4))

    opt_off = pe_offset + 4 + COFF_SIZE
    if opt_off + 2 > size:
        raise MalformedPe("optional header unreadable", opt_off)
    (magic,) = struct.unpack_from("<H", data, opt_off)
    if magic not in _FIXED_OPTIONAL_SIZE:
        raise MalformedPe(f"unknown optional header magic {magic:#x}", opt_off)
    fixed = _FIXED_OPTIONAL_SIZE[magic]
    if coff.size_of_optional_header < fixed or opt_off + coff.size_of_optional_header > size:
        raise MalformedPe("optional header truncated", opt_off)
    raw_fields = data[opt_off : opt_off + fixed]

    def u32(rel: int) -> int:
        return struct.unpack_from("<I", raw_fields, rel)[0]

    n_dirs = u32(_DIRECTORY_COUNT_OFFSET[magic])
    if n_dirs > MAX_DATA_DIRECTORIES or fixed + 8 * n_dirs > coff.size_of_optional_header:
        raise MalformedPe(f"bad data directory count {n_dirs}", opt_off + _DIRECTORY_COUNT_OFFSET[magic])
    file_alignment = u32(_OPT_FILE_ALIGN)
    section_alignment = u32(_OPT_SECTION_ALIGN)
    if not _is_power_of_two(file_alignment):
        raise MalformedPe(f"file alignment {file_alignment:#x} is not a power of two", opt_off + _OPT_FILE_ALIGN)
    if not _is_power_of_two(section_alignment):
        raise MalformedPe(
            f"section alignment {section_alignment:#x} is not a power of two", opt_off + _OPT_SECTION_ALIGN
        )
    dir_off = opt_off + fixed
    directories = tuple(
        DataDirectory(i, *_DIRECTORY.unpack_from(data, dir_off + 8 * i)) for i in range(n_dirs)
    )
    optional = OptionalHeader(
        magic=magic,
        size_of_image=u32(_OPT_SIZE_OF_IMAGE),
        size_of_headers=u32(_OPT_SIZE_OF_HEADERS),
        checksum=u32(_OPT_CHECKSUM),
        file_alignment=file_alignment,
        section_alignment=section_alignment,
        entry_point_rva=u32(_OPT_ENTRY),
        data_directory_count=n_dirs,
        raw_fields=raw_fields,
        raw_tail=data[dir_off + 8 * n_dirs : opt_off + coff.size_of_optional_header],
    )
    if optional.size_of_headers % file_alignment:
        diag.warn("headers-unaligned", "size_of_headers is not a multiple of file_alignment", opt_off + 60)
    if optional.size_of_image % section_alignment:
        diag.warn("image-unaligned", "size_of_image is not a multiple of section_alignment", opt_off + 56)

    table_off = opt_off + coff.size_of_optional_header
    table_end = table_off + SECTION_HEADER_SIZE * coff.number_of_sections
    if table_end > size:
        raise MalformedPe("section table unreadable", table_off)
    if coff.number_of_sections == 0:
        diag.warn("no-sections", "file declares zero sections", pe_offset + 6)
    if optional.size_of_headers < table_end:
        diag.warn("headers-too-small", "size_of_headers does not cover the section table", opt_off + 60)

    sections = []
    for i in range(coff.number_of_sections):
        hoff = table_off + SECTION_HEADER_SIZE * i
        h = SectionHeader(*_unpack_section(data, hoff))
        if h.raw_data_size == 0:
            sections.append(Section(h, b""))
            continue
        if h.raw_data_offset < table_end:
            raise MalformedPe(f"section {i} raw data overlaps the header region", hoff + 20)
        if h.raw_data_offset >= size:
            raise MalformedPe(f"section {i} raw data starts past end of file", hoff + 20)
        if h.raw_data_offset % file_alignment:
            diag.warn("raw-unaligned", f"section {i} raw offset not file-aligned", hoff + 20)
        end = h.raw_data_offset + h.raw_data_size
        if end > size:
            diag.warn("truncated-section", f"section {i} raw range truncated by EOF", end)
            end = size
        sections.append(Section(h, data[h.raw_data_offset : end]))

    spans = sorted((s.header.raw_data_offset, s.raw_end) for s in sections if s.data)
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise MalformedPe("section raw ranges overlap", b0)

    overlay_start = max([table_end] + [e for _, e in spans])
    gaps = []
    cursor = table_end
    for start, end in spans:
        if start > cursor:
            gaps.append((cursor, data[cursor:start]))
        cursor = max(cursor, end)

    pe = PeFile(
        dos_header=dos,
        dos_stub=data[DOS_HEADER_SIZE:pe_offset],
        coff=coff,
        optional=optional,
        data_directories=directories,
        sections=tuple(sections),
        overlay=data[overlay_start:],
        gaps=tuple(gaps),
    )
    return pe, diag


def _unpack_section(data: bytes, offset: int) -> tuple:
    name, vsize, va, rsize, roff, reserved, chars = _SECTION.unpack_from(data, offset)
    return name, vsize, va, rsize, roff, chars, reserved


def serialize_pe(pe: PeFile) -> bytes:
    """Write ``pe`` back to bytes.  Raises :class:`LayoutConflict` on overlapping regions."""
    if pe.dos_header.magic != b"MZ" or len(pe.dos_header.reserved_words) != 58:
        raise LayoutConflict("malformed DOS header")
    if len(pe.dos_stub) != pe.pe_offset - DOS_HEADER_SIZE:
        raise LayoutConflict("DOS stub length disagrees with pe_offset")
    if pe.coff.number_of_sections != len(pe.sections):
        raise LayoutConflict("number_of_sections disagrees with the section list")
    opt = pe.optional
    if opt.data_directory_count != len(pe.data_directories):
        raise LayoutConflict("data directory count disagrees with the directory list")
    opt_bytes = opt.pack(pe.data_directories)
    if len(opt_bytes) != pe.coff.size_of_optional_header:
        raise LayoutConflict("size_of_optional_header disagrees with the optional header contents")

    regions = [(0, pe.headers_end, "headers")]
    regions += [(off, off + len(b), "gap") for off, b in pe.gaps if b]
    regions += [(s.header.raw_data_offset, s.raw_end, s.header.display_name) for s in pe.sections if s.data]
    regions.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(regions, regions[1:]):
        if b0 < a1:
            raise LayoutConflict(f"region {bn!r} at {b0:#x} overlaps {an!r} ending at {a1:#x}")

    start = pe.overlay_start
    out = bytearray(start)
    header = pe.dos_header.pack() + pe.dos_stub + PE_SIGNATURE + pe.coff.pack() + opt_bytes
    header += b"".join(s.header.pack() for s in pe.sections)
    out[: len(header)] = header
    for off, b in pe.gaps:
        out[off : off + len(b)] = b
    for s in pe.sections:
        if s.data:
            out[s.header.raw_data_offset : s.raw_end] = s.data
    out += pe.overlay
    return bytes(out)


def overlay_range(pe: PeFile) -> tuple[int, int]:
    start = pe.overlay_start
    return start, len(pe.overlay)


def section_slack(pe: PeFile, index: int) -> range:
    """Offsets, relative to the section's raw data, of bytes not mapped at load time."""
    if not 0 <= index < len(pe.sections):
        raise IndexOutOfRange(f"section index {index} out of range")
    return pe.sections[index].slack


def mapped_bytes(pe: PeFile, index: int) -> bytes:
    if not 0 <= index < len(pe.sections):
        raise IndexOutOfRange(f"section index {index} out of range")
    return pe.sections[index].mapped


def rva_to_section(pe: PeFile, rva: int) -> tuple[int, int] | None:
    """Resolve ``rva`` to ``(section index, offset into the section's raw data)``."""
    for i, s in enumerate(pe.sections):
        va = s.header.virtual_address
        extent = max(s.header.virtual_size, s.header.raw_data_size)
        if va <= rva < va + extent:
            off = rva - va
            return (i, off) if off < len(s.data) else None
    return None


def with_section_data(pe: PeFile, index: int, data: bytes) -> PeFile:
    """Copy of ``pe`` with section ``index``'s raw bytes replaced (same length)."""
    sec = pe.sections[index]
    if len(data) != len(sec.data):
        raise LayoutConflict("replacement section data changes the raw size")
    sections = list(pe.sections)
    sections[index] = Section(sec.header, bytes(data))
    return replace(pe, sections=tuple(sections))


def debug_region(pe: PeFile) -> tuple[int, int, int] | None:
    """``(section index, start, end)`` of the debug directory's bytes inside raw data."""
    d = pe.directory(DirectoryKind.DEBUG)
    if d is None:
        return None
    loc = rva_to_section(pe, d.rva)
    if loc is None:
        return None
    i, off = loc
    return i, off, min(off + d.size, len(pe.sections[i].data))


def clear_debug(pe: PeFile) -> PeFile:
    """Zero the debug directory entry and, when it resolves into a section, the bytes it covers."""
    if DirectoryKind.DEBUG >= len(pe.data_directories):
        return pe
    region = debug_region(pe)
    if region is not None:
        i, start, end = region
        data = bytearray(pe.sections[i].data)
        data[start:end] = bytes(end - start)
        pe = with_section_data(pe, i, bytes(data))
    return pe.with_directory(DirectoryKind.DEBUG, 0, 0)


def _read_rva(pe: PeFile, rva: int, size: int, what: str) -> bytes:
    loc = rva_to_section(pe, rva)
    if loc is None:
        raise MalformedPe(f"{what} at RVA {rva:#x} does not resolve to section data")
    i, off = loc
    data = pe.sections[i].data
    if off + size > len(data):
        raise MalformedPe(f"{what} runs past the end of section {i}", pe.sections[i].header.raw_data_offset + off)
    return data[off : off + size]


def _read_cstring(pe: PeFile, rva: int, what: str, limit: int = 512) -> str:
    loc = rva_to_section(pe, rva)
    if loc is None:
        raise MalformedPe(f"{what} at RVA {rva:#x} does not resolve to section data")
    i, off = loc
    data = pe.sections[i].data
    end = data.find(b"\0", off, off + limit)
    if end < 0:
        raise MalformedPe(f"unterminated {what}", pe.sections[i].header.raw_data_offset + off)
    return data[off:end].decode("latin-1")


def read_imports(pe: PeFile, diagnostics: ParseDiagnostics | None = None) -> list[tuple[str, str]]:
    """List ``(library, function)`` pairs in file order; ordinal imports render as ``#n``."""
    d = pe.directory(DirectoryKind.IMPORT)
    if d is None:
        if diagnostics is not None:
            diagnostics.warn("no-import-directory", "import directory absent")
        return []
    plus = pe.optional.is_pe32plus
    thunk_size = 8 if plus else 4
    ordinal_flag = 1 << (63 if plus else 31)
    out = []
    rva = d.rva
    while True:
        desc = _read_rva(pe, rva, 20, "import descriptor")
        oft, _, _, name_rva, ft = struct.unpack("<IIIII", desc)
        if not any((oft, name_rva, ft)):
            break
        lib = _read_cstring(pe, name_rva, "import library name")
        thunk = oft or ft
        while True:
            raw = _read_rva(pe, thunk, thunk_size, "import thunk")
            value = int.from_bytes(raw, "little")
            if value == 0:
                break
            if value & ordinal_flag:
                out.append((lib, f"#{value & 0xFFFF}"))
            else:
                out.append((lib, _read_cstring(pe, (value & 0x7FFFFFFF) + 2, "import name")))
            thunk += thunk_size
        rva += 20
    return out


def read_exports(pe: PeFile, diagnostics: ParseDiagnostics | None = None) -> list[str]:
    """Exported names in name-table order, then ordinal-only exports as ``#n``."""
    d = pe.directory(DirectoryKind.EXPORT)
    if d is None:
        if diagnostics is not None:
            diagnostics.warn("no-export-directory", "export directory absent")
        return []
    table = _read_rva(pe, d.rva, 40, "export directory")
    base, n_funcs, n_names, funcs_rva, names_rva, ords_rva = struct.unpack_from("<IIIIII", table, 16)
    funcs = struct.unpack(f"<{n_funcs}I", _read_rva(pe, funcs_rva, 4 * n_funcs, "export address table")) if n_funcs else ()
    name_ptrs = struct.unpack(f"<{n_names}I", _read_rva(pe, names_rva, 4 * n_names, "export name table")) if n_names else ()
    ordinals = struct.unpack(f"<{n_names}H", _read_rva(pe, ords_rva, 2 * n_names, "export ordinal table")) if n_names else ()
    out = [_read_cstring(pe, p, "export name") for p in name_ptrs]
    named = set(ordinals)
    out += [f"#{base + i}" for i, f in enumerate(funcs) if f and i not in named]
    return out
