"""Deterministic synthetic PE corpus with plantable per-section signals.

Files are small but structurally real PE32/PE32+ images: DOS header and stub,
COFF and optional headers, a section table, import/export/debug tables that
the parser in :mod:`robustpe.pe_format` reads back, and section contents
assembled from byte "styles" (code-like, text, zero runs, uniform noise)
whose mixture depends on the class profile.

Signals (an n-gram token, a printable string, an import) are planted in
mapped section bytes only, never in slack, overlay or headers.  Files that
must not carry a signal have every occurrence masked out of their filler.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import SpecConflict
from .pe_format import (
    DOS_HEADER_SIZE,
    PE32_MAGIC,
    PE32PLUS_MAGIC,
    CoffHeader,
    DataDirectory,
    DirectoryKind,
    DosHeader,
    OptionalHeader,
    PeFile,
    Section,
    SectionHeader,
    align_up,
    serialize_pe,
)

_DOS_RESERVED = bytes.fromhex(
    "90000300000004000000ffff0000b800000000000000400000000000000000000000000000000000000000000000000000000000000000000000"
)
_DOS_STUB = (
    bytes.fromhex("0e1fba0e00b409cd21b8014ccd21")
    + b"This program cannot be run in DOS mode.\r\r\n$"
).ljust(64, b"\0")

SECTION_NAMES = (".text", ".rdata", ".data", ".rsrc", ".reloc", ".pdata", ".tls", ".crt", ".didat", ".sxdata")
_SECTION_FLAGS = {".text": 0x60000020, ".data": 0xC0000040}
_DEFAULT_SECTION_FLAGS = 0x40000040

_WORDS = (
    "Microsoft", "Windows", "Version", "Copyright", "Corporation", "Initialize", "Settings",
    "Software", "Default", "Document", "Printer", "Control", "Service", "Resource", "Install",
    "Network", "Display", "Library", "Runtime", "Process", "Thread", "Memory", "Buffer",
    "Handle", "Window", "Dialog", "Button", "Message", "Format", "String", "Invalid", "Error",
    "Warning", "Failed", "Success", "Config", "Update", "Manager", "Registry", "System32",
    "Program", "Files", "Common", "Shared", "Module", "Assembly", "Policy", "Security",
    "Language", "Neutral", "Product", "Description", "Original", "Filename", "Internal",
)

_KERNEL32 = (
    "CreateFileA", "ReadFile", "WriteFile", "CloseHandle", "GetProcAddress", "LoadLibraryA",
    "GetModuleHandleA", "VirtualAlloc", "VirtualFree", "ExitProcess", "GetLastError",
    "HeapAlloc", "HeapFree", "GetTickCount", "Sleep", "GetCommandLineA", "SetFilePointer",
    "GetFileSize", "FindFirstFileA", "FindNextFileA",
)
_USER32 = ("MessageBoxA", "GetMessageA", "DispatchMessageA", "CreateWindowExA", "ShowWindow", "LoadIconA")
_ADVAPI32 = ("RegOpenKeyExA", "RegQueryValueExA", "RegCloseKey", "OpenProcessToken")


@dataclass(frozen=True)
class Profile:
    """Mixture weights over byte styles (code, text, zeros, random) plus a code-byte law."""

    weights: tuple[float, float, float, float]
    code_seed: int


PROFILES = {
    "benign": Profile((0.45, 0.25, 0.25, 0.05), 11),
    "malicious": Profile((0.35, 0.10, 0.15, 0.40), 11),
    "downloader": Profile((0.50, 0.20, 0.10, 0.20), 37),
    "spyware": Profile((0.25, 0.10, 0.25, 0.40), 37),
}


@dataclass(frozen=True)
class Signal:
    ngram: bytes | None = None
    string: bytes | None = None
    import_entry: tuple[str, str] | None = None
    section_probability: float = 1.0
    import_probability: float = 1.0

    def patterns(self) -> tuple[bytes, ...]:
        return tuple(p for p in (self.ngram, self.string) if p)

    def summary(self) -> str:
        parts = []
        if self.ngram:
            parts.append("ngram=" + self.ngram.hex())
        if self.string:
            parts.append("string=" + self.string.decode("latin-1"))
        if self.import_entry:
            parts.append("import=" + "!".join(self.import_entry))
        parts.append(f"p={self.section_probability:g}")
        return ";".join(parts)

    def to_dict(self) -> dict:
        return {
            "ngram": self.ngram.hex() if self.ngram else None,
            "string": self.string.decode("latin-1") if self.string else None,
            "import": list(self.import_entry) if self.import_entry else None,
            "section_probability": self.section_probability,
            "import_probability": self.import_probability,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> Signal | None:
        if not d:
            return None
        return cls(
            ngram=bytes.fromhex(d["ngram"]) if d.get("ngram") else None,
            string=d["string"].encode("latin-1") if d.get("string") else None,
            import_entry=tuple(d["import"]) if d.get("import") else None,
            section_probability=float(d.get("section_probability", 1.0)),
            import_probability=float(d.get("import_probability", 1.0)),
        )


MALWARE_SIGNAL = Signal(
    ngram=b"\xde\xad\xbe",
    string=b"Global\\mtx_r7f3a9",
    import_entry=("WININET.dll", "InternetOpenUrlA"),
    section_probability=0.9,
    import_probability=0.9,
)
FAMILY_SIGNALS = {
    "downloader": Signal(
        ngram=b"\x0f\x0b\xc7\x05",
        string=b"http://cdn-update.example/stage2.bin",
        import_entry=("URLMON.dll", "URLDownloadToFileA"),
        section_probability=0.9,
    ),
    "spyware": Signal(
        ngram=b"\x66\x0f\xd7\x9c",
        string=b"keylog_%04d.dat",
        import_entry=("USER32.dll", "SetWindowsHookExA"),
        section_probability=0.9,
    ),
}

ImportSpec = tuple[tuple[str, tuple["str | int", ...]], ...]


@dataclass(frozen=True)
class GenSpec:
    seed: int
    label: str = "benign"
    family: str = ""
    section_count: tuple[int, int] = (2, 4)
    section_size: tuple[int, int] = (512, 2048)
    signal: Signal | None = None
    forbidden: tuple[bytes, ...] = ()
    profile: str | None = None
    alignments: tuple[int, int] = (512, 4096)  # (file, section)
    header_size: int = 1024
    slack: tuple[int, int] = (0, 256)
    # explicit layout overrides, mainly for tests
    section_sizes: tuple[int, ...] | None = None
    slack_sizes: tuple[int, ...] | None = None
    imports: ImportSpec | None = None  # None: seeded default set; () : no import table
    exports: tuple[str | None, ...] = ()  # None entries are ordinal-only exports
    debug_size: int = 0
    overlay: int = 0
    slack_fill: int = 0
    canonical: bool = False
    pe32plus: bool = False
    time_date_stamp: int | None = None

    def __post_init__(self):
        lo, hi = self.section_count
        if self.section_sizes is None and not 1 <= lo <= hi:
            raise SpecConflict(f"bad section_count range {self.section_count}")
        fa, sa = self.alignments
        if fa <= 0 or fa & (fa - 1) or sa <= 0 or sa & (sa - 1) or sa < fa:
            raise SpecConflict(f"bad alignments {self.alignments}")
        if self.section_sizes is not None:
            if not self.section_sizes or any(s <= 0 or s % fa for s in self.section_sizes):
                raise SpecConflict("explicit section sizes must be positive multiples of file_alignment")
        elif self.section_size[0] <= 0 or self.section_size[0] > self.section_size[1]:
            raise SpecConflict(f"bad section_size range {self.section_size}")
        if self.header_size % fa:
            raise SpecConflict("header_size must be a multiple of file_alignment")

    @property
    def profile_name(self) -> str:
        if self.profile:
            return self.profile
        if self.family in PROFILES:
            return self.family
        return "benign" if self.label == "benign" else "malicious"


class _Filler:
    def __init__(self, rng: np.random.Generator, profile: Profile):
        self.rng = rng
        self.weights = np.asarray(profile.weights) / sum(profile.weights)
        perm = np.random.default_rng(profile.code_seed).permutation(256)
        law = 1.0 / np.arange(1, 257) ** 1.1
        self.code_p = np.empty(256)
        self.code_p[perm] = law / law.sum()

    def fill(self, n: int) -> bytearray:
        rng = self.rng
        out = bytearray()
        while len(out) < n:
            k = int(rng.integers(16, 129))
            style = rng.choice(4, p=self.weights)
            if style == 0:
                out += rng.choice(256, size=k, p=self.code_p).astype(np.uint8).tobytes()
            elif style == 1:
                while k > 0:
                    w = _WORDS[int(rng.integers(len(_WORDS)))].encode() + b"\0"
                    out += w
                    k -= len(w)
            elif style == 2:
                out += bytes(k)
            else:
                out += rng.integers(0, 256, size=k, dtype=np.uint8).tobytes()
        return out[:n]


def _safe_byte(patterns: Sequence[bytes]) -> int:
    used = set(b"".join(patterns))
    for v in (0x00, 0x20, 0x90, 0xCC):
        if v not in used:
            return v
    return next(v for v in range(256) if v not in used)


def _mask_patterns(buf: bytearray, protected: bytearray, patterns: Sequence[bytes], safe: int) -> None:
    """Break every occurrence of ``patterns`` in ``buf`` by editing an unprotected byte."""
    changed = True
    while changed:
        changed = False
        for pat in patterns:
            start = buf.find(pat)
            while start >= 0:
                spot = next((i for i in range(start + len(pat) - 1, start - 1, -1) if not protected[i]), None)
                if spot is None:
                    raise SpecConflict(f"forbidden pattern {pat!r} lies inside protected content")
                buf[spot] = safe
                changed = True
                start = buf.find(pat, start + 1)


def _default_imports(rng: np.random.Generator) -> dict[str, list]:
    imports: dict[str, list] = {}
    k = int(rng.integers(3, 8))
    imports["KERNEL32.dll"] = [_KERNEL32[i] for i in sorted(rng.choice(len(_KERNEL32), k, replace=False))]
    if rng.random() < 0.6:
        k = int(rng.integers(1, 4))
        imports["USER32.dll"] = [_USER32[i] for i in sorted(rng.choice(len(_USER32), k, replace=False))]
    if rng.random() < 0.4:
        k = int(rng.integers(1, 3))
        imports["ADVAPI32.dll"] = [_ADVAPI32[i] for i in sorted(rng.choice(len(_ADVAPI32), k, replace=False))]
    return imports


def _import_blob(imports: dict[str, list], base_rva: int, plus: bool) -> tuple[bytes, int]:
    """Build descriptors, thunk arrays, hint/name entries and library names.

    Returns the blob and the size of the descriptor array.
    """
    ts = 8 if plus else 4
    ordinal_flag = 1 << (63 if plus else 31)
    dlls = list(imports.items())
    desc_size = 20 * (len(dlls) + 1)
    off = desc_size
    thunk_offs = []
    for _, funcs in dlls:
        ilt = off
        off += ts * (len(funcs) + 1)
        iat = off
        off += ts * (len(funcs) + 1)
        thunk_offs.append((ilt, iat))
    names = bytearray()
    name_offs = []
    for _, funcs in dlls:
        offs = []
        for f in funcs:
            if isinstance(f, int):
                offs.append(None)
                continue
            offs.append(off + len(names))
            names += b"\0\0" + f.encode("latin-1") + b"\0"
            if len(names) % 2:
                names += b"\0"
        name_offs.append(offs)
    lib_offs = []
    for lib, _ in dlls:
        lib_offs.append(off + len(names))
        names += lib.encode("latin-1") + b"\0"
    blob = bytearray(off) + names
    for i, ((_, funcs), (ilt, iat)) in enumerate(zip(dlls, thunk_offs)):
        struct.pack_into("<IIIII", blob, 20 * i, base_rva + ilt, 0, 0, base_rva + lib_offs[i], base_rva + iat)
        for j, (f, noff) in enumerate(zip(funcs, name_offs[i])):
            value = (ordinal_flag | f) if noff is None else base_rva + noff
            for table in (ilt, iat):
                blob[table + ts * j : table + ts * (j + 1)] = value.to_bytes(ts, "little")
    return bytes(blob), desc_size


def _export_blob(exports: Sequence[str | None], base_rva: int, code_rva: int, dll_name: str) -> bytes:
    named = sorted(e for e in exports if e is not None)
    unnamed = [e for e in exports if e is None]
    n_funcs = len(named) + len(unnamed)
    funcs_off = 40
    names_off = funcs_off + 4 * n_funcs
    ords_off = names_off + 4 * len(named)
    strings_off = ords_off + 2 * len(named)
    strings = bytearray()
    name_ptrs = []
    for n in named:
        name_ptrs.append(base_rva + strings_off + len(strings))
        strings += n.encode("latin-1") + b"\0"
    dll_ptr = base_rva + strings_off + len(strings)
    strings += dll_name.encode("latin-1") + b"\0"
    blob = bytearray(strings_off) + strings
    struct.pack_into(
        "<IIHHIIIIIII", blob, 0, 0, 0, 0, 0, dll_ptr, 1, n_funcs, len(named),
        base_rva + funcs_off, base_rva + names_off, base_rva + ords_off,
    )
    for i in range(n_funcs):
        struct.pack_into("<I", blob, funcs_off + 4 * i, code_rva + 16 * i)
    for i, p in enumerate(name_ptrs):
        struct.pack_into("<I", blob, names_off + 4 * i, p)
        struct.pack_into("<H", blob, ords_off + 2 * i, i)
    return bytes(blob)


def _place(rng, protected: bytearray, limit: int, length: int) -> int:
    for _ in range(200):
        pos = int(rng.integers(0, limit - length + 1))
        if not any(protected[pos : pos + length]):
            return pos
    raise SpecConflict("no room left to plant a signal")


def generate_pe(spec: GenSpec) -> bytes:
    """Emit a PE image for ``spec``; the same spec always yields the same bytes."""
    rng = np.random.default_rng(spec.seed)
    fa, sa = spec.alignments
    plus = spec.pe32plus
    profile = PROFILES[spec.profile_name]
    filler = _Filler(rng, profile)

    if spec.section_sizes is not None:
        raw_sizes = list(spec.section_sizes)
        fixed_sizes = True
    else:
        n = int(rng.integers(spec.section_count[0], spec.section_count[1] + 1))
        lo, hi = max(1, spec.section_size[0] // fa), max(1, spec.section_size[1] // fa)
        raw_sizes = [int(rng.integers(lo, hi + 1)) * fa for _ in range(n)]
        fixed_sizes = False
    n = len(raw_sizes)
    names = [SECTION_NAMES[i] if i < len(SECTION_NAMES) else f".sec{i}" for i in range(n)]
    table_idx = 1 if n > 1 else 0

    signal = spec.signal
    imports = _default_imports(rng) if spec.imports is None else {lib: list(f) for lib, f in spec.imports}
    if signal and signal.import_entry and rng.random() < signal.import_probability:
        lib, fn = signal.import_entry
        imports.setdefault(lib, [])
        if fn not in imports[lib]:
            imports[lib].append(fn)
    dll_name = f"synthetic_{spec.seed & 0xFFFF:04x}.dll"

    # tables share one blob in the tables section; sizes are VA independent
    import_len = len(_import_blob(imports, 0, plus)[0]) if imports else 0
    export_len = len(_export_blob(spec.exports, 0, 0, dll_name)) if spec.exports else 0
    blob_len = align_up(import_len, 4) + align_up(export_len, 4) + spec.debug_size
    table_off = 16 * int(rng.integers(0, 8))
    needed = [0] * n
    needed[table_idx] = table_off + blob_len
    # free room kept beside the tables so planted signals always fit
    room = 256 if signal else 32
    for i in range(n):
        need = needed[i] + room + 64
        if raw_sizes[i] < need:
            if fixed_sizes:
                raise SpecConflict(f"section {i} too small for its tables")
            raw_sizes[i] = align_up(need, fa)

    if spec.slack_sizes is not None:
        if len(spec.slack_sizes) != n:
            raise SpecConflict("slack_sizes must match the section count")
        slacks = list(spec.slack_sizes)
    else:
        slacks = [int(rng.integers(spec.slack[0], spec.slack[1] + 1)) for _ in range(n)]
    vsizes = []
    for i in range(n):
        vs = raw_sizes[i] - slacks[i]
        if vs < needed[i] + room:
            if spec.slack_sizes is not None:
                raise SpecConflict(f"section {i} slack leaves no room for content")
            vs = raw_sizes[i]
        vsizes.append(vs)

    vas, offs = [], []
    va, off = align_up(spec.header_size, sa), spec.header_size
    for i in range(n):
        vas.append(va)
        offs.append(off)
        va += align_up(vsizes[i], sa)
        off += raw_sizes[i]
    size_of_image = va

    # section contents
    patterns = tuple(spec.forbidden)
    if signal:
        patterns = tuple(p for p in patterns if p not in signal.patterns())
    safe = _safe_byte(patterns + (signal.patterns() if signal else ()))
    contents, protections = [], []
    for i in range(n):
        buf = filler.fill(vsizes[i])
        contents.append(buf)
        protections.append(bytearray(vsizes[i]))

    directories = [DataDirectory(k, 0, 0) for k in range(16)]
    tb, tp = contents[table_idx], protections[table_idx]
    cursor = table_off
    base = vas[table_idx]
    if imports:
        blob, desc_size = _import_blob(imports, base + cursor, plus)
        tb[cursor : cursor + len(blob)] = blob
        directories[DirectoryKind.IMPORT] = DataDirectory(DirectoryKind.IMPORT, base + cursor, desc_size)
        cursor += align_up(len(blob), 4)
    if spec.exports:
        blob = _export_blob(spec.exports, base + cursor, vas[0] + 16, dll_name)
        tb[cursor : cursor + len(blob)] = blob
        directories[DirectoryKind.EXPORT] = DataDirectory(DirectoryKind.EXPORT, base + cursor, len(blob))
        cursor += align_up(len(blob), 4)
    if spec.debug_size:
        tb[cursor : cursor + spec.debug_size] = rng.integers(1, 256, spec.debug_size, dtype=np.uint8).tobytes()
        directories[DirectoryKind.DEBUG] = DataDirectory(DirectoryKind.DEBUG, base + cursor, spec.debug_size)
        cursor += spec.debug_size
    tp[table_off:cursor] = b"\1" * (cursor - table_off)

    if signal:
        p = signal.section_probability
        for token, wrap in ((signal.ngram, b""), (signal.string, b"\0")):
            if not token:
                continue
            item = wrap + token + wrap
            chosen = [i for i in range(n) if rng.random() < p]
            if not chosen:
                chosen = [int(rng.integers(n))]
            for i in chosen:
                for _ in range(int(rng.integers(1, 4))):
                    pos = _place(rng, protections[i], vsizes[i], len(item))
                    contents[i][pos : pos + len(item)] = item
                    protections[i][pos : pos + len(item)] = b"\1" * len(item)
    if patterns:
        for buf, prot in zip(contents, protections):
            _mask_patterns(buf, prot, patterns, safe)

    sections = []
    for i in range(n):
        data = bytes(contents[i]) + bytes([spec.slack_fill]) * (raw_sizes[i] - vsizes[i])
        name = names[i].encode("latin-1").ljust(8, b"\0")[:8]
        flags = _SECTION_FLAGS.get(names[i], _DEFAULT_SECTION_FLAGS)
        header = SectionHeader(name, vsizes[i], vas[i], raw_sizes[i], offs[i], flags)
        sections.append(Section(header, data))

    entry = vas[0] + 16 * int(rng.integers(0, max(1, vsizes[0] // 16)))
    if spec.canonical:
        timestamp, checksum, stub = 0, 0, bytes(len(_DOS_STUB))
    else:
        timestamp = spec.time_date_stamp if spec.time_date_stamp is not None else int(rng.integers(0x58000000, 0x60000000))
        checksum = int(rng.integers(1, 2**32))
        stub = _DOS_STUB
    pe_offset = DOS_HEADER_SIZE + len(stub)
    magic = PE32PLUS_MAGIC if plus else PE32_MAGIC
    size_code = raw_sizes[0]
    size_init = sum(raw_sizes[1:])
    if plus:
        raw_fields = struct.pack(
            "<HBBIIIIIQIIHHHHHHIIIIHHQQQQII", magic, 14, 0, size_code, size_init, 0, entry, vas[0],
            0x140000000, sa, fa, 6, 0, 0, 0, 6, 0, 0, size_of_image, spec.header_size, checksum,
            2, 0x8160, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16,
        )
    else:
        raw_fields = struct.pack(
            "<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII", magic, 14, 0, size_code, size_init, 0, entry, vas[0],
            vas[table_idx], 0x400000, sa, fa, 6, 0, 0, 0, 6, 0, 0, size_of_image, spec.header_size,
            checksum, 2, 0x8140, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16,
        )
    optional = OptionalHeader(
        magic=magic,
        size_of_image=size_of_image,
        size_of_headers=spec.header_size,
        checksum=checksum,
        file_alignment=fa,
        section_alignment=sa,
        entry_point_rva=entry,
        data_directory_count=16,
        raw_fields=raw_fields,
    )
    characteristics = 0x0022 if plus else 0x0102
    if spec.exports:
        characteristics |= 0x2000
    coff = CoffHeader(
        machine=0x8664 if plus else 0x14C,
        number_of_sections=n,
        time_date_stamp=timestamp,
        symbol_table_offset=0,
        number_of_symbols=0,
        size_of_optional_header=len(raw_fields) + 8 * 16,
        characteristics=characteristics,
    )
    pe = PeFile(
        dos_header=DosHeader(b"MZ", pe_offset, _DOS_RESERVED),
        dos_stub=stub,
        coff=coff,
        optional=optional,
        data_directories=tuple(directories),
        sections=tuple(sections),
        overlay=b"",
        gaps=(),
    )
    table_end = pe.headers_end
    if table_end > spec.header_size:
        raise SpecConflict("header_size too small for the section table")
    if table_end < spec.header_size:
        pe = replace(pe, gaps=((table_end, bytes(spec.header_size - table_end)),))
    if spec.overlay:
        pe = replace(pe, overlay=bytes(filler.fill(spec.overlay)))
    return serialize_pe(pe)


# ---------------------------------------------------------------- corpus level


@dataclass
class ClassSpec:
    label: str
    count: int
    family: str = ""
    signal: Signal | None = None
    profile: str | None = None

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "count": self.count,
            "family": self.family,
            "signal": self.signal.to_dict() if self.signal else None,
            "profile": self.profile,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClassSpec:
        return cls(
            label=d["label"],
            count=int(d["count"]),
            family=d.get("family", ""),
            signal=Signal.from_dict(d.get("signal")),
            profile=d.get("profile"),
        )


@dataclass
class CorpusConfig:
    """Corpus recipe.  JSON schema mirrors the field names; see README."""

    classes: list[ClassSpec]
    seed: int = 0
    epochs: int = 4
    section_count: tuple[int, int] = (2, 5)
    section_size: tuple[int, int] = (512, 2048)
    header_size: int = 1024

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [c.to_dict() for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CorpusConfig:
        classes = [ClassSpec.from_dict(c) for c in d["classes"]]
        if not classes or any(c.count <= 0 for c in classes):
            raise SpecConflict("every class needs a positive count")
        return cls(
            classes=classes,
            seed=int(d.get("seed", 0)),
            epochs=int(d.get("epochs", 4)),
            section_count=tuple(d.get("section_count", (2, 5))),
            section_size=tuple(d.get("section_size", (512, 2048))),
            header_size=int(d.get("header_size", 1024)),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> CorpusConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def detection_config(n_benign: int, n_malicious: int, seed: int = 0, probability: float = 0.9, **kw) -> CorpusConfig:
    signal = replace(MALWARE_SIGNAL, section_probability=probability, import_probability=probability)
    return CorpusConfig(
        classes=[ClassSpec("benign", n_benign), ClassSpec("malicious", n_malicious, signal=signal)],
        seed=seed,
        **kw,
    )


def family_config(per_family: int, seed: int = 0, **kw) -> CorpusConfig:
    return CorpusConfig(
        classes=[ClassSpec("malicious", per_family, family=f, signal=s) for f, s in FAMILY_SIGNALS.items()],
        seed=seed,
        **kw,
    )


MANIFEST_FIELDS = ("path", "label", "family", "epoch", "seed", "signal", "sha256", "mutation")


@dataclass
class ManifestRow:
    path: str
    label: str
    family: str = ""
    epoch: int = 0
    seed: int = 0
    signal: str = ""
    sha256: str = ""
    mutation: str = ""

    @property
    def target(self) -> str:
        """Class used for training: the family when set, else the label."""
        return self.family or self.label


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)
    root: Path = Path(".")

    def resolve(self, row: ManifestRow) -> Path:
        return self.root / row.path

    def read(self, row: ManifestRow) -> bytes:
        return self.resolve(row).read_bytes()

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow(asdict(r))

    @classmethod
    def load(cls, path: str | os.PathLike) -> Manifest:
        path = Path(path)
        with open(path, newline="") as fh:
            rows = []
            for d in csv.DictReader(fh):
                missing = set(MANIFEST_FIELDS) - set(d)
                if missing:
                    raise ValueError(f"manifest {path} lacks columns {sorted(missing)}")
                d["epoch"] = int(d["epoch"])
                d["seed"] = int(d["seed"])
                rows.append(ManifestRow(**{k: d[k] for k in MANIFEST_FIELDS}))
        return cls(rows, path.parent)

    def verify(self) -> list[str]:
        """Paths whose content hash no longer matches."""
        return [r.path for r in self.rows if sha256(self.read(r)) != r.sha256]


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_seed(corpus_seed: int, class_index: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, class_index, index]).generate_state(1)[0])


def iter_corpus(config: CorpusConfig) -> Iterator[tuple[ManifestRow, bytes]]:
    """Yield ``(row, bytes)`` per file in manifest order; ``row.path`` is relative."""
    all_patterns = tuple(p for c in config.classes if c.signal for p in c.signal.patterns())
    for ci, cls in enumerate(config.classes):
        tag = cls.family or cls.label
        for i in range(cls.count):
            seed = file_seed(config.seed, ci, i)
            spec = GenSpec(
                seed=seed,
                label=cls.label,
                family=cls.family,
                section_count=tuple(config.section_count),
                section_size=tuple(config.section_size),
                signal=cls.signal,
                forbidden=all_patterns,
                profile=cls.profile,
                header_size=config.header_size,
            )
            data = generate_pe(spec)
            row = ManifestRow(
                path=f"{tag}/{tag}_{i:05d}.exe",
                label=cls.label,
                family=cls.family,
                epoch=(i * config.epochs) // cls.count,
                seed=seed,
                signal=cls.signal.summary() if cls.signal else "",
                sha256=sha256(data),
            )
            yield row, data


def generate_corpus(config: CorpusConfig, out_dir: str | os.PathLike) -> Manifest:
    """Write every file under ``out_dir`` plus ``manifest.csv``; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest([], out_dir)
    for row, data in iter_corpus(config):
        target = out_dir / row.path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        manifest.rows.append(row)
    manifest.write(out_dir / "manifest.csv")
    return manifest
