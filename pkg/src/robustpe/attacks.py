"""Functionality-preserving binary-level mutations of PE files.

Each attack is a pure function ``PeFile -> PeFile``.  None of them touches
the mapped bytes of a pre-existing section (header stripping may zero the
debug data it points at) or the entry point.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import EmptyDonorPool, HeaderOverflow, InvalidRecipe, MalformedPe
from .pe_format import (
    SECTION_HEADER_SIZE,
    PeFile,
    Section,
    SectionHeader,
    align_up,
    clear_debug,
    parse_pe,
)

PADDING_CHUNK = 4096


class AttackKind(str, enum.Enum):
    HEADER_STRIP = "header_strip"
    INTERSECT = "intersect"
    PAD = "pad"
    INJECT = "inject"


# fixed composition order for combined attacks
ATTACK_ORDER = (AttackKind.HEADER_STRIP, AttackKind.INTERSECT, AttackKind.PAD, AttackKind.INJECT)


class PadSource(str, enum.Enum):
    BENIGN = "benign"
    RANDOM = "random"
    CONSTANT = "constant"


@dataclass(frozen=True)
class DonorPool:
    padding_chunks: tuple[bytes, ...] = ()
    donor_sections: tuple[tuple[SectionHeader, bytes], ...] = ()
    source_manifest: tuple[str, ...] = ()
    skipped: tuple[tuple[str, str], ...] = ()  # (file id, reason)

    def __post_init__(self):
        for h, data in self.donor_sections:
            if len(data) != h.raw_data_size:
                raise ValueError("donor section data length must equal its raw_data_size")


def harvest_donors(files: Sequence[bytes], ids: Sequence[str] | None = None) -> DonorPool:
    """Collect every complete section and 4096-byte chunks of each parseable file."""
    ids = list(ids) if ids is not None else [str(i) for i in range(len(files))]
    if len(ids) != len(files):
        raise ValueError("ids and files differ in length")
    chunks, donors, used, skipped = [], [], [], []
    for fid, data in zip(ids, files):
        try:
            pe, _ = parse_pe(data)
        except MalformedPe as exc:
            skipped.append((fid, exc.reason))
            continue
        used.append(fid)
        for s in pe.sections:
            if s.data and len(s.data) == s.header.raw_data_size:
                donors.append((s.header, s.data))
        chunks += [bytes(data[i : i + PADDING_CHUNK]) for i in range(0, len(data), PADDING_CHUNK)]
    return DonorPool(tuple(chunks), tuple(donors), tuple(used), tuple(skipped))


@dataclass(frozen=True)
class MutationRecipe:
    kind: AttackKind
    seed: int = 0
    pad_bytes: int = 0
    pad_source: PadSource = PadSource.RANDOM
    target_section_count: int = 0
    grow_headers: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        object.__setattr__(self, "pad_source", PadSource(self.pad_source))
        if self.kind is AttackKind.PAD and self.pad_bytes <= 0:
            raise InvalidRecipe("pad_bytes must be positive")
        if self.kind is AttackKind.INJECT and self.target_section_count <= 0:
            raise InvalidRecipe("target_section_count must be positive")

    def tag(self) -> str:
        if self.kind is AttackKind.PAD:
            return f"pad{self.pad_bytes}-{self.pad_source.value}"
        if self.kind is AttackKind.INJECT:
            return f"inject{self.target_section_count}"
        return self.kind.value

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "seed": self.seed}
        if self.kind is AttackKind.PAD:
            d.update(pad_bytes=self.pad_bytes, pad_source=self.pad_source.value)
        if self.kind is AttackKind.INJECT:
            d.update(target_section_count=self.target_section_count, grow_headers=self.grow_headers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MutationRecipe:
        return cls(**d)


def _require(recipe: MutationRecipe, kind: AttackKind) -> None:
    if recipe.kind is not kind:
        raise InvalidRecipe(f"expected a {kind.value} recipe, got {recipe.kind.value}")


def _u32_different(rng: np.random.Generator, old: int) -> int:
    v = int(rng.integers(0, 2**32))
    return v ^ 1 if v == old else v


def attack_header_strip(pe: PeFile, seed: int) -> PeFile:
    """Overwrite volatile header fields with seed-derived values and drop debug info."""
    rng = np.random.default_rng([seed, 0x4853])
    coff = replace(
        pe.coff,
        time_date_stamp=_u32_different(rng, pe.coff.time_date_stamp),
        symbol_table_offset=_u32_different(rng, pe.coff.symbol_table_offset),
        number_of_symbols=_u32_different(rng, pe.coff.number_of_symbols),
    )
    optional = replace(pe.optional, checksum=_u32_different(rng, pe.optional.checksum))
    out = replace(pe, coff=coff, optional=optional, dos_stub=bytes(len(pe.dos_stub)))
    return clear_debug(out)


def _pad_bytes(recipe: MutationRecipe, pool: DonorPool) -> bytes:
    n = recipe.pad_bytes
    rng = np.random.default_rng([recipe.seed, 0x5041])
    if recipe.pad_source is PadSource.CONSTANT:
        return bytes(n)
    if recipe.pad_source is PadSource.RANDOM:
        return rng.integers(0, 256, n, dtype=np.uint8).tobytes()
    chunks = [c for c in pool.padding_chunks if c]
    if not chunks:
        raise EmptyDonorPool("no padding chunks available for benign padding")
    # start at a seeded chunk and walk the pool cyclically until n bytes are filled
    i = int(rng.integers(len(chunks)))
    out = bytearray()
    while len(out) < n:
        out += chunks[i % len(chunks)]
        i += 1
    return bytes(out[:n])


def attack_pad(pe: PeFile, recipe: MutationRecipe, pool: DonorPool) -> PeFile:
    """Append ``recipe.pad_bytes`` bytes to the overlay."""
    _require(recipe, AttackKind.PAD)
    return replace(pe, overlay=pe.overlay + _pad_bytes(recipe, pool))


def attack_intersection(pe: PeFile, seed: int) -> PeFile:
    """Replace every slack byte with a different seed-derived value."""
    rng = np.random.default_rng([seed, 0x4953])
    sections = []
    for s in pe.sections:
        slack = s.slack
        if len(slack) == 0:
            sections.append(s)
            continue
        data = np.frombuffer(s.data, dtype=np.uint8).copy()
        # adding 1..255 mod 256 guarantees every byte changes
        shift = rng.integers(1, 256, len(slack), dtype=np.uint16)
        data[slack.start :] = ((data[slack.start :].astype(np.uint16) + shift) % 256).astype(np.uint8)
        sections.append(Section(s.header, data.tobytes()))
    return replace(pe, sections=tuple(sections))


def _virtual_end(h: SectionHeader) -> int:
    return h.virtual_address + (h.virtual_size or h.raw_data_size)


def attack_section_inject(pe: PeFile, recipe: MutationRecipe, pool: DonorPool) -> PeFile:
    """Append seed-chosen donor sections until the file has ``target_section_count`` sections."""
    _require(recipe, AttackKind.INJECT)
    n_old = len(pe.sections)
    k = recipe.target_section_count - n_old
    if k <= 0:
        raise InvalidRecipe(f"target {recipe.target_section_count} does not exceed the {n_old} existing sections")
    if not pool.donor_sections:
        raise EmptyDonorPool("no donor sections available")
    rng = np.random.default_rng([recipe.seed, 0x494E])
    picks = rng.integers(0, len(pool.donor_sections), size=k)

    opt = pe.optional
    fa, sa = opt.file_alignment, opt.section_alignment
    new_headers_end = pe.headers_end + SECTION_HEADER_SIZE * k
    raw_starts = [s.header.raw_data_offset for s in pe.sections if s.data]
    first_raw = min(raw_starts, default=None)
    limit = opt.size_of_headers if first_raw is None else min(opt.size_of_headers, first_raw)

    sections = list(pe.sections)
    gaps = list(pe.gaps)
    size_of_headers = opt.size_of_headers
    if new_headers_end > limit:
        if not recipe.grow_headers:
            raise HeaderOverflow(
                f"section table needs {new_headers_end} header bytes but only {limit} are free"
            )
        delta = align_up(new_headers_end - limit, fa)
        size_of_headers += delta
        first_va = min((s.header.virtual_address for s in pe.sections), default=None)
        if first_va is not None and size_of_headers > first_va:
            raise HeaderOverflow("grown headers would overlap the first section's virtual range")
        sections = [
            Section(replace(s.header, raw_data_offset=s.header.raw_data_offset + delta), s.data)
            if s.data
            else s
            for s in sections
        ]
        gaps = [(off + delta, b) for off, b in gaps if off >= limit]
        header_pad = (first_raw if first_raw is not None else limit) + delta - new_headers_end
        if header_pad > 0:
            gaps.insert(0, (new_headers_end, bytes(header_pad)))
    else:
        # the new headers eat into the padding after the old section table
        trimmed = []
        for off, b in gaps:
            end = off + len(b)
            if end <= new_headers_end:
                continue
            if off < new_headers_end:
                b, off = b[new_headers_end - off :], new_headers_end
            trimmed.append((off, b))
        gaps = trimmed

    raw_cursor = max(
        [new_headers_end, size_of_headers]
        + [s.header.raw_data_offset + s.header.raw_data_size for s in sections if s.data]
        + [off + len(b) for off, b in gaps]
    )
    va_cursor = max([align_up(size_of_headers, sa)] + [_virtual_end(s.header) for s in sections])
    for pick in picks:
        template, donor = pool.donor_sections[int(pick)]
        raw_off = align_up(raw_cursor, fa)
        if raw_off > raw_cursor:
            gaps.append((raw_cursor, bytes(raw_off - raw_cursor)))
        raw_size = align_up(len(donor), fa)
        va = align_up(va_cursor, sa)
        header = SectionHeader(
            name=template.name,
            virtual_size=template.virtual_size,
            virtual_address=va,
            raw_data_size=raw_size,
            raw_data_offset=raw_off,
            characteristics=template.characteristics,
        )
        sections.append(Section(header, donor + bytes(raw_size - len(donor))))
        raw_cursor = raw_off + raw_size
        va_cursor = _virtual_end(header)

    coff = replace(pe.coff, number_of_sections=len(sections))
    optional = replace(opt, size_of_headers=size_of_headers, size_of_image=align_up(va_cursor, sa))
    return replace(pe, coff=coff, optional=optional, sections=tuple(sections), gaps=tuple(sorted(gaps)))


def apply_recipe(pe: PeFile, recipe: MutationRecipe, pool: DonorPool | None = None) -> PeFile:
    pool = pool if pool is not None else DonorPool()
    if recipe.kind is AttackKind.HEADER_STRIP:
        return attack_header_strip(pe, recipe.seed)
    if recipe.kind is AttackKind.INTERSECT:
        return attack_intersection(pe, recipe.seed)
    if recipe.kind is AttackKind.PAD:
        return attack_pad(pe, recipe, pool)
    return attack_section_inject(pe, recipe, pool)


def compose(pe: PeFile, recipes: Sequence[MutationRecipe], pool: DonorPool | None = None) -> PeFile:
    """Apply ``recipes`` in the fixed order header strip, intersect, pad, inject."""
    for r in sorted(recipes, key=lambda r: ATTACK_ORDER.index(r.kind)):
        pe = apply_recipe(pe, r, pool)
    return pe


@dataclass(frozen=True)
class AttackPlan:
    """A named combination of recipes, used to label mutated manifests."""

    recipes: tuple[MutationRecipe, ...] = field(default_factory=tuple)

    def tag(self) -> str:
        ordered = sorted(self.recipes, key=lambda r: ATTACK_ORDER.index(r.kind))
        return "+".join(r.tag() for r in ordered) or "clean"
