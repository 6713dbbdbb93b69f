"""Passes that collapse the volatile attack channels of a PE file.

``strip`` canonicalises header fields, ``remove_padding`` drops the overlay
and ``reset_bytes`` zeroes inter-section slack.  The passes write disjoint
regions, so they are idempotent and commute.
"""

from __future__ import annotations

from dataclasses import replace

from .pe_format import PeFile, Section, clear_debug


def strip(pe: PeFile) -> PeFile:
    coff = replace(pe.coff, time_date_stamp=0, symbol_table_offset=0, number_of_symbols=0)
    optional = replace(pe.optional, checksum=0)
    out = replace(pe, coff=coff, optional=optional, dos_stub=bytes(len(pe.dos_stub)))
    return clear_debug(out)


def remove_padding(pe: PeFile) -> PeFile:
    return replace(pe, overlay=b"") if pe.overlay else pe


def reset_bytes(pe: PeFile) -> PeFile:
    sections = []
    for s in pe.sections:
        start = s.slack.start
        if start < len(s.data) and any(s.data[start:]):
            s = Section(s.header, s.data[:start] + bytes(len(s.data) - start))
        sections.append(s)
    return replace(pe, sections=tuple(sections))


PASSES = {"ss": strip, "pr": remove_padding, "br": reset_bytes}
# canonical application order: strip, then padding removal, then slack reset
PASS_ORDER = ("ss", "pr", "br")


def apply_passes(pe: PeFile, names) -> PeFile:
    """Apply the selected passes (any of ``ss``, ``pr``, ``br``) in canonical order."""
    unknown = set(names) - set(PASSES)
    if unknown:
        raise ValueError(f"unknown preprocessing passes {sorted(unknown)}")
    for name in PASS_ORDER:
        if name in names:
            pe = PASSES[name](pe)
    return pe


def preprocess_all(pe: PeFile) -> PeFile:
    return reset_bytes(remove_padding(strip(pe)))
