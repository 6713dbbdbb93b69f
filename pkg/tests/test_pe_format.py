import struct
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustpe.attacks import MutationRecipe, attack_pad
from robustpe.corpus_gen import GenSpec, generate_pe
from robustpe.errors import IndexOutOfRange, LayoutConflict, MalformedPe
from robustpe.pe_format import (
    DirectoryKind,
    Section,
    overlay_range,
    parse_pe,
    read_exports,
    read_imports,
    section_slack,
    serialize_pe,
)

from conftest import benign, malicious

seeds = st.integers(0, 2**32 - 1)


def two_section_file(**kw) -> bytes:
    return generate_pe(GenSpec(seed=5, section_sizes=(1536, 1536), header_size=1024, **kw))


def test_two_section_layout():
    data = two_section_file()
    pe, diag = parse_pe(data)
    # header 1024 + two sections of 1536 bytes each
    assert len(data) == 4096
    assert len(pe.sections) == 2
    assert pe.overlay == b""
    assert [s.header.raw_data_offset for s in pe.sections] == [1024, 2560]
    assert [s.header.raw_data_size for s in pe.sections] == [1536, 1536]
    assert diag.is_canonical


def test_appended_bytes_become_overlay():
    data = two_section_file()
    pe, _ = parse_pe(data)
    padded, _ = parse_pe(data + b"\x41" * 100)
    assert len(padded.overlay) == 100
    assert replace(padded, overlay=b"") == pe


def test_zeroed_dos_header_is_rejected():
    with pytest.raises(MalformedPe):
        parse_pe(b"MZ" + bytes(198))


def test_missing_pe_signature_is_rejected():
    data = bytearray(b"MZ" + bytes(198))
    struct.pack_into("<I", data, 60, 64)
    with pytest.raises(MalformedPe, match="signature"):
        parse_pe(bytes(data))


def test_short_and_non_mz_inputs_are_rejected():
    with pytest.raises(MalformedPe):
        parse_pe(b"MZ" + bytes(50))
    with pytest.raises(MalformedPe):
        parse_pe(b"ZM" + bytes(300))


def test_zero_file_alignment_is_rejected():
    data = bytearray(two_section_file())
    pe, _ = parse_pe(bytes(data))
    opt_off = pe.pe_offset + 4 + 20
    struct.pack_into("<I", data, opt_off + 36, 0)
    with pytest.raises(MalformedPe):
        parse_pe(bytes(data))


def test_overlapping_sections_conflict():
    pe, _ = parse_pe(two_section_file())
    a, b = pe.sections
    moved = Section(replace(b.header, raw_data_offset=a.header.raw_data_offset + 512), b.data)
    with pytest.raises(LayoutConflict):
        serialize_pe(replace(pe, sections=(a, moved)))


def test_pad_grows_length_exactly():
    data = two_section_file()
    pe, _ = parse_pe(data)
    out = serialize_pe(attack_pad(pe, MutationRecipe("pad", 1, pad_bytes=64, pad_source="constant"), None))
    assert len(out) == len(data) + 64


def test_overlay_range_examples():
    data = two_section_file()
    pe, _ = parse_pe(data)
    assert overlay_range(pe) == (len(data), 0)
    padded = attack_pad(pe, MutationRecipe("pad", 1, pad_bytes=4096, pad_source="random"), None)
    assert overlay_range(padded) == (len(data), 4096)
    # 1024 header + 1536 + 1024 = 3584, then 416 overlay bytes
    withov, _ = parse_pe(generate_pe(GenSpec(seed=3, section_sizes=(1536, 1024), overlay=416)))
    assert overlay_range(withov) == (3584, 416)
    assert withov.source_length == 4000


def test_section_slack_examples():
    pe, _ = parse_pe(generate_pe(GenSpec(seed=2, section_sizes=(512, 1024), slack_sizes=(112, 0))))
    assert pe.sections[0].header.virtual_size == 400
    assert section_slack(pe, 0) == range(400, 512)
    assert len(section_slack(pe, 0)) == 112
    assert len(section_slack(pe, 1)) == 0
    big = Section(replace(pe.sections[0].header, virtual_size=600), pe.sections[0].data)
    pe2 = replace(pe, sections=(big, pe.sections[1]))
    assert len(section_slack(pe2, 0)) == 0
    with pytest.raises(IndexOutOfRange):
        section_slack(pe, 2)


def test_read_imports_by_name_and_ordinal():
    pe, _ = parse_pe(generate_pe(GenSpec(seed=4, imports=(("KERNEL32.DLL", ("CreateFileA", "ReadFile")),))))
    assert read_imports(pe) == [("KERNEL32.DLL", "CreateFileA"), ("KERNEL32.DLL", "ReadFile")]
    pe, _ = parse_pe(generate_pe(GenSpec(seed=4, imports=(("USER32.DLL", (17,)),))))
    assert read_imports(pe) == [("USER32.DLL", "#17")]
    pe, _ = parse_pe(generate_pe(GenSpec(seed=4, imports=())))
    assert pe.directory(DirectoryKind.IMPORT) is None
    assert read_imports(pe) == []


def test_read_imports_pe32plus():
    spec = GenSpec(seed=4, pe32plus=True, imports=(("KERNEL32.DLL", ("ReadFile", 3)),))
    pe, _ = parse_pe(generate_pe(spec))
    assert pe.optional.is_pe32plus
    assert read_imports(pe) == [("KERNEL32.DLL", "ReadFile"), ("KERNEL32.DLL", "#3")]


def test_read_exports():
    pe, _ = parse_pe(generate_pe(GenSpec(seed=6, exports=("Init", "Run"))))
    assert read_exports(pe) == ["Init", "Run"]
    pe, _ = parse_pe(generate_pe(GenSpec(seed=6)))
    assert read_exports(pe) == []
    # the generator numbers exports from ordinal base 1
    pe, _ = parse_pe(generate_pe(GenSpec(seed=6, exports=(None,))))
    assert read_exports(pe) == ["#1"]


def test_import_descriptor_past_section_end_is_malformed():
    pe, _ = parse_pe(generate_pe(GenSpec(seed=4, imports=(("KERNEL32.DLL", ("ReadFile",)),))))
    s = pe.sections[1]
    end_rva = s.header.virtual_address + len(s.data) - 8
    broken = pe.with_directory(DirectoryKind.IMPORT, end_rva, 40)
    with pytest.raises(MalformedPe):
        read_imports(broken)


@given(seeds, st.booleans(), st.booleans())
def test_generated_files_round_trip(seed, plus, mal):
    data = malicious(seed, pe32plus=plus) if mal else benign(seed, pe32plus=plus)
    pe, diag = parse_pe(data)
    assert diag.is_canonical
    assert serialize_pe(pe) == data
    assert pe.coff.number_of_sections == len(pe.sections)
    for s in pe.sections:
        assert s.header.raw_data_offset % pe.optional.file_alignment == 0
        assert len(s.data) == s.header.raw_data_size
    assert pe.optional.size_of_headers % pe.optional.file_alignment == 0
    assert pe.optional.size_of_image % pe.optional.section_alignment == 0


@given(seeds, st.integers(0, 3000))
def test_overlay_and_slack_are_disjoint(seed, extra):
    pe, _ = parse_pe(benign(seed) + bytes(extra))
    start, length = overlay_range(pe)
    assert start + length == pe.source_length
    for i, s in enumerate(pe.sections):
        r = section_slack(pe, i)
        lo, hi = s.header.raw_data_offset + r.start, s.header.raw_data_offset + r.stop
        assert hi <= start or lo >= start + length or lo == hi


@given(seeds)
def test_table_readers_are_pure(seed):
    pe, _ = parse_pe(malicious(seed, exports=("Alpha", None, "Beta")))
    assert read_imports(pe) == read_imports(pe)
    # named exports occupy function slots 0 and 1, the unnamed one slot 2 -> ordinal 1 + 2
    assert read_exports(pe) == read_exports(pe) == ["Alpha", "Beta", "#3"]


def test_truncated_section_is_tolerated():
    data = two_section_file()
    pe, diag = parse_pe(data[:3000])
    assert not diag.is_canonical
    assert len(pe.sections[1].data) == 3000 - 2560
    assert serialize_pe(pe) == data[:3000]
