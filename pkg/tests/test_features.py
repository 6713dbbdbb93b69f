import random
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustpe.attacks import MutationRecipe, apply_recipe, harvest_donors
from robustpe.corpus_gen import MALWARE_SIGNAL, GenSpec, generate_pe
from robustpe.errors import EmptyCorpus
from robustpe.features import (
    VocabCaps,
    Vocabulary,
    build_vocab,
    byte_histogram,
    export_tokens,
    extract_strings,
    feature_rows,
    import_tokens,
    monotone_feature_names,
    monotone_features,
    monotone_layout,
    ngram_counts,
    read_feature_rows,
    section_features,
    string_counts,
    write_feature_rows,
)
from robustpe.pe_format import parse_pe, with_section_data

from conftest import benign, malicious

seeds = st.integers(0, 2**32 - 1)


def tiny_vocab(ngrams=(), strings=()):
    return Vocabulary(tuple(sorted(ngrams)), tuple(sorted(strings)), (), (), "test")


@pytest.fixture(scope="module")
def corpus(small_corpus):
    pes = [parse_pe(d)[0] for _, d in small_corpus]
    labels = [r.label for r, _ in small_corpus]
    return pes, labels


@pytest.fixture(scope="module")
def vocab(corpus):
    return build_vocab(*corpus, VocabCaps(ngrams=512, strings=128))


@pytest.fixture(scope="module")
def pool(donor_files):
    return harvest_donors(donor_files)


# ---------------------------------------------------------------- raw extractors


def test_extract_strings_examples():
    assert extract_strings(b"\0\0Hello!\0\0ab\0\0") == ["Hello!"]
    assert extract_strings(bytes(64)) == []
    assert extract_strings(b"ABCDE") == ["ABCDE"]
    assert extract_strings(b"ABCD") == []


def naive_strings(data: bytes) -> list[str]:
    out, run = [], []
    for b in data + b"\0":
        if 0x20 <= b <= 0x7F:
            run.append(chr(b))
        else:
            if len(run) >= 5:
                out.append("".join(run))
            run = []
    return out


@given(st.binary(max_size=600))
def test_extract_strings_matches_naive_scan(data):
    assert extract_strings(data) == naive_strings(data)


def test_byte_histogram_examples():
    h = byte_histogram(bytes(512))
    assert h[0] == 512 and h[1:].sum() == 0
    assert byte_histogram(b"").sum() == 0 and len(byte_histogram(b"")) == 256
    h = byte_histogram(bytes([0x41, 0x41, 0x42]))
    assert h[0x41] == 2 and h[0x42] == 1 and h.sum() == 3


def test_ngram_counts_overlap():
    v = tiny_vocab([(2, b"\x01\x02"), (3, b"\x07\x07\x07")])
    assert ngram_counts(bytes([1, 2, 1, 2, 1]), v).toarray().tolist() == [2, 0]
    assert ngram_counts(bytes([7, 7, 7, 7]), v).toarray().tolist() == [0, 2]
    assert ngram_counts(b"\x01", v).toarray().tolist() == [0, 0]


@given(st.binary(max_size=300), st.lists(st.binary(min_size=2, max_size=5), min_size=1, max_size=12, unique=True))
def test_ngram_counts_match_sliding_window(data, tokens):
    v = tiny_vocab([(len(t), t) for t in tokens])
    got = ngram_counts(data, v).toarray()
    for i, (n, t) in enumerate(v.ngram_tokens):
        expected = sum(data[j : j + n] == t for j in range(len(data) - n + 1))
        assert got[i] == expected


# ---------------------------------------------------------------- vocabulary


def test_vocab_contains_planted_tokens(vocab):
    assert (3, b"\xde\xad\xbe") in vocab.ngram_tokens
    assert (2, b"\xde\xad") in vocab.ngram_tokens
    assert MALWARE_SIGNAL.string.decode() in vocab.string_tokens
    assert "wininet.dll!InternetOpenUrlA" in vocab.import_tokens
    assert len(vocab.ngram_tokens) <= 512


def test_vocab_caps_and_errors(corpus):
    pes, labels = corpus
    v = build_vocab(pes, labels, VocabCaps(ngrams=64, strings=0, imports=3, exports=0))
    assert v.string_tokens == () and len(v.import_tokens) == 3 and len(v.ngram_tokens) == 64
    with pytest.raises(EmptyCorpus):
        build_vocab([p for p, y in zip(pes, labels) if y == "benign"], ["benign"] * labels.count("benign"))
    with pytest.raises(EmptyCorpus):
        build_vocab([], [])


def test_vocab_is_deterministic_and_order_free(corpus, vocab):
    pes, labels = corpus
    caps = VocabCaps(ngrams=512, strings=128)
    again = build_vocab(pes, labels, caps)
    idx = list(range(len(pes)))
    random.Random(3).shuffle(idx)
    shuffled = build_vocab([pes[i] for i in idx], [labels[i] for i in idx], caps)
    assert again == vocab == shuffled
    assert again.built_from == vocab.built_from


def test_vocab_ties_break_lexicographically():
    # each file holds one private 2-gram; zero runs are shared by all 40 files
    files = []
    for k in range(40):
        pe, _ = parse_pe(generate_pe(GenSpec(seed=k, section_sizes=(512, 1024), imports=())))
        data = bytes([0x80 + k, 0x10]) + bytes(len(pe.sections[0].data) - 2)
        files.append(with_section_data(pe, 0, data))
    v = build_vocab(files, ["malicious"] * 40, VocabCaps(ngrams=1, strings=0, imports=0, exports=0))
    # every all-zero n-gram has document frequency 40; the tie goes to the smallest token
    assert v.ngram_tokens == ((2, b"\0\0"),)


def test_vocab_json_round_trip(vocab):
    back = Vocabulary.from_json(vocab.to_json())
    assert back == vocab
    assert back.to_json() == vocab.to_json()
    with pytest.raises(ValueError):
        Vocabulary(((3, b"abc"), (2, b"ab")), (), (), (), "x")


# ---------------------------------------------------------------- component features


def test_section_features_shape(vocab):
    pe, _ = parse_pe(generate_pe(GenSpec(seed=5, section_sizes=(1024, 1024))))
    sets = section_features(pe, vocab)
    assert [s.section_name for s in sets] == [".text", ".rdata"]
    for s, sec in zip(sets, pe.sections):
        assert s.histogram.sum() == len(sec.mapped)
        assert s.ngram_vec.dim == len(vocab.ngram_tokens)
        assert (s.ngram_vec.values > 0).all()


def test_all_zero_section(vocab):
    pe, _ = parse_pe(generate_pe(GenSpec(seed=5, section_sizes=(1024, 1024))))
    pe = with_section_data(pe, 0, bytes(1024))
    s = section_features(pe, vocab)[0]
    assert s.histogram[0] == len(pe.sections[0].mapped) and s.histogram[1:].sum() == 0
    assert s.string_vec.toarray().sum() == 0
    for i in s.ngram_vec.indices:
        assert set(vocab.ngram_tokens[i][1]) == {0}


@given(seeds, st.integers(0, 4))
def test_injection_only_appends_section_sets(vocab, pool, file_seed, attack_seed):
    pe, _ = parse_pe(malicious(file_seed))
    before = section_features(pe, vocab)
    out = apply_recipe(pe, MutationRecipe("inject", attack_seed, target_section_count=len(pe.sections) + 4), pool)
    after = section_features(out, vocab)
    assert after[: len(before)] == before
    assert after[len(before) :] == section_features(replace(out, sections=out.sections[len(before) :]), vocab)


# ---------------------------------------------------------------- monotone features


@given(seeds, st.sampled_from(["pad-benign", "pad-random", "inject"]), st.integers(0, 99))
def test_monotone_features_grow_under_additions(vocab, pool, file_seed, kind, seed):
    pe, _ = parse_pe(malicious(file_seed))
    if kind == "inject":
        recipe = MutationRecipe("inject", seed, target_section_count=len(pe.sections) + 3)
    else:
        recipe = MutationRecipe("pad", seed, pad_bytes=4096, pad_source=kind.split("-")[1])
    a = monotone_features(pe, vocab, include_unmapped=True)
    b = monotone_features(apply_recipe(pe, recipe, pool), vocab, include_unmapped=True)
    lay = monotone_layout(vocab)
    assert a.import_present == b.import_present and a.export_present == b.export_present
    x, y = a.to_array(), b.to_array()
    for block in ("histogram", "imports", "exports", "strings"):
        assert (y[lay[block]] >= x[lay[block]]).all()


def test_missing_tables_use_presence_bits(vocab):
    none = monotone_features(parse_pe(generate_pe(GenSpec(seed=1, imports=())))[0], vocab)
    some = monotone_features(parse_pe(generate_pe(GenSpec(seed=1, exports=("Nothing",))))[0], vocab)
    assert not none.import_present and not none.export_present
    assert some.export_present and some.import_present
    assert not none.export_vec.any() and not some.export_vec.any()
    assert not np.array_equal(none.to_array(), some.to_array())


def test_monotone_layout_and_names(vocab):
    lay = monotone_layout(vocab)
    names = monotone_feature_names(vocab)
    pe, _ = parse_pe(malicious(3))
    arr = monotone_features(pe, vocab).to_array()
    assert len(names) == len(arr) == lay["strings"].stop
    assert names[lay["import_present"].start] == "import_present"
    assert arr[lay["histogram"]].sum() == sum(len(s.mapped) for s in pe.sections)


def test_identical_files_identical_vectors(vocab):
    a, _ = parse_pe(malicious(8))
    b, _ = parse_pe(malicious(8))
    assert monotone_features(a, vocab) == monotone_features(b, vocab)
    assert section_features(a, vocab) == section_features(b, vocab)


# ---------------------------------------------------------------- table oracle


def naive_imports(data: bytes) -> list[str] | None:
    """Independent import reader working on raw file bytes."""
    pe_off = struct.unpack_from("<I", data, 60)[0]
    n_sec, opt_size = struct.unpack_from("<H", data, pe_off + 6)[0], struct.unpack_from("<H", data, pe_off + 20)[0]
    opt = pe_off + 24
    plus = struct.unpack_from("<H", data, opt)[0] == 0x20B
    dirs = opt + (112 if plus else 96)
    imp_rva = struct.unpack_from("<I", data, dirs + 8)[0]
    if imp_rva == 0:
        return None
    table = pe_off + 24 + opt_size
    secs = [struct.unpack_from("<8sIIII", data, table + 40 * i) for i in range(n_sec)]

    def off(rva):
        for _, vs, va, rs, ro in secs:
            if va <= rva < va + max(vs, rs):
                return ro + rva - va
        raise ValueError

    def cstr(rva):
        o = off(rva)
        return data[o : data.index(b"\0", o)].decode("latin-1")

    out, d = [], off(imp_rva)
    width = 8 if plus else 4
    while True:
        oft, _, _, name, ft = struct.unpack_from("<5I", data, d)
        if not (oft or name or ft):
            return out
        lib = cstr(name).lower()
        t = off(oft or ft)
        while True:
            v = int.from_bytes(data[t : t + width], "little")
            if v == 0:
                break
            if v >> (width * 8 - 1):
                out.append(f"{lib}!#{v & 0xFFFF}")
            else:
                out.append(f"{lib}!{cstr(v + 2)}")
            t += width
        d += 20


@given(seeds, st.booleans(), st.booleans())
def test_import_tokens_match_naive_reader(file_seed, plus, mal):
    data = malicious(file_seed, pe32plus=plus) if mal else benign(file_seed, pe32plus=plus)
    assert import_tokens(parse_pe(data)[0]) == naive_imports(data)


@given(seeds, st.lists(st.one_of(st.none(), st.text("abcdefXYZ_", min_size=1, max_size=12)), max_size=6, unique=True))
def test_export_tokens_match_declared(file_seed, exports):
    pe, _ = parse_pe(generate_pe(GenSpec(seed=file_seed, exports=tuple(exports))))
    if not exports:
        assert export_tokens(pe) is None
        return
    named = sorted(e for e in exports if e is not None)
    # unnamed exports follow the named ones in the address table, ordinals start at 1
    unnamed = [f"#{1 + len(named) + i}" for i in range(len(exports) - len(named))]
    assert export_tokens(pe) == named + unnamed


@given(seeds)
def test_string_counts_match_naive(vocab, file_seed):
    pe, _ = parse_pe(malicious(file_seed))
    for s in pe.sections:
        got = string_counts(s.mapped, vocab).toarray()
        found = naive_strings(s.mapped)
        assert got.tolist() == [found.count(t) for t in vocab.string_tokens]


# ---------------------------------------------------------------- persistence


def test_sparse_rows_round_trip(vocab, tmp_path):
    pe, _ = parse_pe(malicious(2))
    rows = feature_rows("f0", section_features(pe, vocab), monotone_features(pe, vocab))
    path = tmp_path / "rows.csv"
    write_feature_rows(path, rows)
    assert read_feature_rows(path) == rows
    assert {b for _, b, _, _ in rows} >= {"s0.hist", "mono"}
    assert all(c > 0 for *_, c in rows)
