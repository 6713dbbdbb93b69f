"""Vocabulary building and the two feature families.

Per-section features (n-gram counts, byte histogram, string counts) feed the
component graph.  The global monotone vector only ever grows when bytes or
sections are added: a whole-file byte histogram, import/export counts with a
presence bit per table, and string counts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpus, MalformedPe
from .pe_format import PeFile, read_exports, read_imports, serialize_pe

NGRAM_SIZES = (2, 3, 4, 5)
MIN_STRING = 5
_STRING_RE = re.compile(rb"[\x20-\x7f]{%d,}" % MIN_STRING)
VOCAB_FORMAT = 1


def extract_strings(data: bytes) -> list[str]:
    """Maximal printable runs of at least five bytes, in file order."""
    return [m.group().decode("ascii") for m in _STRING_RE.finditer(data)]


def byte_histogram(data: bytes) -> np.ndarray:
    return np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256).astype(np.int64)


def _ngram_codes(data: bytes, n: int) -> np.ndarray:
    """Big-endian integer code of every overlapping ``n``-gram."""
    arr = np.frombuffer(data, dtype=np.uint8).astype(np.uint64)
    m = len(arr) - n + 1
    if m <= 0:
        return np.empty(0, dtype=np.uint64)
    codes = arr[:m].copy()
    for k in range(1, n):
        codes = (codes << np.uint64(8)) | arr[k : k + m]
    return codes


def _token_code(token: bytes) -> int:
    return int.from_bytes(token, "big")


@dataclass(frozen=True)
class VocabCaps:
    ngrams: int = 2048
    strings: int = 256
    imports: int = 1024
    exports: int = 1024


@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    values: np.ndarray
    dim: int

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.int64)
        out[self.indices] = self.values
        return out

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> SparseVector:
        idx = np.flatnonzero(dense)
        return cls(idx.astype(np.int64), dense[idx].astype(np.int64), len(dense))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __len__(self) -> int:
        return self.dim


@dataclass(frozen=True, eq=False)
class Vocabulary:
    ngram_tokens: tuple[tuple[int, bytes], ...]
    string_tokens: tuple[str, ...]
    import_tokens: tuple[str, ...]
    export_tokens: tuple[str, ...]
    built_from: str
    caps: VocabCaps = field(default_factory=VocabCaps)

    def __post_init__(self):
        for name in ("ngram_tokens", "string_tokens", "import_tokens", "export_tokens"):
            toks = list(getattr(self, name))
            if toks != sorted(set(toks)):
                raise ValueError(f"{name} must be sorted and duplicate-free")
        # per-n sorted code arrays and the offset of each block in ngram_tokens
        lookup = {}
        start = 0
        for n in NGRAM_SIZES:
            toks = [t for k, t in self.ngram_tokens if k == n]
            lookup[n] = (start, np.array([_token_code(t) for t in toks], dtype=np.uint64))
            start += len(toks)
        object.__setattr__(self, "_ngram_lookup", lookup)
        for name in ("string", "import", "export"):
            toks = getattr(self, f"{name}_tokens")
            object.__setattr__(self, f"_{name}_index", {t: i for i, t in enumerate(toks)})

    def __eq__(self, other) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (
            self.ngram_tokens == other.ngram_tokens
            and self.string_tokens == other.string_tokens
            and self.import_tokens == other.import_tokens
            and self.export_tokens == other.export_tokens
            and self.built_from == other.built_from
        )

    @property
    def fingerprint(self) -> str:
        return self.built_from

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": VOCAB_FORMAT,
                "built_from": self.built_from,
                "caps": self.caps.__dict__,
                "ngrams": [[n, t.hex()] for n, t in self.ngram_tokens],
                "strings": list(self.string_tokens),
                "imports": list(self.import_tokens),
                "exports": list(self.export_tokens),
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> Vocabulary:
        d = json.loads(text)
        if d.get("format") != VOCAB_FORMAT:
            raise ValueError(f"unsupported vocabulary format {d.get('format')!r}")
        return cls(
            ngram_tokens=tuple((int(n), bytes.fromhex(t)) for n, t in d["ngrams"]),
            string_tokens=tuple(d["strings"]),
            import_tokens=tuple(d["imports"]),
            export_tokens=tuple(d["exports"]),
            built_from=d["built_from"],
            caps=VocabCaps(**d["caps"]),
        )


def ngram_counts(data: bytes, vocab: Vocabulary) -> SparseVector:
    """Overlapping occurrence counts of every vocabulary n-gram in ``data``."""
    dense = np.zeros(len(vocab.ngram_tokens), dtype=np.int64)
    for n, (start, codes) in vocab._ngram_lookup.items():
        if not len(codes) or len(data) < n:
            continue
        c = _ngram_codes(data, n)
        pos = np.searchsorted(codes, c)
        pos[pos == len(codes)] = 0
        hit = codes[pos] == c
        dense[start : start + len(codes)] += np.bincount(pos[hit], minlength=len(codes))
    return SparseVector.from_dense(dense)


def _token_vector(tokens: Iterable[str], index: dict[str, int]) -> np.ndarray:
    out = np.zeros(len(index), dtype=np.int64)
    for t in tokens:
        i = index.get(t)
        if i is not None:
            out[i] += 1
    return out


def string_counts(data: bytes, vocab: Vocabulary) -> SparseVector:
    return SparseVector.from_dense(_token_vector(extract_strings(data), vocab._string_index))


def import_tokens(pe: PeFile) -> list[str] | None:
    """``lib!func`` tokens with the library lowercased; ``None`` when the table is absent or unreadable."""
    if pe.directory(1) is None:
        return None
    try:
        return [f"{lib.lower()}!{fn}" for lib, fn in read_imports(pe)]
    except MalformedPe:
        return None


def export_tokens(pe: PeFile) -> list[str] | None:
    if pe.directory(0) is None:
        return None
    try:
        return read_exports(pe)
    except MalformedPe:
        return None


def _top_by_df(df: Counter, cap: int) -> tuple:
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    return tuple(sorted(k for k, _ in ranked))


def corpus_fingerprint(files: Sequence[PeFile], labels: Sequence, caps: VocabCaps) -> str:
    h = hashlib.sha256()
    for digest, label in sorted((hashlib.sha256(serialize_pe(p)).hexdigest(), str(y)) for p, y in zip(files, labels)):
        h.update(f"{digest}:{label}\n".encode())
    h.update(json.dumps(caps.__dict__, sort_keys=True).encode())
    return h.hexdigest()


def is_malicious(label) -> bool:
    if isinstance(label, str):
        return label != "benign"
    return bool(label)


def build_vocab(
    files: Sequence[PeFile],
    labels: Sequence,
    caps: VocabCaps | None = None,
    ngram_source: Sequence[bool] | None = None,
) -> Vocabulary:
    """Document-frequency vocabulary over a training set.

    N-grams come from the mapped section bytes of files flagged by
    ``ngram_source`` (malicious files by default); strings, imports and
    exports come from every file.  Ties in document frequency resolve to the
    lexicographically smaller token.
    """
    caps = caps or VocabCaps()
    if len(files) != len(labels):
        raise ValueError("files and labels differ in length")
    source = [is_malicious(y) for y in labels] if ngram_source is None else list(ngram_source)
    if not files or not any(source):
        raise EmptyCorpus("vocabulary needs at least one malicious training file")

    per_n: dict[int, list[np.ndarray]] = {n: [] for n in NGRAM_SIZES}
    strings, imports, exports = Counter(), Counter(), Counter()
    for pe, src in zip(files, source):
        mapped = [s.mapped for s in pe.sections]
        if src:
            for n in NGRAM_SIZES:
                per_n[n].append(np.unique(np.concatenate([_ngram_codes(m, n) for m in mapped] or [np.empty(0, np.uint64)])))
        strings.update(set(s for m in mapped for s in extract_strings(m)))
        imports.update(set(import_tokens(pe) or ()))
        exports.update(set(export_tokens(pe) or ()))

    ns, codes, dfs = [], [], []
    for n in NGRAM_SIZES:
        if per_n[n]:
            u, c = np.unique(np.concatenate(per_n[n]), return_counts=True)
            ns.append(np.full(len(u), n))
            codes.append(u)
            dfs.append(c)
    ns, codes, dfs = np.concatenate(ns), np.concatenate(codes), np.concatenate(dfs)
    order = np.lexsort((codes, ns, -dfs))[: caps.ngrams]
    chosen = sorted((int(ns[i]), int(codes[i]).to_bytes(int(ns[i]), "big")) for i in order)

    return Vocabulary(
        ngram_tokens=tuple(chosen),
        string_tokens=_top_by_df(strings, caps.strings),
        import_tokens=_top_by_df(imports, caps.imports),
        export_tokens=_top_by_df(exports, caps.exports),
        built_from=corpus_fingerprint(files, labels, caps),
        caps=caps,
    )


@dataclass(frozen=True, eq=False)
class SectionFeatureSet:
    section_name: str
    ngram_vec: SparseVector
    histogram: np.ndarray
    string_vec: SparseVector

    def __eq__(self, other) -> bool:
        if not isinstance(other, SectionFeatureSet):
            return NotImplemented
        return (
            self.section_name == other.section_name
            and self.ngram_vec == other.ngram_vec
            and np.array_equal(self.histogram, other.histogram)
            and self.string_vec == other.string_vec
        )


def section_features(pe: PeFile, vocab: Vocabulary) -> list[SectionFeatureSet]:
    out = []
    for s in pe.sections:
        m = s.mapped
        out.append(SectionFeatureSet(s.header.display_name, ngram_counts(m, vocab), byte_histogram(m), string_counts(m, vocab)))
    return out


@dataclass(frozen=True, eq=False)
class MonotoneFeatureVector:
    global_histogram: np.ndarray
    import_present: bool
    import_vec: np.ndarray
    export_present: bool
    export_vec: np.ndarray
    string_vec: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate(
            [
                self.global_histogram,
                [int(self.import_present)],
                self.import_vec,
                [int(self.export_present)],
                self.export_vec,
                self.string_vec,
            ]
        ).astype(np.float64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MonotoneFeatureVector):
            return NotImplemented
        return np.array_equal(self.to_array(), other.to_array())


def monotone_feature_names(vocab: Vocabulary) -> list[str]:
    return (
        [f"hist[{v:#04x}]" for v in range(256)]
        + ["import_present"]
        + [f"import:{t}" for t in vocab.import_tokens]
        + ["export_present"]
        + [f"export:{t}" for t in vocab.export_tokens]
        + [f"string:{t}" for t in vocab.string_tokens]
    )


def monotone_layout(vocab: Vocabulary) -> dict[str, slice]:
    """Column ranges of each block inside ``MonotoneFeatureVector.to_array()``."""
    sizes = [
        ("histogram", 256),
        ("import_present", 1),
        ("imports", len(vocab.import_tokens)),
        ("export_present", 1),
        ("exports", len(vocab.export_tokens)),
        ("strings", len(vocab.string_tokens)),
    ]
    out, start = {}, 0
    for name, n in sizes:
        out[name] = slice(start, start + n)
        start += n
    return out


def monotone_features(pe: PeFile, vocab: Vocabulary, include_unmapped: bool = False) -> MonotoneFeatureVector:
    """Global counts over mapped section bytes.

    ``include_unmapped`` extends the histogram to slack and overlay bytes,
    which is only useful for checking growth under attacks on files that
    were not preprocessed.
    """
    hist = np.zeros(256, dtype=np.int64)
    strings = np.zeros(len(vocab.string_tokens), dtype=np.int64)
    for s in pe.sections:
        m = s.data if include_unmapped else s.mapped
        hist += byte_histogram(m)
        # strings are counted per section so adding a section only adds counts
        strings += _token_vector(extract_strings(s.mapped), vocab._string_index)
    if include_unmapped:
        hist += byte_histogram(pe.overlay)
    imps, exps = import_tokens(pe), export_tokens(pe)
    return MonotoneFeatureVector(
        global_histogram=hist,
        import_present=imps is not None,
        import_vec=_token_vector(imps or (), vocab._import_index),
        export_present=exps is not None,
        export_vec=_token_vector(exps or (), vocab._export_index),
        string_vec=strings,
    )


SPARSE_FIELDS = ("file_id", "block", "index", "count")


def feature_rows(file_id: str, sections: Sequence[SectionFeatureSet], mono: MonotoneFeatureVector) -> list[tuple]:
    """Sparse ``(file id, block, index, count)`` rows for one file.

    Section blocks are named ``s<k>.ngram``, ``s<k>.hist`` and ``s<k>.strings``;
    the monotone vector is block ``mono``.
    """
    rows = []
    for k, s in enumerate(sections):
        for block, vec in (("ngram", s.ngram_vec), ("hist", SparseVector.from_dense(s.histogram)), ("strings", s.string_vec)):
            rows += [(file_id, f"s{k}.{block}", int(i), int(v)) for i, v in zip(vec.indices, vec.values)]
    arr = mono.to_array()
    rows += [(file_id, "mono", int(i), int(arr[i])) for i in np.flatnonzero(arr)]
    return rows


def write_feature_rows(path, rows: Iterable[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SPARSE_FIELDS)
        w.writerows(rows)


def read_feature_rows(path) -> list[tuple[str, str, int, int]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != SPARSE_FIELDS:
            raise ValueError(f"unexpected sparse feature header {header}")
        return [(a, b, int(c), int(d)) for a, b, c, d in r]
