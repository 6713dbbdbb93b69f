"""End-to-end detectors and their on-disk bundles.

``RobustDetector`` preprocesses every file, builds the vocabulary, trains
the graph encoder, and fits a GBDT on ``[monotone features | encoding]``
with a +1 constraint on every column.  ``NaiveHistogramDetector`` is the
contrast case: a whole-file normalised byte histogram, no preprocessing and
no constraints.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detector import Dataset, GbdtConfig, GbdtModel, OneVsRest, train_gbdt
from .errors import VocabularyMismatch
from .features import (
    VocabCaps,
    Vocabulary,
    build_vocab,
    byte_histogram,
    monotone_feature_names,
    monotone_features,
    section_features,
)
from .graph_encoder import GatConfig, GatParams, encode_many, raw_graph, train_gat
from .pe_format import PeFile, parse_pe
from .preprocess import preprocess_all

BUNDLE_VERSION = 1
TASKS = ("detection", "family")


@dataclass(frozen=True)
class PipelineConfig:
    caps: VocabCaps = field(default_factory=VocabCaps)
    gat: GatConfig = field(default_factory=GatConfig)
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)
    task: str = "detection"
    train_max_epoch: int = 2
    workers: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        known = {"vocab", "caps", "gat", "gbdt", "task", "train_max_epoch", "workers"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(
            caps=VocabCaps(**d.get("vocab", d.get("caps", {}))),
            gat=GatConfig(**d.get("gat", {})),
            gbdt=GbdtConfig(**d.get("gbdt", {})),
            task=d.get("task", "detection"),
            train_max_epoch=int(d.get("train_max_epoch", 2)),
            workers=int(d.get("workers", 1)),
        )


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def load_clean(data: bytes) -> PeFile:
    """Parse and run every preprocessing pass."""
    return preprocess_all(parse_pe(data)[0])


def _detection_labels(targets: Sequence[str]) -> np.ndarray:
    return np.array([t != "benign" for t in targets], dtype=int)


@dataclass(eq=False)
class RobustDetector:
    vocab: Vocabulary
    gat: GatParams
    model: GbdtModel | OneVsRest
    task: str = "detection"
    classes: list[str] = field(default_factory=list)
    config: PipelineConfig = field(default_factory=PipelineConfig)
    train_log: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, files: Sequence[bytes], targets: Sequence[str], config: PipelineConfig | None = None) -> RobustDetector:
        config = config or PipelineConfig()
        pes = _map(load_clean, list(files), config.workers)
        targets = [str(t) for t in targets]
        vocab = build_vocab(pes, targets, config.caps)
        sections = [section_features(pe, vocab) for pe in pes]
        graphs = [raw_graph(s) for s in sections]
        gat_labels = _detection_labels(targets) if config.task == "detection" else targets
        gat = train_gat(graphs, list(gat_labels), config.gat, vocab.built_from)
        mono = np.stack([monotone_features(pe, vocab).to_array() for pe in pes])
        x = np.hstack([mono, encode_many(graphs, gat.params)])
        names = monotone_feature_names(vocab) + [f"enc[{i}]" for i in range(x.shape[1] - mono.shape[1])]
        mask = np.ones(x.shape[1], dtype=np.int8)
        log = {"gat_loss_first": gat.losses[0], "gat_loss_final": gat.final_loss, "n_train": len(pes)}
        if config.task == "detection":
            data = Dataset(x, _detection_labels(targets), feature_names=names, monotone_mask=mask)
            model = train_gbdt(data, config.gbdt)
            classes = ["benign", "malicious"]
        else:
            data = Dataset(x, np.array(targets), feature_names=names, monotone_mask=mask)
            model = OneVsRest.train(data, config.gbdt)
            classes = model.classes
        return cls(vocab, gat.params, model, config.task, classes, config, log)

    def featurize_clean(self, pes: Sequence[PeFile]) -> np.ndarray:
        if self.gat.vocab_fingerprint != self.vocab.built_from:
            raise VocabularyMismatch("encoder parameters do not belong to this vocabulary")
        graphs = [raw_graph(section_features(pe, self.vocab)) for pe in pes]
        mono = np.stack([monotone_features(pe, self.vocab).to_array() for pe in pes])
        return np.hstack([mono, encode_many(graphs, self.gat)])

    def featurize(self, files: Sequence[bytes]) -> np.ndarray:
        return self.featurize_clean(_map(load_clean, list(files), self.config.workers))

    def score(self, files: Sequence[bytes]) -> np.ndarray:
        """Malicious probability (detection) or per-class scores (family)."""
        x = self.featurize(files)
        if isinstance(self.model, OneVsRest):
            return self.model.predict_proba(x)
        return self.model.predict(x)

    def predict(self, files: Sequence[bytes]) -> list[str]:
        s = self.score(files)
        if s.ndim == 2:
            return [self.classes[i] for i in np.argmax(s, axis=1)]
        return ["malicious" if v >= 0.5 else "benign" for v in s]

    # ---------------------------------------------------------------- bundle

    def save(self, directory: str | Path) -> dict:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {
            "vocab.json": self.vocab.to_json(),
            "gat.json": self.gat.to_json(),
            "gbdt.txt": self.model.dump(),
        }
        for name, text in files.items():
            (directory / name).write_text(text)
        meta = {
            "version": BUNDLE_VERSION,
            "task": self.task,
            "classes": self.classes,
            "vocab_fingerprint": self.vocab.built_from,
            "config": self.config.to_dict(),
            "sha256": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in files.items()},
        }
        (directory / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return meta

    @classmethod
    def load(cls, directory: str | Path) -> RobustDetector:
        directory = Path(directory)
        meta = json.loads((directory / "bundle.json").read_text())
        if meta.get("version") != BUNDLE_VERSION:
            raise ValueError(f"unsupported bundle version {meta.get('version')!r}")
        texts = {name: (directory / name).read_text() for name in meta["sha256"]}
        for name, digest in meta["sha256"].items():
            if hashlib.sha256(texts[name].encode()).hexdigest() != digest:
                raise ValueError(f"bundle file {name} does not match its recorded hash")
        vocab = Vocabulary.from_json(texts["vocab.json"])
        gat = GatParams.from_json(texts["gat.json"])
        if gat.vocab_fingerprint != vocab.built_from or meta["vocab_fingerprint"] != vocab.built_from:
            raise VocabularyMismatch("bundle components were built from different vocabularies")
        model = OneVsRest.load(texts["gbdt.txt"]) if meta["task"] == "family" else GbdtModel.load(texts["gbdt.txt"])
        cfg = meta["config"]
        config = PipelineConfig(
            caps=VocabCaps(**cfg["caps"]),
            gat=GatConfig(**cfg["gat"]),
            gbdt=GbdtConfig(**cfg["gbdt"]),
            task=cfg["task"],
            train_max_epoch=cfg["train_max_epoch"],
            workers=cfg.get("workers", 1),
        )
        return cls(vocab, gat, model, meta["task"], meta["classes"], config)


def naive_features(data: bytes) -> np.ndarray:
    """Normalised byte histogram of the whole file, overlay included."""
    hist = byte_histogram(data).astype(np.float64)
    return hist / max(len(data), 1)


@dataclass(eq=False)
class NaiveHistogramDetector:
    model: GbdtModel | OneVsRest
    classes: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, files: Sequence[bytes], targets: Sequence[str], task: str = "detection", config: GbdtConfig | None = None):
        x = np.stack([naive_features(b) for b in files])
        targets = [str(t) for t in targets]
        if task == "detection":
            return cls(train_gbdt(Dataset(x, _detection_labels(targets)), config), ["benign", "malicious"])
        model = OneVsRest.train(Dataset(x, np.array(targets)), config)
        return cls(model, model.classes)

    def score(self, files: Sequence[bytes]) -> np.ndarray:
        x = np.stack([naive_features(b) for b in files])
        if isinstance(self.model, OneVsRest):
            return self.model.predict_proba(x)
        return self.model.predict(x)

    def predict(self, files: Sequence[bytes]) -> list[str]:
        s = self.score(files)
        if s.ndim == 2:
            return [self.classes[i] for i in np.argmax(s, axis=1)]
        return ["malicious" if v >= 0.5 else "benign" for v in s]
