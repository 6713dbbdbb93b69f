"""
Robust and naive detectors under attack
=======================================

A scaled-down version of the acceptance experiment: train both detectors
on three epochs of a synthetic corpus, then score the held-out epoch with
its malicious files mutated.  Takes about a minute.
"""

import numpy as np

from robustpe.attacks import MutationRecipe, compose, harvest_donors
from robustpe.corpus_gen import detection_config, iter_corpus
from robustpe.metrics import evaluate_binary, reports_table
from robustpe.pe_format import parse_pe, serialize_pe
from robustpe.pipeline import NaiveHistogramDetector, PipelineConfig, RobustDetector

rows = list(iter_corpus(detection_config(300, 300, seed=2024)))
train = [(r, d) for r, d in rows if r.epoch <= 2]
test = [(r, d) for r, d in rows if r.epoch == 3]
y = np.array([r.label != "benign" for r, _ in test])
donors = harvest_donors([d for r, d in train if r.label == "benign"])
print(f"{len(train)} training files, {len(test)} test files")


def mutate(recipes):
    return [
        serialize_pe(compose(parse_pe(d)[0], recipes(7 + i), donors)) if bad else d
        for i, ((_, d), bad) in enumerate(zip(test, y))
    ]


settings = {
    "clean": [d for _, d in test],
    "header": mutate(lambda s: [MutationRecipe("header_strip", s)]),
    "padding": mutate(lambda s: [MutationRecipe("pad", s, pad_bytes=32768, pad_source="benign")]),
    "inter-section": mutate(lambda s: [MutationRecipe("intersect", s)]),
    "injection": mutate(lambda s: [MutationRecipe("inject", s, target_section_count=10)]),
}

files, labels = [d for _, d in train], [r.label for r, _ in train]
robust = RobustDetector.fit(files, labels, PipelineConfig())
naive = NaiveHistogramDetector.fit(files, labels)

for name, det in (("robust", robust), ("naive byte histogram", naive)):
    print(f"\n{name}")
    print(reports_table([evaluate_binary(s, det.score(fs), y) for s, fs in settings.items()]))
