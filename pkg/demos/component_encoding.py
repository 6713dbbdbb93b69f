"""
Per-section features and the graph encoding
===========================================

Each section becomes a three-node clique (n-grams, byte histogram,
strings).  Injecting sections appends cliques and leaves the old ones
alone, and with non-negative weights the pooled encoding can only grow.
"""

import numpy as np

from robustpe.attacks import MutationRecipe, apply_recipe, harvest_donors
from robustpe.corpus_gen import detection_config, iter_corpus
from robustpe.features import VocabCaps, build_vocab, section_features
from robustpe.graph_encoder import GatConfig, encode_many, raw_graph, train_gat
from robustpe.pe_format import parse_pe
from robustpe.preprocess import preprocess_all

rows = list(iter_corpus(detection_config(60, 60, seed=5)))
pes = [preprocess_all(parse_pe(d)[0]) for _, d in rows]
labels = [r.label for r, _ in rows]
vocab = build_vocab(pes, labels, VocabCaps(ngrams=512, strings=128))
print(f"vocabulary: {len(vocab.ngram_tokens)} n-grams, {len(vocab.string_tokens)} strings")

# train the encoder with a small probe head on top
graphs = [raw_graph(section_features(p, vocab)) for p in pes]
y = [int(l != "benign") for l in labels]
result = train_gat(graphs, y, GatConfig(d_in=32, d_out=8, epochs=150), vocab.built_from)
print(f"loss {result.losses[0]:.4f} -> {result.final_loss:.4f}, min parameter {result.params.min_entry():.3g}")

# inject benign sections into one malicious file
donors = harvest_donors([d for r, d in rows if r.label == "benign"])
victim = next(p for p, l in zip(pes, labels) if l == "malicious")
injected = apply_recipe(victim, MutationRecipe("inject", 0, target_section_count=len(victim.sections) + 4), donors)

before = section_features(victim, vocab)
after = section_features(injected, vocab)
print(f"sections {len(before)} -> {len(after)}, old section sets unchanged: {after[: len(before)] == before}")

enc = encode_many([raw_graph(before), raw_graph(after)], result.params)
print(f"encoding never decreases: {bool(np.all(enc[1] >= enc[0]))}")
