"""
Evasion attacks and what preprocessing undoes
=============================================

Mutate one synthetic executable with each attack, then run the three
preprocessing passes and compare bytes against the preprocessed original.
"""

from robustpe.attacks import MutationRecipe, apply_recipe, harvest_donors
from robustpe.corpus_gen import MALWARE_SIGNAL, GenSpec, generate_pe
from robustpe.pe_format import parse_pe, serialize_pe
from robustpe.preprocess import preprocess_all

# one malicious file, and a few benign ones to borrow padding and sections from
original = generate_pe(GenSpec(seed=3, label="malicious", signal=MALWARE_SIGNAL))
donors = harvest_donors([generate_pe(GenSpec(seed=s)) for s in range(10, 20)])
pe, _ = parse_pe(original)
print(f"original: {len(original)} bytes, {len(pe.sections)} sections, overlay {len(pe.overlay)}")

reference = serialize_pe(preprocess_all(pe))

recipes = [
    MutationRecipe("header_strip", 1),
    MutationRecipe("intersect", 1),
    MutationRecipe("pad", 1, pad_bytes=8192, pad_source="benign"),
    MutationRecipe("inject", 1, target_section_count=8),
]

# header, slack and overlay changes disappear; an injected section stays
for recipe in recipes:
    attacked = apply_recipe(pe, recipe, donors)
    raw = serialize_pe(attacked)
    cleaned = serialize_pe(preprocess_all(attacked))
    print(
        f"{recipe.tag():<16} size {len(raw):>6}  changed {raw != original!s:<5}"
        f"  equal after preprocessing {cleaned == reference}"
    )
