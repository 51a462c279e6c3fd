"""Bundled reference architectures in canonical genotype form.

``capsnet`` is the classic three-stage capsule network for 28x28 grayscale
input (conv, primary capsules, class capsules). ``deepcaps`` is the deeper
skip-connected design in its compact cell form: one stem convolution, four
capsule cells and a class-capsule head, run on inputs resized to 64x64. Its
original concatenation skip is not expressible as an additive same-shape
merge, so the preset carries no skip term (the cost model charges nothing
for skips either way).
"""

from __future__ import annotations

from typing import Dict

from .genotype import Genotype, deserialize

CAPSNET = "conv,28,1,1,9,1,20,256,1;cconv,20,256,1,9,2,6,32,8;ccaps,6,32,8,1,1,1,10,16;skip=none;resize=0"

DEEPCAPS = (
    "conv,64,3,1,3,1,62,128,1;"
    "ccell,62,128,1,3,2,31,32,4;"
    "ccell,31,32,4,3,2,16,32,8;"
    "ccell,16,32,8,3,2,8,32,8;"
    "ccell,8,32,8,3,2,4,32,8;"
    "ccaps,4,32,8,1,1,1,10,32;"
    "skip=none;resize=1"
)

PRESETS: Dict[str, str] = {
    "capsnet": CAPSNET,
    "deepcaps": DEEPCAPS,
}

# Reference measurements for the two presets on the modeled accelerator:
# (latency_ms, energy_mj, memory_kib). Used as calibration targets and in
# sanity checks; accuracy is not part of the hardware model.
REFERENCE_COSTS: Dict[str, tuple] = {
    "capsnet": (1.82, 88.80, 8573.0),
    "deepcaps": (4.29, 36.30, 9052.0),
}


def load_preset(name: str) -> Genotype:
    try:
        text = PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown preset '{name}' (available: {', '.join(sorted(PRESETS))})"
        ) from None
    return deserialize(text)
