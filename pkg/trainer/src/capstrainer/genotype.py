"""Parser for the canonical genotype wire format.

A genotype is a semicolon-separated list of nine-field layer records
followed by ``skip=<int|none>`` and ``resize=<0|1>``. This is the same
string the search engine emits; only the syntax lives here — whether the
described network is actually buildable is decided layer by layer during
construction.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

KINDS = ("conv", "cconv", "cconv3d", "ccell", "ccaps", "flat")

FIELD_NAMES = (
    "kind", "n_in", "ch_in", "caps_in",
    "kernel", "stride", "n_out", "ch_out", "caps_out",
)


class GenotypeError(Exception):
    """The genotype string does not follow the canonical format."""


@dataclass(frozen=True)
class Layer:
    kind: str
    n_in: int
    ch_in: int
    caps_in: int
    kernel: int
    stride: int
    n_out: int
    ch_out: int
    caps_out: int


@dataclass(frozen=True)
class ParsedGenotype:
    layers: Tuple[Layer, ...]
    skip: Optional[int]
    resize: bool


def parse_genotype(text: str) -> ParsedGenotype:
    segments = [s for s in text.strip().split(";") if s]
    if len(segments) < 3:
        raise GenotypeError("expected layer records plus skip= and resize= terms")
    skip_term, resize_term = segments[-2], segments[-1]
    if not skip_term.startswith("skip=") or not resize_term.startswith("resize="):
        raise GenotypeError("genotype must end with skip=<pos|none>;resize=<0|1>")

    layers = []
    for seg in segments[:-2]:
        fields = seg.split(",")
        if len(fields) != 9:
            raise GenotypeError(f"layer record {seg!r} has {len(fields)} fields, expected 9")
        kind = fields[0]
        if kind not in KINDS:
            raise GenotypeError(f"unknown layer kind {kind!r}")
        try:
            values = [int(f) for f in fields[1:]]
        except ValueError as exc:
            raise GenotypeError(f"non-integer field in {seg!r}") from exc
        if any(v < 1 for v in values):
            raise GenotypeError(f"non-positive field in {seg!r}")
        layers.append(Layer(kind, *values))
    if not layers:
        raise GenotypeError("genotype has no layers")

    raw_skip = skip_term[len("skip="):]
    if raw_skip == "none":
        skip: Optional[int] = None
    else:
        try:
            skip = int(raw_skip)
        except ValueError as exc:
            raise GenotypeError(f"bad skip term {raw_skip!r}") from exc
        if not 0 <= skip <= len(layers) - 2:
            raise GenotypeError(f"skip position {skip} out of range")

    raw_resize = resize_term[len("resize="):]
    if raw_resize not in ("0", "1"):
        raise GenotypeError(f"bad resize term {raw_resize!r}")

    return ParsedGenotype(tuple(layers), skip, raw_resize == "1")
