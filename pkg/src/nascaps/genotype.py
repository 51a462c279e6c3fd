"""Architecture genotype encoding and search-space operations.

A candidate network is an ordered tuple of 9-field layer descriptors plus two
genome-level terms: an optional skip-connection position and an input-resize
flag. This module owns random generation, structural validation, shape repair,
macro-layer expansion and the canonical text form. Hardware cost lives in
:mod:`nascaps.hwmodel`; search operators live in :mod:`nascaps.nsga`.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple


class LayerKind(Enum):
    """Layer vocabulary. Enum values double as canonical string tokens."""

    CONV = "conv"
    CONV_CAPS = "cconv"
    CONV_CAPS_3D = "cconv3d"
    CLASS_CAPS = "ccaps"
    CAPS_CELL = "ccell"
    FLAT_CAPS = "flat"


#: Kinds that carry capsule structure. FLAT_CAPS is neutral: it neither counts
#: as a capsule layer nor breaks a conv/capsule boundary.
CAPSULE_KINDS = frozenset(
    {LayerKind.CONV_CAPS, LayerKind.CONV_CAPS_3D, LayerKind.CLASS_CAPS, LayerKind.CAPS_CELL}
)

#: Kinds whose kernel slides over a spatial grid.
SPATIAL_KINDS = frozenset(
    {LayerKind.CONV, LayerKind.CONV_CAPS, LayerKind.CONV_CAPS_3D, LayerKind.CAPS_CELL}
)

#: Kinds using valid padding, which requires kernel_size <= n_in.
VALID_PADDED_KINDS = frozenset(
    {LayerKind.CONV, LayerKind.CONV_CAPS, LayerKind.CONV_CAPS_3D}
)

#: Side length the input is scaled to when a genotype's resize flag is set.
RESIZE_TARGET = 64


class GenotypeError(Exception):
    """Base class for genotype-level failures."""


class RejectedConfiguration(GenotypeError):
    """A genotype (or generation attempt) cannot be made structurally valid."""


class ParseError(GenotypeError):
    """Canonical-string parsing failed.

    Attributes:
        offset: byte offset of the offending segment within the input text.
        field: name of the field that failed to parse, when known.
    """

    def __init__(self, message: str, offset: int, field: Optional[str] = None):
        detail = f"{message} (byte offset {offset}"
        if field is not None:
            detail += f", field '{field}'"
        detail += ")"
        super().__init__(detail)
        self.offset = offset
        self.field = field


@dataclass(frozen=True)
class LayerDescriptor:
    """One layer of a candidate network.

    Spatial extents are single side lengths (square maps). ``caps_*`` are
    capsule dimensionalities; plain convolutions keep both at 1.
    """

    kind: LayerKind
    n_in: int
    ch_in: int
    caps_in: int
    kernel_size: int
    stride_size: int
    n_out: int
    ch_out: int
    caps_out: int

    @property
    def in_shape(self) -> Tuple[int, int, int]:
        return (self.n_in, self.ch_in, self.caps_in)

    @property
    def out_shape(self) -> Tuple[int, int, int]:
        return (self.n_out, self.ch_out, self.caps_out)


@dataclass(frozen=True)
class Genotype:
    """An ordered layer chain plus genome-level skip and resize terms.

    ``skip_position = i`` adds the output of layer ``i`` onto the output of
    layer ``i + 1`` (element-wise, so both output shapes must match).
    ``resize_flag`` means the network input is scaled to RESIZE_TARGET before
    layer 0; the first descriptor's ``n_in`` already reflects that.
    """

    layers: Tuple[LayerDescriptor, ...]
    skip_position: Optional[int] = None
    resize_flag: bool = False


@dataclass(frozen=True)
class Violation:
    """A single validation failure, tied to a layer index when applicable."""

    index: Optional[int]
    rule: str
    message: str

    def __str__(self) -> str:
        where = "genome" if self.index is None else f"layer {self.index}"
        return f"{where}: {self.message}"


@dataclass(frozen=True)
class SearchSpace:
    """Parameter domains and input geometry for one search problem."""

    kernel_choices: Tuple[int, ...] = (3, 5, 9)
    stride_choices: Tuple[int, ...] = (1, 2)
    ch_out_range: Tuple[int, int] = (1, 64)
    caps_out_range: Tuple[int, int] = (1, 64)
    max_layers: int = 8
    input_size: int = 28
    input_channels: int = 1
    num_classes: int = 10

    @staticmethod
    def for_dataset(dataset: str, **overrides) -> "SearchSpace":
        geometry = {
            "mnist": (28, 1),
            "fmnist": (28, 1),
            "svhn": (32, 3),
            "cifar10": (32, 3),
        }
        if dataset not in geometry:
            raise ValueError(f"unknown dataset '{dataset}'")
        n, ch = geometry[dataset]
        fields = {"input_size": n, "input_channels": ch, "num_classes": 10}
        fields.update(overrides)
        return SearchSpace(**fields)


# ---------------------------------------------------------------------------
# shape rules


def expected_n_out(kind: LayerKind, n_in: int, kernel: int, stride: int) -> int:
    """Output side length implied by a layer's kind and geometry."""
    if kind in VALID_PADDED_KINDS:
        if kernel > n_in:
            raise RejectedConfiguration(
                f"kernel {kernel} exceeds input size {n_in} for {kind.value}"
            )
        return (n_in - kernel) // stride + 1
    if kind is LayerKind.CAPS_CELL:
        # cells pad to keep the grid, then subsample by the stride
        return -(-n_in // stride)
    # CLASS_CAPS and FLAT_CAPS collapse the grid.
    return 1


def _flat_is_consistent(layer: LayerDescriptor) -> bool:
    lhs = layer.ch_out * layer.caps_out * layer.n_out * layer.n_out
    rhs = layer.ch_in * layer.caps_in * layer.n_in * layer.n_in
    return lhs == rhs


# ---------------------------------------------------------------------------
# validation


def structural_violations(layers: Sequence[LayerDescriptor]) -> List[Violation]:
    """Check the kind sequence only (used by crossover before repair)."""
    out: List[Violation] = []
    if not layers:
        out.append(Violation(None, "empty", "genotype has no layers"))
        return out
    if layers[0].kind is not LayerKind.CONV:
        out.append(Violation(0, "initial-conv", "first layer must be a plain convolution"))
    caps_positions = [i for i, l in enumerate(layers) if l.kind in CAPSULE_KINDS]
    if len(caps_positions) < 2:
        out.append(
            Violation(None, "min-capsule-layers", "at least two capsule layers required")
        )
    if caps_positions:
        first_caps, last_caps = caps_positions[0], caps_positions[-1]
        for i, l in enumerate(layers):
            if l.kind is LayerKind.CONV and first_caps < i < last_caps:
                out.append(
                    Violation(
                        i, "conv-between-capsules", "plain convolution between capsule layers"
                    )
                )
    return out


def validate(g: Genotype) -> List[Violation]:
    """Return all structural and shape violations; empty means valid.

    Domain-range membership (kernel/stride/channel choices) is a property of
    a SearchSpace, not of a genotype, and is enforced by generation, mutation
    and repair rather than here.
    """
    out = structural_violations(g.layers)
    if not g.layers:
        return out

    for i, l in enumerate(g.layers):
        fields = (
            l.n_in, l.ch_in, l.caps_in, l.kernel_size,
            l.stride_size, l.n_out, l.ch_out, l.caps_out,
        )
        if any(v < 1 for v in fields):
            out.append(Violation(i, "positive-fields", "all descriptor fields must be >= 1"))
            continue
        if l.kind is LayerKind.CONV and (l.caps_in != 1 or l.caps_out != 1):
            out.append(Violation(i, "conv-caps-dims", "plain convolution must have caps_in = caps_out = 1"))
        if l.kind in (LayerKind.CLASS_CAPS, LayerKind.FLAT_CAPS):
            if l.kernel_size != 1 or l.stride_size != 1:
                out.append(Violation(i, "unit-kernel", f"{l.kind.value} requires kernel = stride = 1"))
        if l.kind in VALID_PADDED_KINDS and l.kernel_size > l.n_in:
            out.append(Violation(i, "kernel-vs-input", f"kernel {l.kernel_size} exceeds input size {l.n_in}"))
            continue
        if l.kind is LayerKind.FLAT_CAPS:
            if not _flat_is_consistent(l):
                out.append(Violation(i, "flat-count", "reshape must preserve the total value count"))
        else:
            expected = expected_n_out(l.kind, l.n_in, l.kernel_size, l.stride_size)
            if l.n_out != expected:
                out.append(
                    Violation(i, "n-out", f"n_out {l.n_out} does not match computed {expected}")
                )
        if i + 1 < len(g.layers) and l.out_shape != g.layers[i + 1].in_shape:
            out.append(
                Violation(
                    i + 1,
                    "shape-chain",
                    f"input {g.layers[i + 1].in_shape} does not match predecessor output {l.out_shape}",
                )
            )

    if g.skip_position is not None:
        s = g.skip_position
        if not (0 <= s <= len(g.layers) - 2):
            out.append(Violation(None, "skip-range", f"skip position {s} out of range"))
        elif g.layers[s].out_shape != g.layers[s + 1].out_shape:
            out.append(
                Violation(
                    None,
                    "skip-shape",
                    f"skip merge shapes differ: {g.layers[s].out_shape} vs {g.layers[s + 1].out_shape}",
                )
            )
    return out


# ---------------------------------------------------------------------------
# random generation


def random_genotype(space: SearchSpace, rng: random.Random) -> Genotype:
    """Sample a structurally valid genotype from the space.

    The construction is front-to-back: one or more plain convolutions, one or
    more intermediate capsule layers (optionally followed by a flattening
    reshape), then a final class-capsule layer. Dead ends (e.g. the feature
    map shrinking below every kernel choice) are retried; after 64 failed
    attempts a RejectedConfiguration is raised.

    Args:
        space: parameter domains and input geometry.
        rng: source of randomness; pass a seeded ``random.Random`` for
            reproducible draws.
    """
    for _ in range(64):
        g = _try_random_genotype(space, rng)
        if g is not None:
            return g
    raise RejectedConfiguration("could not sample a valid genotype in 64 attempts")


def _try_random_genotype(space: SearchSpace, rng: random.Random) -> Optional[Genotype]:
    resize = rng.random() < 0.5
    n = RESIZE_TARGET if resize else space.input_size
    ch, caps = space.input_channels, 1

    total = rng.randint(3, space.max_layers)
    n_conv = rng.randint(1, total - 2)
    n_middle = total - n_conv - 1
    use_flat = n_middle >= 2 and rng.random() < 0.3

    layers: List[LayerDescriptor] = []
    for _ in range(n_conv):
        kernels = [k for k in space.kernel_choices if k <= n]
        if not kernels:
            return None
        k = rng.choice(kernels)
        s = rng.choice(space.stride_choices)
        ch_out = rng.randint(*space.ch_out_range)
        n_out = (n - k) // s + 1
        layers.append(LayerDescriptor(LayerKind.CONV, n, ch, caps, k, s, n_out, ch_out, 1))
        n, ch, caps = n_out, ch_out, 1

    caps_middle = n_middle - 1 if use_flat else n_middle
    for _ in range(caps_middle):
        kernels = [k for k in space.kernel_choices if k <= n]
        if kernels:
            kinds = (LayerKind.CONV_CAPS, LayerKind.CONV_CAPS_3D, LayerKind.CAPS_CELL)
            k_pool = kernels
        else:
            # only same-padded cells survive on a grid smaller than any kernel
            kinds = (LayerKind.CAPS_CELL,)
            k_pool = [min(space.kernel_choices)]
        kind = rng.choice(kinds)
        k = rng.choice(k_pool)
        s = rng.choice(space.stride_choices)
        ch_out = rng.randint(*space.ch_out_range)
        caps_out = rng.randint(*space.caps_out_range)
        n_out = expected_n_out(kind, n, k, s)
        layers.append(LayerDescriptor(kind, n, ch, caps, k, s, n_out, ch_out, caps_out))
        n, ch, caps = n_out, ch_out, caps_out

    if use_flat:
        layers.append(
            LayerDescriptor(LayerKind.FLAT_CAPS, n, ch, caps, 1, 1, 1, ch * n * n, caps)
        )
        n, ch, caps = 1, ch * n * n, caps

    caps_out = rng.randint(*space.caps_out_range)
    layers.append(
        LayerDescriptor(
            LayerKind.CLASS_CAPS, n, ch, caps, 1, 1, 1, space.num_classes, caps_out
        )
    )

    skip = None
    candidates = [
        i for i in range(len(layers) - 1) if layers[i].out_shape == layers[i + 1].out_shape
    ]
    if candidates and rng.random() < 0.5:
        skip = rng.choice(candidates)

    g = Genotype(tuple(layers), skip, resize)
    return g if not validate(g) else None


# ---------------------------------------------------------------------------
# repair


def _snap(value: int, choices: Sequence[int]) -> int:
    # nearest allowed choice, preferring the smaller one on ties
    return min(sorted(choices), key=lambda c: abs(c - value))


def _clamp(value: int, bounds: Tuple[int, int]) -> int:
    lo, hi = bounds
    return max(lo, min(hi, value))


def repair(g: Genotype, space: SearchSpace) -> Genotype:
    """Make a genotype shape-consistent, preserving layer kinds.

    Walks front to back recomputing every input triple from the predecessor's
    output, clamps free parameters into the space's domains, reduces kernels
    that exceed their input grid to the largest fitting choice, rewrites
    inconsistent reshapes canonically, and drops a skip connection whose merge
    shapes no longer match. Kind-sequence problems are not repairable and
    raise RejectedConfiguration. A genotype that is already consistent and
    in-domain is returned unchanged.
    """
    if structural_violations(g.layers):
        raise RejectedConfiguration(
            "; ".join(str(v) for v in structural_violations(g.layers))
        )

    first = g.layers[0]
    cur = first.in_shape
    new_layers: List[LayerDescriptor] = []
    for l in g.layers:
        n_in, ch_in, caps_in = cur
        kernel, stride = l.kernel_size, l.stride_size
        ch_out, caps_out = l.ch_out, l.caps_out

        if l.kind in SPATIAL_KINDS:
            kernel = _snap(kernel, space.kernel_choices)
            stride = _snap(stride, space.stride_choices)
            if kernel > n_in:
                fitting = [k for k in space.kernel_choices if k <= n_in]
                if fitting:
                    kernel = max(fitting)
                elif l.kind is LayerKind.CAPS_CELL:
                    kernel = min(space.kernel_choices)  # same padding tolerates it
                else:
                    raise RejectedConfiguration(
                        f"no kernel choice fits input size {n_in} for {l.kind.value}"
                    )
            ch_out = _clamp(ch_out, space.ch_out_range)
        else:
            kernel, stride = 1, 1

        if l.kind is LayerKind.CONV:
            caps_out = 1
        elif l.kind is LayerKind.FLAT_CAPS:
            keep = replace(
                l, n_in=n_in, ch_in=ch_in, caps_in=caps_in, kernel_size=1, stride_size=1
            )
            if not _flat_is_consistent(keep):
                keep = replace(
                    keep, n_out=1, ch_out=ch_in * n_in * n_in, caps_out=caps_in
                )
            new_layers.append(keep)
            cur = keep.out_shape
            continue
        else:
            caps_out = _clamp(caps_out, space.caps_out_range)
            if l.kind is LayerKind.CLASS_CAPS:
                ch_out = _clamp(l.ch_out, space.ch_out_range)

        n_out = expected_n_out(l.kind, n_in, kernel, stride)
        new_layers.append(
            LayerDescriptor(l.kind, n_in, ch_in, caps_in, kernel, stride, n_out, ch_out, caps_out)
        )
        cur = (n_out, ch_out, caps_out)

    skip = g.skip_position
    if skip is not None:
        in_range = 0 <= skip <= len(new_layers) - 2
        if not in_range or new_layers[skip].out_shape != new_layers[skip + 1].out_shape:
            skip = None

    repaired = Genotype(tuple(new_layers), skip, g.resize_flag)
    remaining = validate(repaired)
    if remaining:
        raise RejectedConfiguration("; ".join(str(v) for v in remaining))
    return g if repaired == g else repaired


# ---------------------------------------------------------------------------
# macro expansion


def expand(g: Genotype) -> List[LayerDescriptor]:
    """Flatten macro layers into primitive descriptors.

    A CAPS_CELL becomes three capsule convolutions: one parallel branch plus
    a two-step sequence, all sharing the cell's kernel and output shape (the
    branch outputs merge by addition, which costs nothing extra here). Other
    kinds pass through unchanged.
    """
    out: List[LayerDescriptor] = []
    for l in g.layers:
        if l.kind is not LayerKind.CAPS_CELL:
            out.append(l)
            continue
        branch = LayerDescriptor(
            LayerKind.CONV_CAPS, l.n_in, l.ch_in, l.caps_in,
            l.kernel_size, l.stride_size, l.n_out, l.ch_out, l.caps_out,
        )
        seq_first = branch
        seq_second = LayerDescriptor(
            LayerKind.CONV_CAPS, l.n_out, l.ch_out, l.caps_out,
            l.kernel_size, 1, l.n_out, l.ch_out, l.caps_out,
        )
        out.extend([branch, seq_first, seq_second])
    return out


# ---------------------------------------------------------------------------
# canonical text form


def serialize(g: Genotype) -> str:
    """Render the canonical one-line form (layer records, skip, resize)."""
    parts = [
        ",".join(
            str(v)
            for v in (
                l.kind.value, l.n_in, l.ch_in, l.caps_in, l.kernel_size,
                l.stride_size, l.n_out, l.ch_out, l.caps_out,
            )
        )
        for l in g.layers
    ]
    skip = "none" if g.skip_position is None else str(g.skip_position)
    parts.append(f"skip={skip}")
    parts.append(f"resize={1 if g.resize_flag else 0}")
    return ";".join(parts)


_FIELD_NAMES = (
    "kind", "n_in", "ch_in", "caps_in", "kernel_size",
    "stride_size", "n_out", "ch_out", "caps_out",
)
_KIND_BY_TOKEN = {k.value: k for k in LayerKind}


def deserialize(text: str) -> Genotype:
    """Parse the canonical form produced by :func:`serialize`.

    Raises ParseError (with byte offset and field name) on malformed input.
    Semantic validity is not checked here; run :func:`validate` on the result.
    """
    segments: List[Tuple[int, str]] = []
    offset = 0
    for seg in text.split(";"):
        segments.append((offset, seg))
        offset += len(seg.encode("utf-8")) + 1

    if len(segments) < 3:
        raise ParseError("expected layer records plus skip= and resize= terms", 0)

    (skip_off, skip_seg), (resize_off, resize_seg) = segments[-2], segments[-1]
    if not skip_seg.startswith("skip="):
        raise ParseError("expected 'skip=<index|none>'", skip_off, "skip")
    if not resize_seg.startswith("resize="):
        raise ParseError("expected 'resize=<0|1>'", resize_off, "resize")

    skip_text = skip_seg[len("skip="):]
    if skip_text == "none":
        skip: Optional[int] = None
    else:
        try:
            skip = int(skip_text)
        except ValueError:
            raise ParseError(f"bad skip value '{skip_text}'", skip_off, "skip") from None

    resize_text = resize_seg[len("resize="):]
    if resize_text not in ("0", "1"):
        raise ParseError(f"bad resize value '{resize_text}'", resize_off, "resize")
    resize = resize_text == "1"

    layers: List[LayerDescriptor] = []
    for seg_off, seg in segments[:-2]:
        fields = seg.split(",")
        if len(fields) != 9:
            raise ParseError(
                f"expected 9 comma-separated fields, got {len(fields)}", seg_off
            )
        token = fields[0]
        if token not in _KIND_BY_TOKEN:
            raise ParseError(f"unknown layer kind '{token}'", seg_off, "kind")
        values: List[int] = []
        for name, raw in zip(_FIELD_NAMES[1:], fields[1:]):
            try:
                values.append(int(raw))
            except ValueError:
                raise ParseError(f"non-integer value '{raw}'", seg_off, name) from None
        layers.append(LayerDescriptor(_KIND_BY_TOKEN[token], *values))

    return Genotype(tuple(layers), skip, resize)


def genotype_id(g: Genotype) -> str:
    """Stable 16-hex-digit identifier derived from the canonical form."""
    return hashlib.sha256(serialize(g).encode("utf-8")).hexdigest()[:16]
