"""Realize a parsed genotype as a torch network.

Spatial capsule maps travel through the network as five-axis tensors
[batch, channels, capsule_dim, height, width]; plain convolutional layers
are the capsule_dim == 1 special case. The class-capsule head collapses
the map into one capsule per class via dynamic routing and returns
[batch, classes, capsule_dim] vectors whose lengths are the class scores.
"""

import hashlib
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .genotype import Layer, ParsedGenotype, parse_genotype

RESIZE_SIDE = 64
ROUTING_ITERATIONS = 3


class BuildError(Exception):
    """The genotype parses but cannot be realized as a network."""


def squash(t: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Length-bounding capsule nonlinearity.

    y = x * |x| / (1 + |x|)^2: direction preserved, output length
    (|x| / (1 + |x|))^2 always in [0, 1), zero maps to zero. Written
    without dividing by |x| so the zero vector needs no special case.
    """
    norm = t.norm(dim=dim, keepdim=True)
    return t * norm / (1.0 + norm).pow(2)


def margin_loss(
    lengths: torch.Tensor,
    target: torch.Tensor,
    m_pos: float = 0.9,
    m_neg: float = 0.1,
    lam: float = 0.5,
) -> torch.Tensor:
    one_hot = F.one_hot(target, lengths.size(1)).to(lengths.dtype)
    present = F.relu(m_pos - lengths).pow(2)
    absent = F.relu(lengths - m_neg).pow(2)
    return (one_hot * present + lam * (1.0 - one_hot) * absent).sum(dim=1).mean()


def _pad_same(t: torch.Tensor, kernel: int, stride: int) -> torch.Tensor:
    # pad so the spatial output is ceil(n / stride), the way cell layers
    # are chained in the genotype shape arithmetic
    h, w = t.size(-2), t.size(-1)
    ph = max(0, (-(-h // stride) - 1) * stride + kernel - h)
    pw = max(0, (-(-w // stride) - 1) * stride + kernel - w)
    return F.pad(t, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2))


class _ConvBlock(nn.Module):
    def __init__(self, layer: Layer):
        super().__init__()
        self.conv = nn.Conv2d(layer.ch_in, layer.ch_out, layer.kernel, layer.stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.conv(x[:, :, 0]))
        return y.unsqueeze(2)


class _CapsConv(nn.Module):
    def __init__(self, layer: Layer):
        super().__init__()
        self.out_channels = layer.ch_out
        self.out_caps = layer.caps_out
        self.conv = nn.Conv2d(
            layer.ch_in * layer.caps_in,
            layer.ch_out * layer.caps_out,
            layer.kernel,
            layer.stride,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, ch, caps, h, w = x.shape
        y = self.conv(x.reshape(b, ch * caps, h, w))
        y = y.reshape(b, self.out_channels, self.out_caps, y.size(-2), y.size(-1))
        return squash(y, dim=2)


class _CapsConv3d(nn.Module):
    """Volumetric capsule convolution: the capsule axis joins the kernel.

    The kernel depth is clipped to the incoming capsule dimensionality and
    the depth stride collapses that axis entirely, so one 3-D convolution
    emits the full [channels x capsule_dim] output plane.
    """

    def __init__(self, layer: Layer):
        super().__init__()
        self.out_channels = layer.ch_out
        self.out_caps = layer.caps_out
        depth = min(layer.kernel, layer.caps_in)
        self.conv = nn.Conv3d(
            layer.ch_in,
            layer.ch_out * layer.caps_out,
            (depth, layer.kernel, layer.kernel),
            (layer.caps_in, layer.stride, layer.stride),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv(x)  # [B, ch_out*caps_out, 1, H', W']
        y = y.reshape(
            x.size(0), self.out_channels, self.out_caps, y.size(-2), y.size(-1)
        )
        return squash(y, dim=2)


class _CapsCell(nn.Module):
    """Three same-padded capsule convolutions: one in parallel with two in
    sequence, merged by addition."""

    def __init__(self, layer: Layer):
        super().__init__()
        self.out_channels = layer.ch_out
        self.out_caps = layer.caps_out
        self.kernel = layer.kernel
        self.stride = layer.stride
        in_width = layer.ch_in * layer.caps_in
        out_width = layer.ch_out * layer.caps_out
        self.parallel = nn.Conv2d(in_width, out_width, layer.kernel, layer.stride)
        self.seq_first = nn.Conv2d(in_width, out_width, layer.kernel, layer.stride)
        self.seq_second = nn.Conv2d(out_width, out_width, layer.kernel, 1)

    def _caps_view(self, t: torch.Tensor, b: int) -> torch.Tensor:
        return t.reshape(b, self.out_channels, self.out_caps, t.size(-2), t.size(-1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, ch, caps, h, w = x.shape
        flat = x.reshape(b, ch * caps, h, w)
        p = squash(self._caps_view(
            self.parallel(_pad_same(flat, self.kernel, self.stride)), b), dim=2)
        s = squash(self._caps_view(
            self.seq_first(_pad_same(flat, self.kernel, self.stride)), b), dim=2)
        s = squash(self._caps_view(
            self.seq_second(_pad_same(s.reshape(b, -1, s.size(-2), s.size(-1)),
                                      self.kernel, 1)), b), dim=2)
        return squash(p + s, dim=2)


class _FlatCaps(nn.Module):
    def __init__(self, layer: Layer):
        super().__init__()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, ch, caps, h, w = x.shape
        return x.permute(0, 1, 3, 4, 2).reshape(b, ch * h * w, caps, 1, 1)


class _ClassCaps(nn.Module):
    """Fully-connected capsules with dynamic routing.

    Coupling logits start at zero; each iteration softmaxes them over the
    output capsules (so every input capsule's couplings sum to one),
    forms the weighted vote sum, squashes it, and reinforces agreement.
    The final coupling tensor is kept (detached) on ``last_coupling`` for
    inspection.
    """

    def __init__(self, layer: Layer, iterations: int = ROUTING_ITERATIONS):
        super().__init__()
        self.in_caps = layer.caps_in
        self.iterations = iterations
        n_inputs = layer.ch_in * layer.n_in * layer.n_in
        self.weight = nn.Parameter(
            0.05 * torch.randn(n_inputs, layer.ch_out, layer.caps_out, layer.caps_in)
        )
        self.bias = nn.Parameter(torch.zeros(layer.ch_out, layer.caps_out))
        self.last_coupling: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, ch, caps, h, w = x.shape
        u = x.permute(0, 1, 3, 4, 2).reshape(b, ch * h * w, caps)
        if u.size(1) != self.weight.size(0):
            raise BuildError(
                f"class capsules expect {self.weight.size(0)} input capsules, got {u.size(1)}"
            )
        votes = torch.einsum("njoc,bnc->bnjo", self.weight, u)

        logits = torch.zeros(b, votes.size(1), votes.size(2), device=x.device)
        coupling = logits.softmax(dim=2)
        for r in range(self.iterations):
            coupling = logits.softmax(dim=2)
            summed = (coupling.unsqueeze(-1) * votes).sum(dim=1) + self.bias
            v = squash(summed, dim=-1)
            if r + 1 < self.iterations:
                logits = logits + (votes * v.unsqueeze(1)).sum(dim=-1)
        self.last_coupling = coupling.detach()
        return v


_BLOCKS = {
    "conv": _ConvBlock,
    "cconv": _CapsConv,
    "cconv3d": _CapsConv3d,
    "ccell": _CapsCell,
    "ccaps": _ClassCaps,
    "flat": _FlatCaps,
}


def _out_side(layer: Layer) -> int:
    if layer.kind == "ccell":
        return -(-layer.n_in // layer.stride)
    if layer.kind in ("ccaps", "flat"):
        return 1
    return (layer.n_in - layer.kernel) // layer.stride + 1


def _check_chain(layers) -> None:
    for i, layer in enumerate(layers):
        if layer.kind == "ccaps" and i != len(layers) - 1:
            raise BuildError("class capsules must be the final layer")
        if layer.kind in ("conv", "cconv", "cconv3d") and layer.kernel > layer.n_in:
            raise BuildError(
                f"layer {i}: kernel {layer.kernel} exceeds input side {layer.n_in}"
            )
        if layer.kind == "flat":
            expected = (1, layer.ch_in * layer.n_in * layer.n_in, layer.caps_in)
            if (layer.n_out, layer.ch_out, layer.caps_out) != expected:
                raise BuildError(f"layer {i}: inconsistent reshape")
        elif _out_side(layer) != layer.n_out:
            raise BuildError(
                f"layer {i}: declared output side {layer.n_out}, computed {_out_side(layer)}"
            )
        if i + 1 < len(layers):
            nxt = layers[i + 1]
            if (nxt.n_in, nxt.ch_in, nxt.caps_in) != (layer.n_out, layer.ch_out, layer.caps_out):
                raise BuildError(f"layers {i} and {i+1} do not chain")
    if layers[-1].kind != "ccaps":
        raise BuildError("network must end in a class-capsule layer")


class CapsuleNetwork(nn.Module):
    def __init__(self, parsed: ParsedGenotype):
        super().__init__()
        _check_chain(parsed.layers)
        self.resize = parsed.resize
        self.skip = parsed.skip
        self.kinds = tuple(l.kind for l in parsed.layers)
        self.blocks = nn.ModuleList(_BLOCKS[l.kind](l) for l in parsed.layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if self.resize:
            images = F.interpolate(
                images, size=(RESIZE_SIDE, RESIZE_SIDE),
                mode="bilinear", align_corners=False,
            )
        t = images.unsqueeze(2)
        saved: List[torch.Tensor] = []
        for i, block in enumerate(self.blocks):
            t = block(t)
            if self.skip is not None and i == self.skip + 1:
                source = saved[self.skip]
                if source.dim() == 5 and t.dim() == 3:
                    source = source.squeeze(-1).squeeze(-1)
                t = t + source
                if self.kinds[i] != "conv":
                    t = squash(t, dim=2 if t.dim() == 5 else -1)
            saved.append(t)
        return t


@dataclass
class BuiltNetwork:
    model: CapsuleNetwork
    genotype_id: str
    parameter_count: int


def build(text: str) -> BuiltNetwork:
    model = CapsuleNetwork(parse_genotype(text))
    return BuiltNetwork(
        model=model,
        genotype_id=hashlib.sha256(text.encode("utf-8")).hexdigest()[:16],
        parameter_count=sum(p.numel() for p in model.parameters()),
    )
