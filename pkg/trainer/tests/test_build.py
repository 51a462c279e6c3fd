import pytest
import torch

from capstrainer import (
    BuildError,
    GenotypeError,
    build,
    margin_loss,
    parse_genotype,
    squash,
)

CAPSNET = ("conv,28,1,1,9,1,20,256,1;cconv,20,256,1,9,2,6,32,8;"
           "ccaps,6,32,8,1,1,1,10,16;skip=none;resize=0")
DEEPCAPS = ("conv,64,3,1,3,1,62,128,1;ccell,62,128,1,3,2,31,32,4;"
            "ccell,31,32,4,3,2,16,32,8;ccell,16,32,8,3,2,8,32,8;"
            "ccell,8,32,8,3,2,4,32,8;ccaps,4,32,8,1,1,1,10,32;skip=none;resize=1")


# ---------------------------------------------------------------------------
# parsing


def test_parse_roundtrip_fields():
    parsed = parse_genotype(CAPSNET)
    assert len(parsed.layers) == 3
    assert parsed.layers[0].kind == "conv"
    assert parsed.layers[1].stride == 2
    assert parsed.layers[2].ch_out == 10
    assert parsed.skip is None
    assert parsed.resize is False
    assert parse_genotype(DEEPCAPS).resize is True


@pytest.mark.parametrize("bad", [
    "",
    "garbage",
    "conv,28,1,1,9,1,20,256,1;skip=none",                      # no resize term
    "conv,28,1,1,9,1,20,256;skip=none;resize=0",               # 8 fields
    "blob,28,1,1,9,1,20,256,1;skip=none;resize=0",             # unknown kind
    "conv,28,1,x,9,1,20,256,1;skip=none;resize=0",             # non-integer
    "conv,28,1,0,9,1,20,256,1;skip=none;resize=0",             # non-positive
    "conv,28,1,1,9,1,20,256,1;skip=5;resize=0",                # skip out of range
    "conv,28,1,1,9,1,20,256,1;skip=none;resize=2",             # bad resize
    "skip=none;resize=0",                                       # no layers
])
def test_parse_rejects(bad):
    with pytest.raises(GenotypeError):
        parse_genotype(bad)


# ---------------------------------------------------------------------------
# squash


def test_squash_zero_maps_to_zero():
    out = squash(torch.zeros(3, 7))
    assert torch.equal(out, torch.zeros(3, 7))


def test_squash_unit_vector_length():
    x = torch.tensor([[0.0, 1.0, 0.0]])
    assert squash(x).norm(dim=-1).item() == pytest.approx(0.25)


def test_squash_preserves_direction_and_bounds_length():
    torch.manual_seed(3)
    x = torch.randn(64, 16) * 50.0
    y = squash(x)
    lengths = y.norm(dim=-1)
    assert bool((lengths >= 0).all()) and bool((lengths < 1).all())
    cos = torch.nn.functional.cosine_similarity(x, y, dim=-1)
    assert torch.allclose(cos, torch.ones_like(cos), atol=1e-5)
    # |y| = (|x| / (1 + |x|))^2
    expected = (x.norm(dim=-1) / (1.0 + x.norm(dim=-1))).pow(2)
    assert torch.allclose(lengths, expected, atol=1e-5)


# ---------------------------------------------------------------------------
# construction


def test_reference_network_parameter_count():
    net = build(CAPSNET)
    assert net.parameter_count == 6_804_384
    # the accelerator-side cost model counts 6,805,824 weights for this
    # architecture; framework bias bookkeeping accounts for the difference
    assert abs(net.parameter_count - 6_805_824) / 6_805_824 < 0.05
    assert len(net.genotype_id) == 16


def test_forward_shape_and_length_bound():
    torch.manual_seed(0)
    model = build(CAPSNET).model
    v = model(torch.rand(4, 1, 28, 28))
    assert v.shape == (4, 10, 16)
    lengths = v.norm(dim=-1)
    assert bool((lengths >= 0).all()) and bool((lengths <= 1).all())


def test_routing_coupling_sums_to_one():
    torch.manual_seed(0)
    model = build(CAPSNET).model
    model(torch.rand(2, 1, 28, 28))
    coupling = model.blocks[-1].last_coupling
    assert coupling.shape[1:] == (1152, 10)
    sums = coupling.sum(dim=2)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


def test_cell_network_with_resize():
    torch.manual_seed(1)
    net = build(DEEPCAPS)
    v = net.model(torch.rand(2, 3, 32, 32))
    assert v.shape == (2, 10, 32)
    assert bool((v.norm(dim=-1) <= 1).all())


def test_volumetric_capsule_layer():
    g = ("conv,28,1,1,9,2,10,8,1;cconv,10,8,1,3,1,8,4,4;"
         "cconv3d,8,4,4,3,1,6,4,8;ccaps,6,4,8,1,1,1,10,16;skip=none;resize=0")
    v = build(g).model(torch.rand(2, 1, 28, 28))
    assert v.shape == (2, 10, 16)


def test_flat_reshape_layer():
    g = ("conv,28,1,1,9,2,10,8,1;cconv,10,8,1,3,1,8,4,4;flat,8,4,4,1,1,1,256,4;"
         "ccaps,1,256,4,1,1,1,10,16;skip=none;resize=0")
    v = build(g).model(torch.rand(2, 1, 28, 28))
    assert v.shape == (2, 10, 16)


def test_skip_merge_keeps_length_bound():
    torch.manual_seed(2)
    g = ("conv,28,1,1,9,2,10,8,1;cconv,10,8,1,3,1,8,4,4;cconv,8,4,4,3,2,3,4,4;"
         "ccell,3,4,4,3,1,3,4,4;ccaps,3,4,4,1,1,1,10,16;skip=2;resize=0")
    v = build(g).model(torch.rand(2, 1, 28, 28))
    assert bool((v.norm(dim=-1) <= 1).all())


def test_build_rejects_broken_chain():
    g = ("conv,28,1,1,9,1,20,256,1;cconv,19,256,1,9,2,6,32,8;"
         "ccaps,6,32,8,1,1,1,10,16;skip=none;resize=0")
    with pytest.raises(BuildError):
        build(g)


def test_build_rejects_wrong_output_side():
    g = ("conv,28,1,1,9,1,21,256,1;cconv,21,256,1,9,2,7,32,8;"
         "ccaps,7,32,8,1,1,1,10,16;skip=none;resize=0")
    with pytest.raises(BuildError):
        build(g)


def test_build_rejects_oversized_kernel():
    g = ("conv,28,1,1,9,2,10,8,1;cconv,10,8,1,3,2,4,4,4;cconv,4,4,4,9,1,1,4,4;"
         "ccaps,1,4,4,1,1,1,10,16;skip=none;resize=0")
    with pytest.raises(BuildError):
        build(g)


def test_build_requires_class_capsule_tail():
    g = "conv,28,1,1,9,1,20,8,1;cconv,20,8,1,9,2,6,4,4;skip=none;resize=0"
    with pytest.raises(BuildError):
        build(g)


def test_class_capsules_only_last():
    g = ("conv,28,1,1,9,1,20,8,1;ccaps,20,8,1,1,1,1,10,16;"
         "ccaps,1,10,16,1,1,1,10,16;skip=none;resize=0")
    with pytest.raises(BuildError):
        build(g)


# ---------------------------------------------------------------------------
# loss


def test_margin_loss_prefers_correct_long_capsules():
    lengths = torch.tensor([[0.95, 0.05, 0.05]])
    target = torch.tensor([0])
    good = margin_loss(lengths, target)
    bad = margin_loss(torch.tensor([[0.05, 0.95, 0.05]]), target)
    assert good.item() < bad.item()
    perfect = margin_loss(torch.tensor([[0.95, 0.0, 0.0]]), target)
    assert perfect.item() == pytest.approx(0.0)
