"""Architecture tests: spec validation, route parity, costs, resumability."""
import numpy as np
import pytest

from eebnn import arch, layers
from eebnn.arch import ArchSpec, build, toy_spec

MICRO_SHAPE = (12, 10, 1)


def micro_spec(family, **kw):
    return ArchSpec(family=family, widths=(4, 6), blocks=(3, 3), n_classes=3,
                    input_shape=MICRO_SHAPE, **kw)


def random_feature(seed=0, shape=MICRO_SHAPE):
    return np.random.default_rng(seed).standard_normal(shape)


def test_family_suffix_normalization():
    spec = micro_spec("quicknet-style")
    assert spec.family == "quicknet"
    spec2 = micro_spec("meliusnet")
    assert spec2.family == "meliusnet"


@pytest.mark.parametrize("kw,msg", [
    (dict(family="resnet", widths=(4, 6), blocks=(3, 3), n_classes=3), "unknown family"),
    (dict(family="quicknet", widths=(4,), blocks=(3, 3), n_classes=3), "same length"),
    (dict(family="quicknet", widths=(4, 6), blocks=(2, 2), n_classes=3), "at least 5 blocks"),
    (dict(family="quicknet", widths=(4, 6), blocks=(3, 3), n_classes=1), "two classes"),
    (dict(family="quicknet", widths=(4, 0), blocks=(3, 3), n_classes=3), "width"),
    (dict(family="quicknet", widths=(4, 6), blocks=(3, 3), n_classes=3,
          exit_placements=(1, 2, 3, 4)), "exit placements"),
    (dict(family="quicknet", widths=(4, 6), blocks=(3, 3), n_classes=3,
          exit_placements=(1, 3, 2, 4, 6)), "strictly increasing"),
    (dict(family="quicknet", widths=(4, 6), blocks=(3, 3), n_classes=3,
          exit_placements=(1, 2, 3, 4, 5)), "final block"),
])
def test_spec_validation_rejects(kw, msg):
    kw.setdefault("input_shape", MICRO_SHAPE)
    with pytest.raises(ValueError, match=msg):
        ArchSpec(**kw)


def test_input_shape_validation():
    with pytest.raises(ValueError, match="input shape"):
        ArchSpec(family="quicknet", widths=(4, 6), blocks=(3, 3), n_classes=3,
                 input_shape=(12, 10, 2))


def test_spec_dict_round_trip():
    spec = micro_spec("birealnet", exit_placements=(1, 2, 3, 4, 6))
    assert ArchSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("family", ["quicknet", "birealnet", "binarydensenet", "meliusnet"])
def test_build_and_routes_agree(family):
    model = build(micro_spec(family), seed=4)
    feat = random_feature(1)

    stack = model.forward_all_exits(feat)
    assert len(stack.probs) == 5
    for p in stack.probs:
        assert p.shape == (3,)
        np.testing.assert_allclose(p.sum(), 1.0, atol=1e-12)
    assert all(b > a for a, b in zip(stack.costs, stack.costs[1:]))

    # float training route in eval mode must match the packed-bit route exactly
    logits = model.forward_train(feat[None], layers.Mode())
    for k in range(5):
        np.testing.assert_array_equal(layers.softmax(logits[k][0]), stack.probs[k])


@pytest.mark.parametrize("family", ["quicknet", "birealnet", "binarydensenet", "meliusnet"])
def test_prefix_matches_full_pass_and_resumes(family):
    model = build(micro_spec(family), seed=8)
    feat = random_feature(2)
    stack = model.forward_all_exits(feat)

    # fresh prefix per exit: same distribution, standalone cost
    for k in range(1, 6):
        dist, state = model.forward_prefix(feat, k)
        np.testing.assert_array_equal(dist, stack.probs[k - 1])
        assert state.consumed_macs == stack.costs[k - 1]
        assert state.exit_reached == k

    # resumed chain 1 -> 5 consumes exactly the full-pass total
    state = None
    for k in range(1, 6):
        dist, state = model.forward_prefix(feat, k, state)
        np.testing.assert_array_equal(dist, stack.probs[k - 1])
    assert state.consumed_macs == stack.total_macs


def test_total_macs_decomposition():
    model = build(micro_spec("quicknet"), seed=0)
    trunk = model.stem_macs + sum(model.block_macs)
    assert model.total_macs == trunk + sum(h.macs for h in model.exits)
    assert model.exit_costs[-1] == trunk + model.exits[-1].macs


def test_hidden_state_guards():
    a = build(micro_spec("quicknet"), seed=0)
    b = build(micro_spec("quicknet"), seed=0)
    feat = random_feature(3)
    _, state = a.forward_prefix(feat, 2)
    with pytest.raises(ValueError, match="different model"):
        b.forward_prefix(feat, 3, state)
    with pytest.raises(ValueError, match="already at exit"):
        a.forward_prefix(feat, 2, state)
    with pytest.raises(ValueError, match="out of range"):
        a.forward_prefix(feat, 6)


def test_feature_shape_validation():
    model = build(micro_spec("quicknet"), seed=0)
    with pytest.raises(ValueError, match="does not match"):
        model.forward_all_exits(np.zeros((5, 5, 1)))
    with pytest.raises(ValueError, match="does not match"):
        model.forward_train(np.zeros((2, 5, 5, 1)), layers.Mode(train=True))


def test_toy_quicknet_placements_and_param_count():
    model = build(toy_spec("quicknet", n_classes=6), seed=0)
    assert model.placements == (1, 2, 4, 5, 6)
    # closed form: stem 3x3x1x16 + BN pairs + six 3x3 binary convs + heads
    convs = 9 * (16 * 16 + 16 * 16 + 16 * 32 + 32 * 32 + 32 * 64 + 64 * 64)
    bns = 2 * (16 + 16 + 16 + 32 + 32 + 64 + 64)  # stem_bn plus one per block
    heads = 6 * (16 + 16 + 32 + 64 + 64) + 5 * (6 + 6)
    assert model.param_count() == 9 * 16 + convs + bns + heads == 75564


def test_default_placements_cover_trunk():
    for family in ("quicknet", "binarydensenet"):
        model = build(micro_spec(family), seed=1)
        p = model.placements
        assert len(p) == 5
        assert all(b > a for a, b in zip(p, p[1:]))
        assert p[0] >= 1 and p[-1] == model.spec.n_blocks
        assert model.spec.exit_placements == p  # spec is materialized after default choice


def test_build_is_deterministic_per_seed():
    m1 = build(micro_spec("meliusnet"), seed=12)
    m2 = build(micro_spec("meliusnet"), seed=12)
    m3 = build(micro_spec("meliusnet"), seed=13)
    p1 = {path: a for path, _, _, a, _ in m1.named_params()}
    p2 = {path: a for path, _, _, a, _ in m2.named_params()}
    p3 = {path: a for path, _, _, a, _ in m3.named_params()}
    assert p1.keys() == p2.keys() == p3.keys()
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])
    assert any(not np.array_equal(p1[k], p3[k]) for k in p1)


def test_stage_transitions_pool_spatially():
    model = build(micro_spec("quicknet"), seed=0)
    # stem halves (12, 10) -> (6, 5); the second stage pools to (3, 3)
    assert model.block_hw[0] == (6, 5)
    assert model.pool_before == {4}
    assert model.block_hw[3] == (3, 3)


def test_binary_param_inventory():
    model = build(micro_spec("quicknet"), seed=0)
    binary = [path for path, _, _, _, is_bin in model.named_params() if is_bin]
    # one latent per block conv plus one per exit head
    assert len(binary) == model.spec.n_blocks + 5
    assert all(name.endswith(".latent") for name in binary)
    real = [path for path, _, _, _, is_bin in model.named_params() if not is_bin]
    assert "stem.w" in real
    assert not any(name.endswith(".latent") for name in real)
