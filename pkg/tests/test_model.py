import math
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cflow.data import toy_image_pairs, toy_pointgrid_pairs
from cflow.layers import NotInitializedError
from cflow.model import (
    CheckpointError,
    ConditionalFlowModel,
    DivergenceError,
    LatentStack,
    ModelConfig,
    checkpoint_bytes,
    cycle_reconstruct,
    decode,
    densify,
    encode,
    interpolate,
    load_checkpoint,
    log_likelihood,
    manipulate,
    model_from_bytes,
    partial_embedding,
    sample_conditional,
    save_checkpoint,
    style_transfer,
    total_loss,
    train,
)
from cflow.pointcloud import chamfer
from cflow.tensor import ShapeError, Tensor, no_grad

from .conftest import numeric_jacobian


def tiny(**kw) -> ModelConfig:
    base = dict(height_a=4, width_a=4, height_b=4, width_b=4, levels=2, steps=2, hidden=8)
    base.update(kw)
    return ModelConfig(**base)


def randomized(cfg: ModelConfig, seed: int = 0, scale: float = 0.02) -> ConditionalFlowModel:
    """A model in a random, non-trivial parameter state (all couplings active)."""
    rng = np.random.default_rng(seed)
    model = ConditionalFlowModel(cfg)
    model.initialize(rng.uniform(size=(4,) + cfg.shape("a")), rng.uniform(size=(4,) + cfg.shape("b")))
    for name, p in model.params:
        s = scale if "conv3" in name else 0.05
        p.data = p.data + s * rng.normal(size=p.shape)
    return model


def batch(cfg, n=3, seed=1):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n,) + cfg.shape("a")), rng.uniform(size=(n,) + cfg.shape("b"))


# -- config ------------------------------------------------------------------------


def test_config_text_roundtrip():
    cfg = tiny(cycle_weight=2.5, coupling_a="additive", pointcloud_b=True, channels_b=3, seed=9)
    text = cfg.to_text()
    assert text.splitlines() == sorted(text.splitlines())
    assert ModelConfig.from_text(text) == cfg
    assert "cycle_distance = chamfer" in text


def test_config_parser_comments_and_unknown_keys():
    cfg = ModelConfig.from_text("# desk run\nlevels = 1   # one level\nsteps=3\n\n")
    assert (cfg.levels, cfg.steps) == (1, 3)
    with pytest.raises(ValueError, match="unknown key 'depth'"):
        ModelConfig.from_text("depth = 3\n")
    with pytest.raises(ValueError, match="levels"):
        ModelConfig.from_text("levels = many\n")


@pytest.mark.parametrize(
    "kw",
    [dict(height_a=6), dict(cycle_weight=-1.0), dict(temperature=-0.1), dict(coupling_b="spline"),
     dict(cycle_distance="chamfer"), dict(pointcloud_a=True)],
)
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_cycle_distance_resolution():
    assert ModelConfig().cycle_distance == "l1"
    assert ModelConfig(channels_b=3, pointcloud_b=True).cycle_distance == "chamfer"


# -- encode / decode ---------------------------------------------------------------


def test_fresh_model_roundtrip_and_dimension_preservation():
    cfg = tiny()
    xa, xb = batch(cfg)
    model = ConditionalFlowModel(cfg)
    za, zb, lda, ldb = encode(model, xa, xb)
    assert za.numel() == cfg.dims("a") and zb.numel() == cfg.dims("b")
    assert lda.shape == (3,)
    assert np.abs(decode(model, zb, za).data - xb).max() < 1e-8
    assert np.abs(model.decode_a(za).data - xa).max() < 1e-8


@given(st.integers(0, 10_000))
def test_roundtrip_any_parameter_state(seed):
    cfg = tiny(pointcloud_b=seed % 2 == 1, channels_b=3 if seed % 2 else 1)
    model = randomized(cfg, seed)
    xa, xb = batch(cfg, 2, seed)
    with no_grad():
        za, zb, _, _ = model.encode(xa, xb)
        # decode without the cached activations recomputes them from zA
        fresh = LatentStack(za.levels)
        assert np.abs(model.decode(zb, fresh).data - xb).max() < 1e-8
        assert np.abs(model.decode_a(fresh).data - xa).max() < 1e-8


def test_unbatched_inputs():
    cfg = tiny()
    xa, xb = batch(cfg, 1)
    model = randomized(cfg)
    za, zb, lda, ldb = model.encode(xa[0], xb[0])
    assert za.unbatched and lda.shape == ()
    assert [a.shape for a in za.arrays()] == [(2, 2, 2), (1, 1, 8)]
    assert model.decode(zb, za).shape == cfg.shape("b")
    lpa, lpb = log_likelihood(model, xa[0], xb[0])
    lpa_b, lpb_b = log_likelihood(model, xa, xb)
    assert lpa.item() == pytest.approx(lpa_b.data[0], rel=1e-12)


def test_shape_errors():
    cfg = tiny()
    model = ConditionalFlowModel(cfg)
    with pytest.raises(ShapeError):
        model.encode(np.zeros((1, 8, 8, 1)))
    with pytest.raises(ShapeError):
        model.encode(np.zeros((2, 4, 4, 1)), np.zeros((3, 4, 4, 1)))
    za, _, _, _ = model.encode(np.zeros((1, 4, 4, 1)))
    with pytest.raises(ShapeError):
        model.decode(LatentStack(za.levels[:1]), za)


def test_decode_before_initialization_raises():
    model = ConditionalFlowModel(tiny())
    zs = [Tensor(np.zeros((1,) + s)) for s in model.branch_b.latent_shapes]
    with pytest.raises(NotInitializedError):
        model.decode(LatentStack(zs), LatentStack([Tensor(np.zeros((1,) + s)) for s in model.branch_a.latent_shapes]))


@pytest.mark.parametrize("branch", ["a", "b"])
def test_branch_logdet_matches_dense_jacobian(branch):
    cfg = ModelConfig(height_a=4, width_a=4, height_b=4, width_b=4, levels=1, steps=1, hidden=6, coupling_b="affine")
    model = randomized(cfg, 3, scale=0.05)
    xa, xb = batch(cfg, 1, 5)

    def latent(x):
        with no_grad():
            if branch == "a":
                za, _, _, _ = model.encode(x[None])
                return za.levels[0].data
            _, zb, _, _ = model.encode(xa, x[None])
            return zb.levels[0].data

    x = xa[0] if branch == "a" else xb[0]
    _, _, lda, ldb = model.encode(xa, xb)
    ld = (lda if branch == "a" else ldb).item()
    jac = numeric_jacobian(latent, x)
    ref = np.linalg.slogdet(jac)[1]
    assert abs(ref - ld) / abs(ref) < 1e-3


# -- likelihood ---------------------------------------------------------------------


def test_identity_model_gaussian_likelihood():
    cfg = tiny()
    model = ConditionalFlowModel(cfg)
    model.set_identity()
    xa, xb = batch(cfg, 2)
    lpa, lpb = log_likelihood(model, xa, xb)
    d = cfg.dims("a")
    ref = -0.5 * d * math.log(2 * math.pi) - 0.5 * (xa**2).sum(axis=(1, 2, 3))
    np.testing.assert_allclose(lpa.data, ref, rtol=1e-12)


def test_likelihood_is_prior_plus_logdet():
    cfg = tiny()
    model = randomized(cfg)
    xa, xb = batch(cfg)
    za, zb, lda, ldb = model.encode(xa, xb)
    lpa, lpb = model.log_likelihood(xa, xb)
    prior_b = sum(lvl.prior.log_prob(z).data for lvl, z in zip(model.branch_b.levels, zb.levels))
    np.testing.assert_allclose(lpb.data, prior_b + ldb.data, rtol=1e-12)


def test_branch_b_parameters_do_not_affect_log_p_a():
    cfg = tiny()
    model = randomized(cfg)
    xa, xb = batch(cfg)
    before, _ = model.log_likelihood(xa, xb)
    for _, p in model.branch_parameters("b").items():
        p.data = p.data + 0.1
    after, _ = model.log_likelihood(xa, xb)
    np.testing.assert_array_equal(before.data, after.data)


def test_conditioning_pathway_carries_all_source_gradient():
    cfg = tiny()
    model = randomized(cfg)
    xa, xb = batch(cfg)
    _, lpb = model.log_likelihood(xa, xb)
    lpb.sum().backward()
    grads_a = [p.grad for p in model.branch_parameters("a").values()]
    assert any(g is not None and np.abs(g).max() > 0 for g in grads_a)
    model.params.clear_grad()
    for name, p in model.branch_parameters("b").items():
        if ".adapter." in name:
            p.data = np.zeros_like(p.data)
    _, lpb = model.log_likelihood(xa, xb)
    lpb.sum().backward()
    for p in model.branch_parameters("a").values():
        assert p.grad is None or np.all(p.grad == 0)


# -- sampling / cycle ---------------------------------------------------------------


def test_sampling_determinism_and_zero_temperature():
    cfg = tiny()
    model = randomized(cfg)
    xa, _ = batch(cfg, 2)
    a = sample_conditional(model, xa, 0.9, seed=5).data
    np.testing.assert_array_equal(a, sample_conditional(model, xa, 0.9, seed=5).data)
    assert not np.array_equal(a, sample_conditional(model, xa, 0.9, seed=6).data)
    np.testing.assert_array_equal(sample_conditional(model, xa, 0.0, 1).data, sample_conditional(model, xa, 0.0, 2).data)
    assert sample_conditional(model, xa[0], None, 0).shape == cfg.shape("b")


def test_identity_model_samples_are_standard_normal():
    cfg = tiny(hidden=2)
    model = ConditionalFlowModel(cfg)
    model.set_identity()
    xa = np.zeros((10_000,) + cfg.shape("a"))
    xb = sample_conditional(model, xa, 1.0, seed=0).data
    assert stats.kstest(xb[:, 1, 2, 0], "norm").pvalue > 0.01


def test_cycle_keeping_every_level_reconstructs():
    cfg = tiny()
    model = randomized(cfg)
    xa, xb = batch(cfg)
    out = cycle_reconstruct(model, xa, xb, seed=0, resample_levels=0)
    assert np.abs(out.data - xb).max() < 1e-10


def test_cycle_on_identity_model_only_touches_resampled_positions():
    cfg = tiny()
    model = ConditionalFlowModel(cfg)
    model.set_identity()
    xa, xb = batch(cfg)
    out = cycle_reconstruct(model, xa, xb, seed=0).data
    # first-level latent = second half of the squeezed channels = bottom row of each 2x2 block
    np.testing.assert_array_equal(out[:, 0::2], xb[:, 0::2])
    assert np.all(out[:, 1::2] != xb[:, 1::2])


# -- objective and training -------------------------------------------------------------


def test_identity_zero_input_loss_is_half_log_two_pi_bits():
    cfg = tiny(cycle_weight=0.0)
    model = ConditionalFlowModel(cfg)
    model.set_identity()
    xa, xb = np.zeros((2,) + cfg.shape("a")), np.zeros((2,) + cfg.shape("b"))
    loss = total_loss(model, (xa, xb))
    assert loss.item() == pytest.approx(0.5 * math.log(2 * math.pi) / math.log(2), abs=1e-12)
    assert loss.item() == pytest.approx(1.3257, abs=1e-4)


def test_zero_cycle_weight_gives_pure_nll():
    cfg = tiny()
    model = randomized(cfg)
    xa, xb = batch(cfg)
    terms = model.loss_terms(xa, xb, 0, cycle_weight=0.0)
    assert terms.loss.item() == terms.bpd_joint
    with_cycle = model.loss_terms(xa, xb, 0)
    assert with_cycle.loss.item() == pytest.approx(with_cycle.bpd_joint + 10.0 * with_cycle.cycle, rel=1e-12)


def test_zero_steps_leaves_model_unchanged():
    cfg = tiny()
    model = ConditionalFlowModel(cfg)
    before = checkpoint_bytes(model)
    result = train(model, toy_image_pairs(8, size=4), 0)
    assert result.records == [] and checkpoint_bytes(model) == before


def test_training_is_bit_reproducible():
    ds = toy_image_pairs(32, size=4, seed=2)
    cfg = tiny(batch_size=8)
    a = train(ConditionalFlowModel(cfg), ds, 6).losses
    b = train(ConditionalFlowModel(cfg), ds, 6).losses
    assert a == b and len(a) == 6
    assert train(ConditionalFlowModel(tiny(batch_size=8, seed=1)), ds, 6).losses != a


def test_divergence_is_reported(tmp_path):
    ds = toy_image_pairs(16, size=4)
    model = ConditionalFlowModel(tiny(batch_size=8, checkpoint_every=1))
    ckpt = tmp_path / "m.cfw"
    train(model, ds, 2, checkpoint_path=ckpt)
    good = ckpt.read_bytes()
    model.branch_b.levels[0].prior.log_var.data[:] = np.nan
    with pytest.raises(DivergenceError, match="parameter norms"):
        train(model, ds, 3, checkpoint_path=ckpt)
    assert ckpt.read_bytes() == good


def test_roundtrip_after_training():
    ds = toy_image_pairs(64, size=4, seed=3)
    model = ConditionalFlowModel(tiny(batch_size=8))
    train(model, ds, 100)
    xa, xb = batch(model.config, 50, 9)
    za, zb, _, _ = model.encode(xa, xb)
    assert np.abs(model.decode(zb, LatentStack(za.levels)).data - xb).max() < 1e-6


def test_cycle_distance_drops_during_training():
    ds = toy_image_pairs(128, seed=4)
    cfg = ModelConfig(hidden=16, steps=2)
    model = ConditionalFlowModel(cfg)
    rec = train(model, ds, 200).records
    first = np.mean([r.cycle for r in rec[:20]])
    last = np.mean([r.cycle for r in rec[-20:]])
    assert last < first


def test_metrics_log_written(tmp_path):
    from cflow.model import read_metrics

    ds = toy_image_pairs(16, size=4)
    log = tmp_path / "m.tsv"
    res = train(ConditionalFlowModel(tiny(batch_size=8)), ds, 3, log_path=log, final_eval=True)
    recs = read_metrics(log)
    assert [r.phase for r in recs] == ["train"] * 3 + ["eval"]
    assert recs[0].loss == res.records[0].loss


# -- procedures -------------------------------------------------------------------------


def test_partial_embedding_levels():
    cfg = tiny(channels_b=3, pointcloud_b=True)
    model = randomized(cfg)
    xa, xb = batch(cfg, 1)
    assert np.abs(partial_embedding(model, xa[0], 0).data - xa[0]).max() < 1e-10
    out0 = partial_embedding(model, xb[0], 0, seed=1, cond=xa[0])
    assert chamfer(out0.data.reshape(-1, 3), xb[0].reshape(-1, 3)) < 1e-8
    out2 = partial_embedding(model, xb[0], 2, seed=1, cond=xa[0])
    assert not np.allclose(out2.data, xb[0])
    with pytest.raises(ValueError):
        partial_embedding(model, xa[0], 3)


def test_densify_counts_and_identity_pass():
    cfg = tiny(channels_b=3, pointcloud_b=True)
    model = randomized(cfg)
    xa, xb = batch(cfg, 1)
    pts = densify(model, xb[0], 3, seed=0, cond=xa[0])
    assert pts.shape == (3 * 16, 3)
    same = densify(model, xb[0], 1, seed=0, cond=xa[0], levels=0)
    assert np.abs(same - xb[0].reshape(-1, 3)).max() < 1e-10
    with pytest.raises(ValueError):
        densify(model, xb[0], 0)


def test_interpolation_endpoints_and_range():
    cfg = tiny()
    model = randomized(cfg)
    xa, xb = batch(cfg, 2)
    assert np.abs(interpolate(model, xa[0], xa[1], 0.0).data - xa[0]).max() < 1e-10
    assert np.abs(interpolate(model, xa[0], xa[1], 1.0).data - xa[1]).max() < 1e-10
    assert np.abs(interpolate(model, xb[0], xb[1], 1.0, xa[0], xa[1]).data - xb[1]).max() < 1e-10
    with pytest.raises(ValueError):
        interpolate(model, xa[0], xa[1], 1.5)
    with pytest.raises(ValueError):
        interpolate(model, xb[0], xb[1], 0.5, xa[0], None)


def test_affine_model_interpolates_linearly():
    cfg = tiny()
    model = ConditionalFlowModel(cfg)  # couplings start at identity: the map is affine
    xa, _ = batch(cfg, 2)
    model.initialize(xa, batch(cfg, 2)[1])
    mid = interpolate(model, xa[0], xa[1], 0.3).data
    np.testing.assert_allclose(mid, 0.7 * xa[0] + 0.3 * xa[1], atol=1e-12)


def test_manipulate_identities():
    cfg = tiny()
    model = randomized(cfg)
    xa, xb = batch(cfg, 2)
    assert np.abs(manipulate(model, xb[0], xa[0], xa[0]).data - xb[0]).max() < 1e-10
    assert not np.allclose(manipulate(model, xb[0], xa[0], xa[1]).data, xb[0])
    fresh = ConditionalFlowModel(cfg)
    fresh.initialize(xa, xb)
    assert np.abs(manipulate(fresh, xb[0], xa[0], xa[1]).data - xb[0]).max() < 1e-10


def test_style_transfer_with_itself_returns_input():
    cfg_ab = tiny(channels_b=3)
    cfg_ba = tiny(channels_a=3)
    ab, ba = randomized(cfg_ab, 1), randomized(cfg_ba, 2)
    x = np.random.default_rng(0).uniform(size=(4, 4, 3))
    out = style_transfer(ab, ba, x, x)
    assert np.abs(out.data - x).max() < 1e-10
    with pytest.raises(ShapeError):
        style_transfer(ab, ab, x, x)


# -- checkpoints ----------------------------------------------------------------------------


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    cfg = tiny(pointcloud_b=True, channels_b=3)
    model = randomized(cfg)
    p1, p2 = tmp_path / "a.cfw", tmp_path / "b.cfw"
    save_checkpoint(model, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.config == model.config
    xa, xb = batch(cfg)
    for x, y in zip(model.log_likelihood(xa, xb), loaded.log_likelihood(xa, xb)):
        assert x.data.tobytes() == y.data.tobytes()
    assert [f for f in os.listdir(tmp_path) if f.startswith(".ckpt")] == []


def test_truncated_or_corrupted_checkpoints_rejected(tmp_path):
    raw = checkpoint_bytes(randomized(tiny()))
    assert raw[:4] == b"CFW1"
    for bad in (raw[:-1], raw[: len(raw) // 2], raw[:3]):
        with pytest.raises(CheckpointError):
            model_from_bytes(bad)
    flipped = bytearray(raw)
    flipped[100] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        model_from_bytes(bytes(flipped))
    (tmp_path / "t.cfw").write_bytes(raw[:-20])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.cfw")


def test_checkpoint_version_mismatch(tmp_path):
    import hashlib
    import struct

    raw = bytearray(checkpoint_bytes(ConditionalFlowModel(tiny()))[:-8])
    struct.pack_into("<I", raw, 4, 99)
    body = bytes(raw)
    with pytest.raises(CheckpointError, match="version 99"):
        model_from_bytes(body + hashlib.blake2b(body, digest_size=8).digest())


def test_pointgrid_dataset_feeds_model():
    ds = toy_pointgrid_pairs(8, size=4, dense=16)
    cfg = tiny(channels_b=3, pointcloud_b=True, batch_size=4)
    res = train(ConditionalFlowModel(cfg), ds, 2)
    assert all(np.isfinite(res.losses))
