"""
Tests for the conditional flow network, flow-matching loss, training phases
and the Euler sampler
"""
from dataclasses import replace

import numpy as np
import pytest

from app.errors import InvalidArgumentError, PhaseOrderError, UnknownTokenError
from app.services.analysis_codec import Latent, dequantize
from app.services.channel_select import SelectionResult
from app.services.flow_model import (
    FlowDims, FlowSample, SamplerConfig, attach_control, cfm_loss, embed_caption, embed_guidance,
    euler_integrate, flow_matching_loss, guidance_volume, init_flow_params, load_flow,
    marginal_vf_oracle, predict_vector_field, sample, sample_conditional_path, save_flow,
    time_embedding, train,
)
from app.utils.numerics import finite_diff_check
from app.utils.prng import PrngState, gaussian, uniform

TINY = FlowDims(height=4, width=4, guidance_dim=8, d_model=8, d_ff=8, d_time=4, d_txt=4, L_base=2, M_ctl=1)


def _base(seed=0, trained=True):
    params = init_flow_params(TINY, PrngState(seed))
    params.base_trained = trained
    return params


def _controlled(seed=0):
    return attach_control(_base(seed), PrngState(seed + 100))


def _samples(count=3, seed=1):
    prng = PrngState(seed)
    captions = ["one circle", "two squares and one triangle", "an empty scene"]
    return [
        FlowSample(uniform(prng, TINY.pixel_dim), captions[i % 3], gaussian(prng, TINY.guidance_dim))
        for i in range(count)
    ]


def _silu(x):
    return x / (1.0 + np.exp(-x))


def test_embed_caption_bag_of_tokens():
    """Empty caption is zero; token order does not matter; disjoint captions differ"""
    params = _base()
    assert np.array_equal(embed_caption("", params), np.zeros(TINY.d_txt))
    assert np.allclose(embed_caption("one circle", params), embed_caption("circle one", params), atol=1e-15)
    assert not np.allclose(embed_caption("one circle", params), embed_caption("two squares", params))
    with pytest.raises(UnknownTokenError):
        embed_caption("one hexagon", params)


def test_embed_guidance_zero_for_empty_selection():
    """C = 0 yields a zero guidance tensor"""
    latent = Latent(np.ones((2, 2, 2), dtype=np.int64), np.full(2, 0.5))
    guidance = embed_guidance(SelectionResult([], []), latent, _controlled())
    assert np.array_equal(guidance, np.zeros(TINY.pixel_dim))


def test_embed_guidance_matches_projection():
    """One channel goes through the guidance projection at its slot"""
    params = _controlled()
    symbols = np.arange(8, dtype=np.int64).reshape(2, 2, 2) - 3
    latent = Latent(symbols, np.array([0.5, 0.25]))
    layer = params.control.guidance_proj.layers[0]
    volume = np.zeros(8)
    volume[4:] = symbols[1].ravel() * 0.25
    expected = layer.weight @ volume + layer.bias
    assert np.allclose(embed_guidance(SelectionResult([1], [0.5]), latent, params), expected, atol=1e-12)

    full = embed_guidance(SelectionResult([0, 1], [0.5, 0.4]), latent, params)
    assert np.allclose(full, layer.weight @ dequantize(latent).ravel() + layer.bias, atol=1e-12)


def test_guidance_volume_checks():
    """Channel maps must line up with in-range indices"""
    with pytest.raises(InvalidArgumentError):
        guidance_volume([0, 1], np.zeros((1, 2, 2)), 2)
    with pytest.raises(InvalidArgumentError):
        guidance_volume([3], np.zeros((1, 2, 2)), 2)


def test_forward_matches_manual_evaluation():
    """Trunk output equals a straight-line evaluation"""
    params = _base(seed=2)
    prng = PrngState(3)
    z = gaussian(prng, TINY.pixel_dim)
    emb = embed_caption("one circle", params)
    t = 0.37

    def lin(net, x, act=None):
        out = net.layers[0].weight @ x + net.layers[0].bias
        return act(out) if act else out

    def block(net, x):
        hidden = _silu(net.layers[0].weight @ x + net.layers[0].bias)
        return x + net.layers[1].weight @ hidden + net.layers[1].bias

    feat = time_embedding(np.array([t]), TINY.d_time)[0]
    tp = params.time_proj.layers
    e = tp[1].weight @ _silu(tp[0].weight @ feat + tp[0].bias) + tp[1].bias + lin(params.text_proj, emb)
    h = lin(params.input_proj, z) + e
    for b in params.blocks:
        h = block(b, h)
    expected = lin(params.out_proj, h)
    assert np.allclose(predict_vector_field(params, z, t, emb), expected, atol=1e-12)


def test_zero_init_control_is_identity():
    """A fresh control branch leaves the vector field bitwise unchanged"""
    base = _base(seed=4)
    controlled = attach_control(base, PrngState(5))
    prng = PrngState(6)
    captions = ["one circle", "two squares", "an empty scene", ""]
    for i in range(100):
        z = gaussian(prng, TINY.pixel_dim)
        t = float(uniform(prng, 1)[0])
        emb = embed_caption(captions[i % 4], base)
        guidance = gaussian(prng, TINY.pixel_dim)
        assert np.array_equal(
            predict_vector_field(controlled, z, t, emb, guidance),
            predict_vector_field(base, z, t, emb),
        )


def test_zero_guidance_and_zero_projections_equal_base():
    """Without guidance a fresh branch still matches the base model"""
    base = _base(seed=7)
    controlled = attach_control(base, PrngState(8))
    z = gaussian(PrngState(9), (5, TINY.pixel_dim))
    emb = embed_caption("one triangle", base)
    assert np.array_equal(
        predict_vector_field(controlled, z, 0.5, emb, None),
        predict_vector_field(base, z, 0.5, emb),
    )


def test_time_outside_unit_interval():
    """t is restricted to [0, 1]"""
    params = _base()
    with pytest.raises(InvalidArgumentError):
        predict_vector_field(params, np.zeros(TINY.pixel_dim), 1.5, np.zeros(TINY.d_txt))


def test_conditional_path_moments():
    """One-point corpus: per coordinate, z_t has mean t z1 and variance (1 - t)^2"""
    point = np.array([0.8, -0.5, 0.0, 1.0])
    z1 = np.tile(point, (100_000, 1))
    t, z0, zt, v = sample_conditional_path(z1, PrngState(10), t=0.3)
    assert t == 0.3
    assert np.all(np.abs(zt.mean(axis=0) - 0.3 * point) < 0.01)
    assert np.all(np.abs(zt.var(axis=0) - 0.49) < 0.02)
    assert np.allclose(v, z1 - z0)


def test_flow_matching_loss_closed_forms():
    """Zero prediction costs ||z1 - z0||^2 / dim; the exact target costs nothing"""
    v = np.array([[1.0, -2.0, 0.5, 0.0]])
    assert flow_matching_loss(np.zeros_like(v), v) == pytest.approx(5.25 / 4)
    assert flow_matching_loss(v, v) == 0.0


def test_cfm_loss_with_zero_network():
    """A network whose output layer is zero predicts v = 0"""
    params = _base(seed=11)
    params.out_proj.layers[0].weight[...] = 0.0
    item = _samples(1)[0]
    prng = PrngState(12)
    _, z0, _, _ = sample_conditional_path(item.target, prng.clone())
    loss, _ = cfm_loss(params, [item], prng, "base")
    assert loss == pytest.approx(np.sum((item.target - z0) ** 2) / TINY.pixel_dim, abs=1e-12)


def test_cfm_gradients_base_phase():
    """Base-phase gradients agree with central finite differences"""
    params = _base(seed=13)
    batch = _samples(2)
    prng = PrngState(14)
    named = params.trainable("base")

    def loss_fn():
        loss, grads = cfm_loss(params, batch, prng.clone(), "base")
        return loss, [grads[name] for name, _ in named]

    assert finite_diff_check(loss_fn, [p for _, p in named]) < 1e-4


def test_cfm_gradients_control_phase():
    """Control-phase gradients reach the branch through nonzero projections"""
    params = _controlled(seed=15)
    params.control.zero_projs[0].layers[0].weight[...] = 0.1 * gaussian(PrngState(16), (TINY.d_model, TINY.d_model))
    batch = _samples(2, seed=17)
    prng = PrngState(18)
    named = params.trainable("control")
    assert "control.guidance.b0" not in dict(named)
    assert all(name.startswith("control.") for name, _ in named)

    def loss_fn():
        loss, grads = cfm_loss(params, batch, prng.clone(), "control")
        return loss, [grads[name] for name, _ in named]

    assert finite_diff_check(loss_fn, [p for _, p in named]) < 1e-4


def test_phase_order_enforced():
    """Control needs a trained base; base cannot follow control"""
    samples = _samples(2)
    with pytest.raises(PhaseOrderError):
        train(_base(trained=False), samples, "control", 1, seed=0)
    with pytest.raises(PhaseOrderError):
        train(_controlled(), samples, "base", 1, seed=0)
    with pytest.raises(InvalidArgumentError):
        train(_base(), samples, "finetune", 1, seed=0)


def test_control_zero_steps_preserves_base():
    """Attaching a branch without training changes no output"""
    base = _base(seed=19)
    controlled, history = train(base, _samples(2), "control", 0, seed=1)
    assert history == []
    assert controlled.control is not None
    plain = replace(controlled, control=None)
    z = gaussian(PrngState(20), (4, TINY.pixel_dim))
    emb = embed_caption("two circles", base)
    guidance = gaussian(PrngState(21), (4, TINY.pixel_dim))
    assert np.array_equal(
        predict_vector_field(controlled, z, 0.6, emb, guidance),
        predict_vector_field(plain, z, 0.6, emb),
    )


def test_control_training_freezes_trunk():
    """The trunk digest is unchanged after control training"""
    base = _base(seed=22)
    before = base.trunk_digest()
    controlled, history = train(base, _samples(3), "control", 5, seed=2, lr=1e-2, accumulation=2)
    assert len(history) == 5
    assert controlled.trunk_digest() == before == controlled.frozen_digest
    assert np.any(controlled.control.zero_projs[0].layers[0].weight != 0.0)


def test_base_training_reduces_loss():
    """Single-sample base training lowers the flow-matching loss"""
    params = _base(seed=23, trained=False)
    target = FlowSample(np.full(TINY.pixel_dim, 0.8), "one square")
    params, history = train(params, [target], "base", 80, seed=3, lr=5e-3, accumulation=4)
    assert params.base_trained
    assert np.mean(history[-10:]) < np.mean(history[:10])


def test_euler_constant_field_is_exact():
    """A constant field moves z0 by exactly mu for any step count"""
    z0 = gaussian(PrngState(24), 6)
    mu = np.array([0.5, -1.0, 2.0, 0.0, 0.25, -0.75])
    for n in (1, 5, 50):
        out = euler_integrate(lambda z, t: mu, z0, np.linspace(0.0, 1.0, n + 1))
        assert np.allclose(out, z0 + mu, rtol=0.0, atol=1e-12)


def test_euler_linear_field_recurrence():
    """v(z, t) = z over N uniform steps gives z0 (1 + 1/N)^N"""
    z0 = np.array([0.3, -1.2])
    for n in (1, 4, 100):
        out = euler_integrate(lambda z, t: z, z0, np.linspace(0.0, 1.0, n + 1))
        assert np.max(np.abs(out - z0 * (1.0 + 1.0 / n) ** n)) < 1e-12
    with pytest.raises(InvalidArgumentError):
        euler_integrate(lambda z, t: z, z0, np.array([0.0, 0.5, 0.5, 1.0]))


def test_sample_with_zero_field_clamps_noise():
    """v = 0 returns clamp(z0) in image shape"""
    params = _base(seed=25)
    params.out_proj.layers[0].weight[...] = 0.0
    cfg = SamplerConfig(N=5, seed=3)
    out = sample(params, np.zeros(TINY.d_txt), None, cfg)
    expected = np.clip(gaussian(PrngState(3), TINY.pixel_dim), 0.0, 1.0).reshape(4, 4)
    assert np.array_equal(out, expected)


def test_marginal_field_symmetry_and_single_point():
    """Symmetric targets cancel at z = 0; one target gives (z1 - z) / (1 - t)"""
    for t in (0.1, 0.5, 0.9):
        assert marginal_vf_oracle([1.0, -1.0], [0.5, 0.5], 0.0, t) == pytest.approx(0.0, abs=1e-12)
    z1 = np.array([[0.2, 0.7]])
    z = np.array([0.5, -0.5])
    assert np.allclose(marginal_vf_oracle(z1, [1.0], z, 0.4), (z1[0] - z) / 0.6, atol=1e-12)
    with pytest.raises(InvalidArgumentError):
        marginal_vf_oracle([1.0], [1.0], 0.0, 1.0)


def test_marginal_field_two_points():
    """Posterior-weighted value at z = t = 0.5, cross-checked by Monte Carlo"""
    w_plus = 1.0 / (1.0 + np.exp(-2.0))
    w_minus = 1.0 - w_plus
    expected = w_plus - 3.0 * w_minus
    assert marginal_vf_oracle([1.0, -1.0], [0.5, 0.5], 0.5, 0.5) == pytest.approx(expected, abs=1e-12)


@pytest.fixture(scope="module")
def two_point_draws():
    """z1 drawn from the half/half target at +1 and -1"""
    return np.where(uniform(PrngState(26), 4_000_000) < 0.5, 1.0, -1.0)


@pytest.mark.parametrize("t", [0.25, 0.5, 0.75])
@pytest.mark.parametrize("z", [-1.0, 0.0, 1.0])
def test_marginal_field_matches_monte_carlo(two_point_draws, z, t):
    """Likelihood-weighted average of (z1 - z) / (1 - t) over sampled z1"""
    sigma = 1.0 - t
    likelihood = np.exp(-((z - t * two_point_draws) ** 2) / (2.0 * sigma ** 2))
    mc = np.sum(likelihood * (two_point_draws - z) / sigma) / np.sum(likelihood)
    exact = marginal_vf_oracle([1.0, -1.0], [0.5, 0.5], z, t)
    assert abs(exact - mc) < 1e-2
    if z == 0.0:
        assert exact == 0.0


@pytest.mark.integration
def test_two_point_flow_is_bimodal():
    """A flow trained on +1/-1 carries N(0, 1) onto two modes near +1 and -1"""
    dims = FlowDims(height=1, width=1, guidance_dim=1, d_model=32, d_ff=64, d_time=8, d_txt=4, L_base=2, M_ctl=1)
    params = init_flow_params(dims, PrngState(40))
    targets = [FlowSample(np.array([1.0]), "an empty scene"), FlowSample(np.array([-1.0]), "an empty scene")]
    params, _ = train(params, targets, "base", 3000, seed=41, lr=3e-3, weight_decay=0.0, accumulation=8)

    emb = embed_caption("an empty scene", params)
    z0 = gaussian(PrngState(42), (2000, 1))
    z1 = euler_integrate(lambda z, t: predict_vector_field(params, z, t, emb), z0, np.linspace(0.0, 1.0, 51))
    upper, lower = z1[z1 > 0.0], z1[z1 <= 0.0]
    assert upper.size > 500 and lower.size > 500
    assert abs(upper.mean() - 1.0) < 0.1
    assert abs(lower.mean() + 1.0) < 0.1


def test_save_load_round_trip(tmp_path):
    """Persisted flow models reproduce their outputs and digests"""
    params = _controlled(seed=27)
    loaded, meta = load_flow(save_flow(params, tmp_path / "flow.gscm", {"channel_count": 2}))
    assert meta["channel_count"] == 2
    assert loaded.trunk_digest() == params.trunk_digest()
    z = gaussian(PrngState(28), TINY.pixel_dim)
    emb = embed_caption("one circle", params)
    g = gaussian(PrngState(29), TINY.pixel_dim)
    assert np.array_equal(
        predict_vector_field(loaded, z, 0.2, emb, g),
        predict_vector_field(params, z, 0.2, emb, g),
    )
