import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rflab.distill import (
    DistillConfig,
    IdentityGenerator,
    LinearGenerator,
    RotationViewGenerator,
    StepRule,
    flow_residual,
    gauss_reg_grad,
    irfds_grad,
    irfds_invert,
    isds_grad,
    rfds_grad,
    rfds_grad_full,
    rfds_optimize,
    rfds_rev_optimize,
    sds_grad,
)
from rflab.fields import CapabilityError, FunctionField
from rflab.interpolant import Schedule, ScheduleKind, interpolate, schedule_eval
from rflab.net import DivergenceError, NetConfig, VelocityNet
from rflab.oracle import (
    BridgedVelocityField,
    GaussianMixture,
    MixtureScoreField,
    MixtureVelocityField,
    log_density,
    posterior_means,
)

from baselines import SINGLE_GAUSSIAN_RFDS_NLL

RF = Schedule(ScheduleKind.RECTIFIED_FLOW)
MIX3 = GaussianMixture([0.2, 0.5, 0.3], [[2.0, 0.0], [-1.0, 1.5], [0.0, -2.0]], [[0.3, 0.5], [0.2, 0.2], [0.6, 0.1]])
GENERATORS = [IdentityGenerator(2), LinearGenerator(2, 5, seed=3), RotationViewGenerator(2)]


def cos(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))


@pytest.mark.parametrize("gen", GENERATORS, ids=lambda g: type(g).__name__)
def test_generator_vjp_matches_finite_differences(gen, rng):
    for _ in range(10):
        theta = rng.normal(size=gen.n_params)
        view = gen.draw_view(rng, theta)
        up = rng.normal(size=gen.dim)
        g = gen.vjp(theta, view, up)
        h = 1e-6
        num = np.array([(up @ gen.render(theta + h * e, view) - up @ gen.render(theta - h * e, view)) / (2 * h)
                        for e in np.eye(gen.n_params)])
        assert np.max(np.abs(g - num)) <= 1e-6 * np.max(np.abs(num))


@given(st.sampled_from([None, 1.0, -1.0]), st.sampled_from([None, 1.0, -1.0]))
def test_weight_signs_are_opposite(w, wp):
    if w is not None and wp is not None and wp != -w:
        with pytest.raises(ValueError):
            DistillConfig(w_sign=w, w_prime_sign=wp)
        return
    cfg = DistillConfig(w_sign=w, w_prime_sign=wp)
    for kind in ScheduleKind:
        a, b = cfg.signs(Schedule(kind))
        assert a == -b and abs(a) == 1.0


def test_default_weight_sign_follows_schedule():
    assert DistillConfig().signs(RF) == (-1.0, 1.0)
    assert DistillConfig().signs(Schedule(ScheduleKind.CONDITIONAL_FLOW_MATCHING)) == (1.0, -1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(n_inner=0)
    with pytest.raises(ValueError):
        DistillConfig(w_sign=0.5)
    with pytest.raises(ValueError):
        DistillConfig(t_range=(0.5, 0.2))


def test_step_rule_defaults():
    net = VelocityNet(2, 0, NetConfig(hidden=(4,)))
    assert DistillConfig().step_rule(net) is StepRule.ONE_MINUS_SIGMA
    net.reflowed = True
    assert DistillConfig().step_rule(net) is StepRule.CONSTANT
    assert DistillConfig(irfds_step_rule="one_minus_sigma").step_rule(net) is StepRule.ONE_MINUS_SIGMA


def test_residual_of_zero_field(rng):
    x, e = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    zero = FunctionField(lambda x, t, c: 0.0)
    np.testing.assert_allclose(flow_residual(zero, RF, x, e, 0.3), -x + e)


def test_residual_of_oracle_is_posterior_gap(sched, rng):
    x, e, t = rng.normal(size=(20, 2)), rng.normal(size=(20, 2)), rng.uniform(0.05, 0.95, 20)
    x_hat, e_hat = posterior_means(MIX3, sched, interpolate(sched, x, e, t), t)
    expect = sched.alpha_dot * (x_hat - x) + sched.sigma_dot * (e_hat - e)
    np.testing.assert_allclose(flow_residual(MixtureVelocityField(MIX3, sched), sched, x, e, t), expect, atol=1e-12)


def test_point_mass_residual_vanishes(rng):
    x = np.array([0.5, -1.0])
    field = MixtureVelocityField(GaussianMixture.isotropic(x[None], 1e-7), RF)
    for _ in range(10):
        e, t = rng.normal(size=2), rng.uniform(0.02, 0.98)
        assert np.max(np.abs(flow_residual(field, RF, x, e, t))) < 1e-5


def test_rfds_identity_generator_is_weighted_residual(rng):
    field = MixtureVelocityField(MIX3, RF)
    theta, e, t = rng.normal(size=(6, 2)), rng.normal(size=(6, 2)), rng.uniform(0.1, 0.9, 6)
    cfg = DistillConfig(cfg_scale=1.0)
    g = rfds_grad(field, RF, IdentityGenerator(2), theta, e, t, None, cfg)
    np.testing.assert_array_equal(g, -1.0 * flow_residual(field, RF, theta, e, t))
    assert field.counters.backwards == 0


def test_rfds_zero_residual_gives_zero_gradient():
    gen = LinearGenerator(2, 2, seed=0)
    x = np.array([0.5, -1.0])
    field = MixtureVelocityField(GaussianMixture.isotropic(x[None], 1e-7), RF)
    theta = np.linalg.solve(gen.A, x - gen.b)
    g = rfds_grad(field, RF, gen, theta, np.ones(2), 0.5, None, DistillConfig())
    assert np.max(np.abs(g)) < 1e-5


@pytest.mark.parametrize("gen", GENERATORS, ids=lambda g: type(g).__name__)
def test_rfds_equals_sds_through_bridge(sched, gen, rng):
    score = MixtureScoreField(MIX3, sched)
    bridged = BridgedVelocityField(score, sched)
    cfg = DistillConfig(cfg_scale=4.0)
    for _ in range(100):
        theta = rng.normal(size=gen.n_params) * 2
        view = gen.draw_view(rng, theta)
        e, t, c = rng.normal(size=2), rng.uniform(0.05, 0.95), int(rng.integers(0, 3))
        a = rfds_grad(bridged, sched, gen, theta, e, t, c, cfg, view)
        b = sds_grad(score, sched, gen, theta, e, t, c, cfg, view)
        assert cos(a, b) >= 1 - 1e-6
        ratio = a / b
        assert np.ptp(ratio) <= 1e-6 * np.abs(ratio).max()


def test_irfds_equals_isds_through_bridge(sched, rng):
    score = MixtureScoreField(MIX3, sched)
    bridged = BridgedVelocityField(score, sched)
    cfg = DistillConfig(gauss_reg_weight=0.0)
    for _ in range(100):
        x, e, t = rng.normal(size=2) * 2, rng.normal(size=2), rng.uniform(0.05, 0.95)
        a = irfds_grad(bridged, sched, x, e, t, None, cfg)
        b = isds_grad(score, sched, x, e, t, None, cfg)
        assert cos(a, b) >= 1 - 1e-6


def test_sds_special_cases(rng):
    e, t, sigma = rng.normal(size=(3, 2)), 0.4, 0.6
    theta = rng.normal(size=(3, 2))
    # eps_pred = -sigma * s equals eps exactly
    exact = FunctionField(lambda x, tt, c: -e / sigma)
    assert np.max(np.abs(sds_grad(exact, RF, IdentityGenerator(2), theta, e, t, None, DistillConfig()))) < 1e-12
    ones = FunctionField(lambda x, tt, c: 1.0)
    g = sds_grad(ones, RF, IdentityGenerator(2), theta, e, t, None, DistillConfig())
    np.testing.assert_allclose(g, -sigma - e)


def test_sds_points_with_rfds_on_unit_gaussian(rng):
    mix = GaussianMixture.isotropic(np.zeros((1, 2)), 1.0)
    theta, e, t = rng.normal(size=(50, 2)), rng.normal(size=(50, 2)), rng.uniform(0.05, 0.95, 50)
    a = rfds_grad(MixtureVelocityField(mix, RF), RF, IdentityGenerator(2), theta, e, t, None, DistillConfig())
    b = sds_grad(MixtureScoreField(mix, RF), RF, IdentityGenerator(2), theta, e, t, None, DistillConfig())
    np.testing.assert_allclose(a, b * (1.0 / t)[:, None], atol=1e-10)


def fd_loss(net, gen, theta, e, t, cond, scale, view):
    from rflab.fields import cfg_velocity

    x = gen.render(theta, view)
    r = cfg_velocity(net, interpolate(RF, x, e, t), t, cond, scale) - RF.alpha_dot * x - RF.sigma_dot * e
    return np.sum(r**2)


@pytest.mark.parametrize("seed", range(20))
def test_full_gradient_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    net = VelocityNet(2, 3, NetConfig(hidden=(int(r.integers(4, 33)),) * 2, n_freqs=4, embed_dim=3,
                                      zero_final=False), seed=seed)
    gen = GENERATORS[seed % 3]
    theta = r.normal(size=gen.n_params)
    view = gen.draw_view(r, theta)
    e, t, scale = r.normal(size=2), r.uniform(0.05, 0.95), [1.0, 3.0][seed % 2]
    cfg = DistillConfig(cfg_scale=scale)
    g = rfds_grad_full(net, RF, gen, theta, e, t, 1, cfg, view)
    h = 1e-6
    num = np.array([(fd_loss(net, gen, theta + h * d, e, t, 1, scale, view)
                     - fd_loss(net, gen, theta - h * d, e, t, 1, scale, view)) / (2 * h) for d in np.eye(gen.n_params)])
    assert np.max(np.abs(g - num)) <= 1e-4 * np.max(np.abs(num))


def test_full_gradient_needs_input_jacobian(rng):
    with pytest.raises(CapabilityError):
        rfds_grad_full(MixtureVelocityField(MIX3, RF), RF, IdentityGenerator(2), np.zeros(2), np.ones(2), 0.5,
                       None, DistillConfig(cfg_scale=1.0))


def test_full_gradient_counts_backwards(rng):
    net = VelocityNet(2, 3, NetConfig(hidden=(8,), zero_final=False))
    rfds_grad_full(net, RF, IdentityGenerator(2), np.zeros(2), np.ones(2), 0.5, 1, DistillConfig(cfg_scale=50.0))
    assert net.counters.snapshot() == (2, 2)


def test_identity_jacobian_is_collinear_with_rfds(rng):
    net = VelocityNet(2, 0, NetConfig(hidden=(8,), zero_final=False))
    cfg = DistillConfig(cfg_scale=1.0)
    for _ in range(20):
        theta, e, t = rng.normal(size=2), rng.normal(size=2), rng.uniform(0.05, 0.95)
        a = rfds_grad_full(net, RF, IdentityGenerator(2), theta, e, t, None, cfg, identity_jacobian=True)
        b = rfds_grad(net, RF, IdentityGenerator(2), theta, e, t, None, cfg)
        assert abs(cos(a, b)) >= 1 - 1e-12


class LinearJacobianField(FunctionField):
    # Jacobian alpha_dot / alpha * I cancels the -alpha_dot I term exactly
    def __init__(self, sched):
        super().__init__(lambda x, t, c: x / t)
        self.sched = sched

    def input_vjp(self, x, t, cond, upstream):
        alpha = schedule_eval(self.sched, t)[0]
        return self.sched.alpha_dot / alpha * upstream


def test_full_gradient_with_scaled_identity_jacobian_collapses(rng):
    f = LinearJacobianField(RF)
    g = rfds_grad_full(f, RF, IdentityGenerator(2), rng.normal(size=2), rng.normal(size=2), 0.3, None,
                       DistillConfig(cfg_scale=1.0))
    assert np.max(np.abs(g)) < 1e-12
    zero_res = FunctionField(lambda x, t, c: 0.0)
    zero_res.input_vjp = lambda x, t, c, up: up
    g = rfds_grad_full(zero_res, RF, IdentityGenerator(2), np.ones(2), np.ones(2), 0.3, None, DistillConfig(cfg_scale=1.0))
    assert np.all(g == 0.0)


def test_gauss_reg_gradient(rng):
    e = rng.normal(size=(3, 6))
    f = lambda v: v.mean() ** 2 + (v.var() - 1.0) ** 2
    h = 1e-6
    for row in range(3):
        num = [(f(e[row] + h * d) - f(e[row] - h * d)) / (2 * h) for d in np.eye(6)]
        np.testing.assert_allclose(gauss_reg_grad(e)[row], num, atol=1e-8)
    exact = np.array([1.0, -1.0, 1.0, -1.0])
    assert np.all(gauss_reg_grad(exact) == 0.0)


def test_irfds_grad_cases(rng):
    x, e, t = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), 0.4
    field = MixtureVelocityField(MIX3, RF)
    r = flow_residual(field, RF, x, e, t)
    np.testing.assert_array_equal(irfds_grad(field, RF, x, e, t, None, DistillConfig(gauss_reg_weight=0.0)), r)
    pm = MixtureVelocityField(GaussianMixture.isotropic(np.array([[0.3, 0.1]]), 1e-7), RF)
    g = irfds_grad(pm, RF, np.array([0.3, 0.1]), np.array([1.0, -1.0]), 0.5, None, DistillConfig())
    assert np.max(np.abs(g)) < 1e-5


def test_rfds_optimize_lr_zero_and_record(rng):
    field = MixtureVelocityField(MIX3, RF)
    init = rng.normal(size=(4, 2))
    theta, rec = rfds_optimize(field, RF, IdentityGenerator(2), init, None,
                               DistillConfig(lr=0.0, max_iters=20, keep_trace=True))
    assert np.array_equal(theta, init)
    assert rec.trace.shape == (21, 4, 2)
    assert list(rec.column("iter")) == list(range(20))
    assert {"residual_norm", "forwards", "backwards"} <= set(rec.columns)


def test_rfds_optimize_reaches_single_gaussian():
    mix = GaussianMixture.isotropic([[1.0, -2.0]], 0.5)
    init = np.random.default_rng(0).normal(0, 3, (20, 2))
    theta, _ = rfds_optimize(MixtureVelocityField(mix, RF), RF, IdentityGenerator(2), init, None,
                             DistillConfig(max_iters=1000))
    assert np.mean(-log_density(mix, RF, theta, 1.0)) < SINGLE_GAUSSIAN_RFDS_NLL


@pytest.mark.parametrize("method,expected", [("rfds", (2, 0)), ("irfds", (1, 0)), ("rfds_rev", (3, 0))])
def test_pass_counts_per_iteration(method, expected, rng):
    field = MixtureVelocityField(MIX3, RF)
    cfg = DistillConfig(max_iters=7)
    init = rng.normal(size=(5, 2))
    if method == "rfds":
        _, rec = rfds_optimize(field, RF, IdentityGenerator(2), init, 1, cfg)
    elif method == "irfds":
        _, rec = irfds_invert(field, RF, init, 1, DistillConfig(max_iters=7, cfg_scale=1.0))
    else:
        _, rec = rfds_rev_optimize(field, RF, IdentityGenerator(2), init, 1, cfg)
    assert (rec.summary["forwards_per_iter"], rec.summary["backwards_per_iter"]) == expected
    assert field.counters.snapshot() == (7 * expected[0], 0)


def test_sds_pass_count(rng):
    score = MixtureScoreField(MIX3, RF)
    sds_grad(score, RF, IdentityGenerator(2), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), 0.5, 2, DistillConfig())
    assert score.counters.snapshot() == (2, 0)


def test_rfds_rev_with_zero_inner_step_equals_rfds(rng):
    field = MixtureVelocityField(MIX3, RF)
    init = rng.normal(size=(6, 2)) * 3
    cfg = DistillConfig(max_iters=50, irfds_step_rule="constant", irfds_step=0.0, cfg_scale=5.0)
    for gen in GENERATORS[:1] + GENERATORS[2:]:
        a, ra = rfds_optimize(field, RF, gen, init, 0, cfg)
        b, rb = rfds_rev_optimize(field, RF, gen, init, 0, cfg)
        assert np.array_equal(a, b)
        assert np.array_equal(ra.column("residual_norm"), rb.column("residual_norm"))


def test_irfds_invert_point_mass_keeps_noise_without_regularizer():
    x = np.array([[0.3, 0.1]])
    field = MixtureVelocityField(GaussianMixture.isotropic(x, 1e-8), RF)
    e0 = np.array([[1.3, -0.4]])
    e, _ = irfds_invert(field, RF, x, None, DistillConfig(gauss_reg_weight=0.0, max_iters=200), eps0=e0)
    np.testing.assert_allclose(e, e0, atol=1e-4)


def test_irfds_invert_moves_toward_preimage():
    # on the exact oracle the sampled point's own noise is the target
    from rflab.sampler import SamplerConfig, euler_sample

    mix = GaussianMixture.isotropic([[2.0, 0.0], [-2.0, 0.0]], 0.3)
    field = MixtureVelocityField(mix, RF)
    r = np.random.default_rng(5)
    e_true = r.normal(size=(32, 2))
    x, _ = euler_sample(field, RF, e_true, SamplerConfig(steps=200))
    e0 = r.normal(size=(32, 2))
    e, rec = irfds_invert(field, RF, x, None, DistillConfig(cfg_scale=1.0, lr=3e-2, max_iters=1000), eps0=e0)
    before = np.median(np.linalg.norm(e0 - e_true, axis=1))
    after = np.median(np.linalg.norm(e - e_true, axis=1))
    assert after < 0.5 * before


def test_divergence_is_reported():
    blow = FunctionField(lambda x, t, c: np.full_like(x, np.inf))
    with pytest.raises(DivergenceError):
        rfds_optimize(blow, RF, IdentityGenerator(2), np.zeros((2, 2)), None, DistillConfig(max_iters=3))
