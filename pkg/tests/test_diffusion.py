import numpy as np
import pytest

from jbmdiff import diffusion as dm
from jbmdiff.substrate import ag, grad_check, make_rng
from jbmdiff.substrate.autograd import Tensor


def test_schedule_two_steps():
    s = dm.build_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha, [0.9, 0.8])
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72])


def test_schedule_single_step():
    s = dm.build_schedule(1, 0.05, 0.05)
    assert s.alpha_bar[0] == pytest.approx(0.95)


@pytest.mark.parametrize("T", [1, 5, 10, 20, 1000])
def test_schedule_product_oracle(T):
    s = dm.build_schedule(T)
    beta = [1e-4 + (0.02 - 1e-4) * k / max(T - 1, 1) for k in range(T)]
    prod = 1.0
    for k, b in enumerate(beta):
        prod *= 1 - b
        assert abs(s.alpha_bar[k] - prod) < 1e-7
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta > 0) & (s.beta < 1))


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (1001, 1e-4, 0.02), (5, 0.0, 0.02), (5, 0.1, 0.05), (5, 1e-4, 1.0)])
def test_schedule_config_errors(args):
    with pytest.raises(dm.ConfigError):
        dm.build_schedule(*args)


def test_q_sample_limits():
    x0 = make_rng(0).standard_normal((4, 3))
    s = dm.build_schedule(3, 1e-9, 1e-9)
    xt, _ = dm.q_sample(x0, 3, s, make_rng(1))
    np.testing.assert_allclose(xt, x0, atol=1e-3)
    s = dm.build_schedule(5)
    xt, eps = dm.q_sample(np.zeros((4, 3)), 4, s, make_rng(2))
    np.testing.assert_allclose(xt, np.sqrt(1 - s.alpha_bar[3]) * eps)


def test_q_sample_bad_step():
    s = dm.build_schedule(5)
    for t in (0, 6):
        with pytest.raises(IndexError):
            dm.q_sample(np.zeros((1, 1)), t, s, make_rng(0))


@pytest.mark.parametrize("T", [5, 20])
def test_q_sample_moments(T):
    s = dm.build_schedule(T)
    x0 = np.array([[1.5, -0.7, 0.2]])
    n = 10_000
    for t in (1, (T + 1) // 2, T):
        xt, _ = dm.q_sample(np.repeat(x0, n, axis=0), t, s, make_rng(100 + t))
        ab = s.alpha_bar[t - 1]
        se_mean = np.sqrt((1 - ab) / n)
        se_var = (1 - ab) * np.sqrt(2 / (n - 1))
        assert np.all(np.abs(xt.mean(0) - np.sqrt(ab) * x0[0]) < 3 * se_mean)
        assert np.all(np.abs(xt.var(0, ddof=1) - (1 - ab)) < 3 * se_var)


@pytest.fixture
def denoiser():
    return dm.Denoiser(feat_dim=5, hidden=4, T=3, rng=make_rng(0))


def test_gate_by_zeros(denoiser):
    out = denoiser(make_rng(1).standard_normal((6, 5)), 2, np.zeros((6, 4)))
    np.testing.assert_array_equal(denoiser.hidden_state(np.ones((6, 5)), 2, np.zeros((6, 4))).data, 0)
    np.testing.assert_allclose(out.data, np.repeat(denoiser.out_b.data, 6, axis=0))


def test_gate_by_ones_is_plain_mlp(denoiser):
    x = make_rng(2).standard_normal((3, 5))
    t = np.array([1, 2, 3])
    proj = x @ denoiser.in_w.data + denoiser.in_b.data
    h = np.tanh(np.c_[proj, denoiser.time_emb.data[t - 1]] @ denoiser.w1.data + denoiser.b1.data)
    h = np.tanh(h @ denoiser.w2.data + denoiser.b2.data)
    expected = h @ denoiser.out_w.data + denoiser.out_b.data
    np.testing.assert_allclose(denoiser(x, t, np.ones((3, 4))).data, expected, rtol=1e-5)


def test_denoiser_shape_errors(denoiser):
    with pytest.raises(ValueError):
        denoiser(np.ones((3, 5)), 1, np.ones((2, 4)))
    with pytest.raises(ValueError):
        denoiser(np.ones((3, 6)), 1, np.ones((3, 4)))
    with pytest.raises(IndexError):
        denoiser(np.ones((3, 5)), 4, np.ones((3, 4)))


def test_denoiser_grad_check(denoiser):
    rng = make_rng(3)
    x0 = rng.standard_normal((6, 5))
    ec = rng.standard_normal((6, 4))

    def loss():
        return dm.diffusion_loss(x0, dm.build_schedule(3), ec, denoiser, make_rng(9))

    report = grad_check(loss, denoiser.parameters(), probe_count=60, tol=1e-4)
    assert report.passed, report.max_rel_error


def test_diffusion_loss_perfect_and_zero_predictors():
    x0 = make_rng(4).standard_normal((7, 3))
    s = dm.build_schedule(4)
    assert float(dm.diffusion_loss(x0, s, None, lambda xt, t, ec: Tensor(x0), make_rng(0)).data) == 0.0
    zero = dm.diffusion_loss(x0, s, None, lambda xt, t, ec: Tensor(np.zeros_like(x0)), make_rng(0))
    assert float(zero.data) == pytest.approx(np.mean(np.sum(x0**2, axis=1)) / 3)


def test_diffusion_loss_scripted_trace():
    x0 = make_rng(5).standard_normal((4, 2))
    s = dm.build_schedule(3)
    got = dm.diffusion_loss(x0, s, None, lambda xt, t, ec: Tensor(0.5 * xt), make_rng(42))
    # replay the same draws by hand: steps first, then noise
    rng = make_rng(42)
    t = rng.integers(1, 4, size=4)
    eps = rng.standard_normal(x0.shape)
    ab = s.alpha_bar[t - 1][:, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    assert float(got.data) == pytest.approx(np.mean((0.5 * xt - x0) ** 2), rel=1e-12)


def test_diffusion_loss_empty_batch(denoiser):
    with pytest.raises(ValueError):
        dm.diffusion_loss(np.zeros((0, 5)), dm.build_schedule(3), np.zeros((0, 4)), denoiser, make_rng(0))


@pytest.mark.parametrize("param", ["x0", "eps"])
def test_reverse_single_step_is_mean(denoiser, param):
    s = dm.build_schedule(1, 0.01, 0.01)
    den = dm.Denoiser(5, 4, 1, make_rng(0))
    rng = make_rng(6)
    x0 = rng.standard_normal((3, 5))
    ec = rng.standard_normal((3, 4))
    noise = make_rng(7).standard_normal(x0.shape)
    out = dm.reverse_denoise(x0, s, ec, den, noise=noise, parameterization=param)
    x1 = np.sqrt(s.alpha_bar[0]) * x0 + np.sqrt(1 - s.alpha_bar[0]) * noise
    f = den(x1, 1, ec).data
    if param == "eps":
        mu = (x1 - s.beta[0] / np.sqrt(1 - s.alpha_bar[0]) * f) / np.sqrt(s.alpha[0])
    else:
        mu = f  # q(x_0 | x_1, x̂_0) collapses onto x̂_0
    np.testing.assert_allclose(out, mu, rtol=1e-10)


def test_reverse_noise_free_limit_literal_mean(denoiser):
    s = dm.build_schedule(3, 1e-10, 1e-10)
    rng = make_rng(8)
    x0 = rng.standard_normal((4, 5))
    out = dm.reverse_denoise(x0, s, rng.standard_normal((4, 4)), denoiser, rng=rng, parameterization="eps")
    np.testing.assert_allclose(out, x0, atol=1e-3)


def test_reverse_deterministic_is_pure(denoiser):
    s = dm.build_schedule(3)
    rng = make_rng(9)
    x0, ec = rng.standard_normal((4, 5)), rng.standard_normal((4, 4))
    noise = rng.standard_normal(x0.shape)
    a = dm.reverse_denoise(x0, s, ec, denoiser, noise=noise)
    b = dm.reverse_denoise(x0, s, ec, denoiser, noise=noise)
    assert np.array_equal(a, b)
    c = dm.reverse_denoise(x0, s, ec, denoiser, mode="stochastic", noise=noise, rng=make_rng(1))
    assert not np.array_equal(a, c)


def test_reverse_rejects_nan_params(denoiser):
    denoiser.w1.data[0, 0] = np.nan
    with pytest.raises(dm.TrainingAborted):
        dm.reverse_denoise(np.ones((2, 5)), dm.build_schedule(3), np.ones((2, 4)), denoiser, rng=make_rng(0))


def test_blend():
    rng = make_rng(10)
    x0, xh = rng.standard_normal((5, 3)).astype(np.float32), rng.standard_normal((5, 3)).astype(np.float32)
    assert dm.blend(x0, xh, 0.0) is x0
    np.testing.assert_array_equal(dm.blend(x0, xh, 1.0), xh)
    np.testing.assert_allclose(dm.blend(x0, xh, 0.5), (x0 + xh) / 2, rtol=1e-6)
    for w in (0.1, 0.3, 0.9):
        np.testing.assert_allclose(dm.blend(x0, xh, w) - x0, w * (xh - x0), atol=1e-6)
    with pytest.raises(dm.ConfigError):
        dm.blend(x0, xh, 1.5)


def test_align_loss_degenerate_batch(caplog):
    assert float(dm.modality_align_loss(np.ones((1, 3)), np.ones((1, 3))).data) == 0.0
    assert "no negatives" in caplog.text


@pytest.mark.parametrize("n", [2, 5, 16])
def test_align_loss_uniform_softmax(n):
    rows = np.tile([[0.3, -1.0, 2.0]], (n, 1))
    assert float(dm.modality_align_loss(rows, rows, tau=1.0).data) == pytest.approx(np.log(n))


def test_align_loss_separation_limit():
    eye = np.eye(6)
    assert float(dm.modality_align_loss(eye, eye, tau=0.01).data) < 1e-30


def test_align_loss_grad_check():
    rng = make_rng(11)
    et, ev = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    pt, pv = (ag.Tensor(rng.standard_normal(s), requires_grad=True, name=n)
              for s, n in (((4, 2), "pt"), ((3, 2), "pv")))
    report = grad_check(lambda: dm.modality_align_loss(et, ev, 0.2, pt, pv), [pt, pv], probe_count=16)
    assert report.passed, report.max_rel_error
