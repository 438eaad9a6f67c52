import numpy as np
import pytest

from conftest import random_weights
from foveate import dynamics as dyn
from foveate import vae
from foveate.dynamics import (
    EngineConfig, FoveaSample, GenExpectations, PrecisionConfig,
    free_energy, free_energy_gradients, init_expectations, integrate_step,
    prediction_errors, run_saccade, sample_fovea,
)
from foveate.grid import cell_center, grid_to_pixel
from foveate.link import LinkDescend


@pytest.fixture()
def weights():
    return random_weights(np.random.default_rng(21))


def uniform_eta(target_cell=24):
    return LinkDescend(eta_o=cell_center(target_cell), eta_h=np.full(10, 0.1))


# ---------------------------------------------------------------------------
# Fovea sampling
# ---------------------------------------------------------------------------

def test_fovea_central_block_exact():
    rng = np.random.default_rng(0)
    img = rng.random((28, 28))
    s = sample_fovea(img, (14.0, 14.0), None, 0.0)
    assert np.array_equal(s.patch, img[10:18, 10:18])


def test_fovea_fully_out_of_bounds():
    img = np.ones((28, 28))
    s = sample_fovea(img, (-10.0, -10.0), None, 0.0)
    assert np.all(s.patch == 0.0)


def test_fovea_jitter_scale_monte_carlo():
    img = np.zeros((28, 28))
    rng = np.random.default_rng(1)
    draws = np.array([sample_fovea(img, (14, 14), rng, 1.5).jitter for _ in range(10_000)])
    sigma = draws.std(axis=0)
    assert np.all(np.abs(sigma - 1.5) / 1.5 < 0.05)


def test_fovea_rejects_bad_jitter():
    with pytest.raises(ValueError):
        sample_fovea(np.zeros((28, 28)), (14, 14), np.random.default_rng(0), 3.0)


# ---------------------------------------------------------------------------
# Prediction and errors
# ---------------------------------------------------------------------------

def test_predict_one_hot_equals_class_decode(weights):
    mu = GenExpectations(x_o=np.array([3.0, 3.0]), v_o=np.array([3.0, 3.0]),
                         v_h=np.zeros(10), rho=np.zeros(10), a=np.zeros(2))
    mu.v_h = np.full(10, -40.0)
    mu.v_h[4] = 40.0
    y_p_hat, y_e_hat = dyn.predict(mu, weights)
    decodes = vae.decode_classes(weights, mu.rho)
    px = grid_to_pixel(mu.x_o)
    sample = FoveaSample(patch=np.zeros((8, 8)), center=px, jitter=np.zeros(2),
                         rows=dyn._nearest_indices(px[1]), cols=dyn._nearest_indices(px[0]))
    expected = dyn._gather_decode(decodes, sample)[4].reshape(8, 8)
    assert np.max(np.abs(y_e_hat - expected)) < 1e-12


def test_predict_proprioception_zero_at_target(weights):
    mu = GenExpectations(x_o=np.array([2.0, 5.0]), v_o=np.array([2.0, 5.0]),
                         v_h=np.zeros(10), rho=np.zeros(10), a=np.zeros(2))
    y_p_hat, _ = dyn.predict(mu, weights)
    assert np.allclose(y_p_hat, 0.0)


def test_uniform_hypotheses_scale_precision_e_inverse(weights):
    eta = uniform_eta()
    cfg = EngineConfig()
    eye = cell_center(24)
    mu = init_expectations(eta, eye)
    img = np.ones((28, 28)) * 0.5
    sample = sample_fovea(img, grid_to_pixel(eye), None, 0.0)
    errors = prediction_errors((eta.eta_o - eye, sample), mu, eta, weights, cfg)
    assert np.isclose(errors.pi_e_eff, cfg.precisions.pi_e * np.exp(-1.0))


def test_errors_all_zero_at_equilibrium(weights):
    eta = uniform_eta()
    eye = cell_center(24)
    mu = init_expectations(eta, eye)
    img = np.zeros((28, 28))  # blank gates the extero channel
    sample = sample_fovea(img, grid_to_pixel(eye), None, 0.0)
    errors = prediction_errors((eta.eta_o - eye, sample), mu, eta, weights)
    for name in ("e_yp", "e_vo", "e_vh", "e_rho", "e_x", "e_a"):
        assert np.allclose(getattr(errors, name), 0.0, atol=1e-12), name
    assert errors.gate == 0.0


def test_extero_error_uniform_offset(weights):
    eta = uniform_eta()
    eye = cell_center(24)
    mu = init_expectations(eta, eye)
    decodes = vae.decode_classes(weights, mu.rho)
    px = grid_to_pixel(eye)
    sample = FoveaSample(patch=np.zeros((8, 8)), center=px, jitter=np.zeros(2),
                         rows=dyn._nearest_indices(px[1]), cols=dyn._nearest_indices(px[0]))
    pred = (vae.softmax(mu.v_h) @ dyn._gather_decode(decodes, sample)).reshape(8, 8)
    sample.patch = pred + 1.0
    errors = prediction_errors((eta.eta_o - eye, sample), mu, eta, weights)
    assert np.allclose(errors.e_ye, 1.0, atol=1e-10)


# ---------------------------------------------------------------------------
# Free energy
# ---------------------------------------------------------------------------

def _manual_errors(rng, pi_e_eff=1.0, gate=1.0):
    return dyn.PredictionErrors(
        e_yp=rng.normal(size=2), e_ye=rng.normal(size=64), e_vo=rng.normal(size=2),
        e_vh=rng.normal(size=10), e_rho=rng.normal(size=10), e_x=rng.normal(size=2),
        e_a=rng.normal(size=2), pi_e_eff=pi_e_eff, gate=gate)


def unit_cfg():
    return EngineConfig(precisions=PrecisionConfig(pi_p=1.0, pi_e=1.0, pi_x=1.0, pi_a=1.0))


def test_free_energy_minimum_at_zero_errors():
    rng = np.random.default_rng(2)
    zero = dyn.PredictionErrors(
        e_yp=np.zeros(2), e_ye=np.zeros(64), e_vo=np.zeros(2), e_vh=np.zeros(10),
        e_rho=np.zeros(10), e_x=np.zeros(2), e_a=np.zeros(2), pi_e_eff=1.0, gate=1.0)
    cfg = unit_cfg()
    F0 = free_energy(zero, cfg)
    assert np.isclose(F0, 0.0)  # -0.5 ln|I| = 0
    for _ in range(10):
        assert free_energy(_manual_errors(rng), cfg) >= F0


def test_free_energy_quadratic_increment():
    cfg = unit_cfg()
    e = dyn.PredictionErrors(
        e_yp=np.array([0.7, 0.0]), e_ye=np.zeros(64), e_vo=np.zeros(2),
        e_vh=np.zeros(10), e_rho=np.zeros(10), e_x=np.zeros(2), e_a=np.zeros(2),
        pi_e_eff=1.0, gate=1.0)
    F1 = free_energy(e, cfg)
    e.e_yp = np.array([1.4, 0.0])
    F2 = free_energy(e, cfg)
    assert np.isclose(F2 - F1, 3.0 * 0.7**2 / 2.0, atol=1e-12)


def test_free_energy_matches_direct_summation():
    rng = np.random.default_rng(3)
    p = PrecisionConfig(pi_p=3.0, pi_e=5.0, pi_x=0.5, pi_a=2.0)
    cfg = EngineConfig(precisions=p)
    errors = _manual_errors(rng, pi_e_eff=4.2, gate=1.0)
    blocks = [(errors.e_yp, 3.0), (errors.e_vo, 0.5), (errors.e_vh, 0.5),
              (errors.e_rho, 1.0), (errors.e_x, 0.5), (errors.e_a, 2.0),
              (errors.e_ye, 4.2)]
    oracle = sum(0.5 * pi * np.sum(e**2) - 0.5 * len(e) * np.log(pi) for e, pi in blocks)
    assert abs(free_energy(errors, cfg) - oracle) < 1e-12


# ---------------------------------------------------------------------------
# Gradients vs finite differences
# ---------------------------------------------------------------------------

def _random_state(rng, weights, eta):
    mu = GenExpectations(
        x_o=rng.normal(3.0, 1.0, size=2), v_o=rng.normal(3.0, 1.0, size=2),
        v_h=rng.normal(0.0, 0.8, size=10), rho=rng.normal(0.0, 0.8, size=10),
        a=rng.normal(0.0, 0.5, size=2))
    img = rng.random((28, 28))
    sample = sample_fovea(img, grid_to_pixel(mu.x_o + rng.normal(0, 0.3, 2)), None, 0.0)
    y = (eta.eta_o - mu.x_o + rng.normal(0, 0.2, 2), sample)
    return mu, y


def fd_gradient(mu, y, eta, weights, cfg, block, h=1e-5):
    base = getattr(mu, block)
    g = np.zeros_like(base)
    for i in range(len(base)):
        for sign in (1.0, -1.0):
            p = mu.copy()
            v = getattr(p, block).copy()
            v[i] += sign * h
            setattr(p, block, v)
            errs = prediction_errors(y, p, eta, weights, cfg)
            g[i] += sign * free_energy(errs, cfg)
    return g / (2 * h)


def test_gradients_match_finite_differences(weights):
    rng = np.random.default_rng(4)
    eta = LinkDescend(eta_o=cell_center(10), eta_h=vae.softmax(rng.normal(size=10)))
    cfg = EngineConfig(precisions=PrecisionConfig(pi_p=20.0, pi_e=8.0, pi_x=3.0, pi_a=5.0))
    worst = 0.0
    for _ in range(20):
        mu, y = _random_state(rng, weights, eta)
        F, grads, _ = free_energy_gradients(mu, y, eta, weights, cfg)
        for block in ("x_o", "v_o", "v_h", "rho", "a"):
            fd = fd_gradient(mu, y, eta, weights, cfg, block)
            scale = max(np.linalg.norm(fd), 1e-6)
            rel = np.linalg.norm(grads[block] - fd) / scale
            worst = max(worst, rel)
    assert worst <= 1e-3, worst


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def test_equilibrium_is_fixed_point(weights):
    eta = uniform_eta()
    eye = cell_center(24)
    mu = init_expectations(eta, eye)
    sample = sample_fovea(np.zeros((28, 28)), grid_to_pixel(eye), None, 0.0)
    y = (eta.eta_o - eye, sample)
    dt = 1.0 / 16
    new, F, _ = integrate_step(mu, y, eta, weights, dt)
    for name in ("x_o", "v_o", "v_h", "rho", "a"):
        assert np.max(np.abs(getattr(new, name) - getattr(mu, name))) <= 1e-9 * dt, name


def test_displacement_increases_toward_target(weights):
    """Commanded 3 cells right on a blank stimulus: pure proprioceptive drive."""
    eta = LinkDescend(eta_o=cell_center(24) + np.array([3.0, 0.0]), eta_h=np.full(10, 0.1))
    trace = run_saccade(np.zeros((28, 28)), eta, weights, EngineConfig(jitter_scale=0.0),
                        eye0=cell_center(24))
    xs = [cell_center(24)[0]] + [float(s.mu.x_o[0]) for s in trace.steps]
    assert all(b > a - 1e-12 for a, b in zip(xs, xs[1:]))
    assert xs[-1] > xs[0] + 2.0


def test_descent_on_frozen_input(weights):
    """Frozen input (non-advancing plant): F never increases at dt <= 0.05."""
    rng = np.random.default_rng(5)
    eta = LinkDescend(eta_o=cell_center(17), eta_h=vae.softmax(rng.normal(size=10)))
    cfg = EngineConfig()
    for trial in range(5):
        mu, y = _random_state(rng, weights, eta)
        Fs = []
        for _ in range(16):
            errs = prediction_errors(y, mu, eta, weights, cfg)
            Fs.append(free_energy(errs, cfg))
            mu, _, _ = integrate_step(mu, y, eta, weights, 0.05, cfg, advance=False)
        assert all(b <= a + 1e-9 for a, b in zip(Fs, Fs[1:])), Fs


def test_divergence_guard(weights):
    eta = uniform_eta()
    mu = init_expectations(eta, cell_center(24))
    mu.rho = np.full(10, 9e5)
    mu.a = np.full(2, 9e5)
    sample = sample_fovea(np.ones((28, 28)), (14, 14), None, 0.0)
    y = (np.array([1e6, 1e6]), sample)
    with pytest.raises(dyn.IntegrationDivergedError):
        for _ in range(50):
            mu, _, _ = integrate_step(mu, y, eta, weights, 0.5)


def test_run_saccade_trace_length(weights):
    eta = uniform_eta()
    trace = run_saccade(np.zeros((28, 28)), eta, weights,
                        EngineConfig(jitter_scale=0.0), eye0=cell_center(0))
    assert len(trace.steps) == 16


def test_blank_stimulus_keeps_hypotheses(weights):
    eta = LinkDescend(eta_o=cell_center(30), eta_h=np.full(10, 0.1))
    mu0 = init_expectations(eta, cell_center(24))
    trace = run_saccade(np.zeros((28, 28)), eta, weights,
                        EngineConfig(jitter_scale=0.0), eye0=cell_center(24))
    assert np.max(np.abs(trace.final_mu.v_h - mu0.v_h)) < 1e-6
    assert np.allclose([s.loglik for s in trace.steps], 0.0, atol=1e-12)


def test_eye_monotone_distance_on_blank(weights):
    eta = LinkDescend(eta_o=cell_center(6), eta_h=np.full(10, 0.1))
    eye0 = cell_center(42)
    trace = run_saccade(np.zeros((28, 28)), eta, weights,
                        EngineConfig(jitter_scale=0.0), eye0=eye0)
    dists = [np.linalg.norm(eye0 - eta.eta_o)]
    eye = eye0.copy()
    # reconstruct eye path from actions
    dt = 1.0 / 16
    for s in trace.steps:
        eye = eye + dt * s.mu.a
        dists.append(float(np.linalg.norm(eye - eta.eta_o)))
    assert all(b <= a + 1e-9 for a, b in zip(dists, dists[1:]))


def test_saccade_lands_near_target(weights):
    for target, start in ((6, 42), (24, 0), (45, 3)):
        eta = LinkDescend(eta_o=cell_center(target), eta_h=np.full(10, 0.1))
        trace = run_saccade(np.zeros((28, 28)), eta, weights,
                            EngineConfig(jitter_scale=0.0), eye0=cell_center(start))
        assert np.linalg.norm(trace.final_eye - eta.eta_o) <= 0.5
