"""Continuous-time predictive-coding loop for a single saccade.

Expectations mu = (x_o, v_o, v_h, rho, a) are integrated against
proprioceptive and foveal input under empirical priors eta from the
discrete level. Proprioception is the remaining-displacement signal
(target minus eye), predicted as v_o - x_o; the foveal prediction is
the hypothesis-weighted decoder mixture sampled at the fovea grid, its
precision scaled by exp(-H(softmax(v_h)) / ln 10) so uncertain
hypotheses carry less weight. The action channel is a reflex arc: the
velocity command follows the precision-weighted proprioceptive error,
with prior demand eta_a = demand_gain * (v_o - x_o).

Integration is explicit Euler with per-block Jacobi preconditioning
(each gradient divided by the summed precisions entering its block):
with the strong default precisions a raw gradient step would diverge,
and the preconditioner preserves both the descent direction and the
within-block precision ratios.

An all-zero fovea patch gates the exteroceptive pathway off (nothing in
view carries no visual evidence), which also silences the pathway when
the fovea leaves the stimulus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import vae
from .grid import grid_to_pixel
from .link import LinkDescend, loglik_increments

H_MAX = np.log(10.0)
FOVEA = 8


class IntegrationDivergedError(RuntimeError):
    pass


@dataclass
class PrecisionConfig:
    pi_p: float = float(np.exp(8.0))
    pi_e: float = float(np.exp(4.0))
    pi_x: float = float(np.exp(4.0))
    pi_a: float = float(np.exp(4.0))

    def __post_init__(self):
        if min(self.pi_p, self.pi_e, self.pi_x, self.pi_a) <= 0:
            raise ValueError("precisions must be positive")


@dataclass
class EngineConfig:
    precisions: PrecisionConfig = field(default_factory=PrecisionConfig)
    steps: int = 16
    jitter_scale: float = 1.0
    rate: float = 8.0           # gain on preconditioned gradients
    demand_gain: float = 5.0    # eta_a = demand_gain * (v_o - x_o)
    prior_floor: float = 1e-4   # clamp for ln eta_h
    guard: float = 1e6          # divergence bound on |mu|
    pi_link: float = float(np.exp(1.5))  # evidence precision for reduced models


@dataclass
class GenExpectations:
    x_o: np.ndarray   # (2,) believed eye position, grid units
    v_o: np.ndarray   # (2,) target cause
    v_h: np.ndarray   # (10,) hypothesis log-weights
    rho: np.ndarray   # (10,) continuous code
    a: np.ndarray     # (2,) velocity command

    def __post_init__(self):
        for name in ("x_o", "v_o", "v_h", "rho", "a"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            setattr(self, name, v)

    def copy(self) -> "GenExpectations":
        return GenExpectations(self.x_o.copy(), self.v_o.copy(), self.v_h.copy(),
                               self.rho.copy(), self.a.copy())

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(getattr(self, n))))
                   for n in ("x_o", "v_o", "v_h", "rho", "a"))


@dataclass
class FoveaSample:
    patch: np.ndarray   # (8, 8) in [0, 1]
    center: np.ndarray  # (2,) requested center, continuous pixel (x, y)
    jitter: np.ndarray  # (2,) realized perturbation
    rows: np.ndarray    # (8,) sampled image rows (may be out of bounds)
    cols: np.ndarray    # (8,) sampled image cols


@dataclass
class StepRecord:
    mu: GenExpectations
    error_mag: dict
    F: float
    loglik: np.ndarray  # (10,) per-hypothesis increments L_m


@dataclass
class SaccadeTrace:
    steps: list
    final_mu: GenExpectations
    final_eye: np.ndarray
    eta: LinkDescend


def init_expectations(eta: LinkDescend, eye0: np.ndarray,
                      prior_floor: float = 1e-4) -> GenExpectations:
    ln_h = np.log(np.maximum(eta.eta_h, prior_floor))
    return GenExpectations(
        x_o=np.asarray(eye0, dtype=np.float64).copy(),
        v_o=np.asarray(eta.eta_o, dtype=np.float64).copy(),
        v_h=ln_h - ln_h.mean(),
        rho=np.zeros(10),
        a=np.zeros(2),
    )


# ---------------------------------------------------------------------------
# Sensory sampling
# ---------------------------------------------------------------------------

def _nearest_indices(center: float) -> np.ndarray:
    """Unit-spaced 8-point grid around center, rounded half-down."""
    pos = center + (np.arange(FOVEA) - (FOVEA - 1) / 2.0)
    return np.ceil(pos - 0.5).astype(int)


def sample_fovea(stimulus: np.ndarray, center, rng=None, jitter_scale: float = 0.0) -> FoveaSample:
    """8x8 nearest-pixel sample around center (+ Gaussian jitter), zero padded."""
    if not 0.0 <= jitter_scale <= 2.0:
        raise ValueError("jitter_scale must lie in [0, 2]")
    center = np.asarray(center, dtype=np.float64)
    jitter = (rng.normal(0.0, jitter_scale, size=2)
              if (rng is not None and jitter_scale > 0) else np.zeros(2))
    cx, cy = center + jitter
    cols = _nearest_indices(cx)
    rows = _nearest_indices(cy)
    h, w = stimulus.shape
    patch = np.zeros((FOVEA, FOVEA))
    rin = (rows >= 0) & (rows < h)
    cin = (cols >= 0) & (cols < w)
    patch[np.ix_(rin, cin)] = stimulus[np.ix_(rows[rin], cols[cin])]
    return FoveaSample(patch=patch, center=center, jitter=jitter, rows=rows, cols=cols)


def _gather_decode(decodes: np.ndarray, sample: FoveaSample) -> np.ndarray:
    """Sample decoded 784-images at the fovea grid, zero outside; (n, 64)."""
    n = decodes.shape[0]
    out = np.zeros((n, FOVEA * FOVEA))
    rin = (sample.rows >= 0) & (sample.rows < 28)
    cin = (sample.cols >= 0) & (sample.cols < 28)
    flat = (sample.rows[rin][:, None] * 28 + sample.cols[cin][None, :]).reshape(-1)
    mask = (rin[:, None] & cin[None, :]).reshape(-1)
    out[:, mask] = decodes[:, flat]
    return out


def _scatter_residual(res_patch: np.ndarray, sample: FoveaSample) -> np.ndarray:
    """Adjoint of _gather_decode for one residual patch; (784,)."""
    out = np.zeros(784)
    rin = (sample.rows >= 0) & (sample.rows < 28)
    cin = (sample.cols >= 0) & (sample.cols < 28)
    flat = (sample.rows[rin][:, None] * 28 + sample.cols[cin][None, :]).reshape(-1)
    mask = (rin[:, None] & cin[None, :]).reshape(-1)
    out[flat] = res_patch.reshape(-1)[mask]
    return out


# ---------------------------------------------------------------------------
# Prediction, errors, free energy
# ---------------------------------------------------------------------------

def predict(mu: GenExpectations, weights: vae.VaeWeights, sample: FoveaSample = None):
    """(y_p_hat, y_e_hat): remaining-displacement and foveal predictions.

    The foveal prediction is sampled around the believed eye position
    x_o unless an explicit fovea sample (its grid) is provided.
    """
    if sample is None:
        px = grid_to_pixel(mu.x_o)
        sample = FoveaSample(patch=np.zeros((FOVEA, FOVEA)), center=px,
                             jitter=np.zeros(2),
                             rows=_nearest_indices(px[1]), cols=_nearest_indices(px[0]))
    w = vae.softmax(mu.v_h)
    decodes = vae.decode_classes(weights, mu.rho)
    patches = _gather_decode(decodes, sample)
    y_e_hat = w @ patches
    y_p_hat = mu.v_o - mu.x_o
    return y_p_hat, y_e_hat.reshape(FOVEA, FOVEA)


@dataclass
class PredictionErrors:
    e_yp: np.ndarray   # (2,) proprioceptive sensory error
    e_ye: np.ndarray   # (64,) exteroceptive sensory error
    e_vo: np.ndarray   # (2,) target cause minus prior
    e_vh: np.ndarray   # (10,) hypothesis cause minus prior
    e_rho: np.ndarray  # (10,) code minus unit-prior mean
    e_x: np.ndarray    # (2,) motion estimate minus flow
    e_a: np.ndarray    # (2,) action minus velocity demand
    pi_e_eff: float    # entropy-scaled (and content-gated) extero precision
    gate: float        # 1.0 when the patch carries content

    def magnitudes(self) -> dict:
        return {k: float(np.linalg.norm(getattr(self, k)))
                for k in ("e_yp", "e_ye", "e_vo", "e_vh", "e_rho", "e_x", "e_a")}


def prediction_errors(y: tuple, mu: GenExpectations, eta: LinkDescend,
                      weights: vae.VaeWeights, cfg: EngineConfig = None) -> PredictionErrors:
    """Stacked errors for sensory data y = (y_p, FoveaSample)."""
    if eta is None:
        raise ValueError("empirical priors eta are required")
    cfg = cfg or EngineConfig()
    y_p, sample = y
    w = vae.softmax(mu.v_h)
    decodes = vae.decode_classes(weights, mu.rho)
    patches = _gather_decode(decodes, sample)
    y_e_hat = w @ patches

    H = float(-np.sum(w * np.log(np.maximum(w, 1e-300))))
    gate = 1.0 if float(np.max(sample.patch)) > 1e-12 else 0.0
    pi_e_eff = cfg.precisions.pi_e * float(np.exp(-H / H_MAX)) * gate

    ln_h = np.log(np.maximum(eta.eta_h, cfg.prior_floor))
    ln_h = ln_h - ln_h.mean()
    return PredictionErrors(
        e_yp=np.asarray(y_p, dtype=np.float64) - (mu.v_o - mu.x_o),
        e_ye=sample.patch.reshape(-1) - y_e_hat,
        e_vo=mu.v_o - eta.eta_o,
        e_vh=mu.v_h - ln_h,
        e_rho=mu.rho.copy(),
        e_x=mu.a - (mu.v_o - mu.x_o),
        e_a=mu.a - cfg.demand_gain * (mu.v_o - mu.x_o),
        pi_e_eff=pi_e_eff,
        gate=gate,
    )


def free_energy(errors: PredictionErrors, cfg: EngineConfig = None) -> float:
    """Quadratic free energy 1/2 e'Pi e - 1/2 ln|Pi| (constant dropped).

    The exteroceptive block is excluded entirely when the content gate
    is closed.
    """
    cfg = cfg or EngineConfig()
    p = cfg.precisions
    F = 0.0
    blocks = [(errors.e_yp, p.pi_p), (errors.e_vo, p.pi_x), (errors.e_vh, p.pi_x),
              (errors.e_rho, 1.0), (errors.e_x, p.pi_x), (errors.e_a, p.pi_a)]
    if errors.gate > 0:
        blocks.append((errors.e_ye, errors.pi_e_eff))
    for e, pi in blocks:
        F += 0.5 * pi * float(e @ e) - 0.5 * len(e) * float(np.log(pi))
    return F


def free_energy_gradients(mu: GenExpectations, y: tuple, eta: LinkDescend,
                          weights: vae.VaeWeights, cfg: EngineConfig = None):
    """(F, exact dF/dmu per block, errors).

    The exteroceptive path differentiates through the decoder mixture
    and through the entropy-scaled precision itself, so these match
    central finite differences of free_energy.
    """
    cfg = cfg or EngineConfig()
    p = cfg.precisions
    errors = prediction_errors(y, mu, eta, weights, cfg)
    lam = cfg.demand_gain
    F = free_energy(errors, cfg)

    g_x = p.pi_p * errors.e_yp + p.pi_x * errors.e_x + lam * p.pi_a * errors.e_a
    g_vo = -p.pi_p * errors.e_yp - p.pi_x * errors.e_x - lam * p.pi_a * errors.e_a \
        + p.pi_x * errors.e_vo
    g_vh = p.pi_x * errors.e_vh.copy()
    g_rho = errors.e_rho.copy()
    g_a = p.pi_x * errors.e_x + p.pi_a * errors.e_a

    if errors.gate > 0:
        _, sample = y
        residual784 = _scatter_residual(errors.e_ye, sample)
        grad_zc, grad_logits = vae.decoder_grad(weights, mu.rho, vae.softmax(mu.v_h), residual784)
        g_rho += -errors.pi_e_eff * grad_zc
        g_vh += -errors.pi_e_eff * grad_logits
        # precision path: pi_e_eff depends on H(softmax(v_h))
        w = vae.softmax(mu.v_h)
        Hw = float(-np.sum(w * np.log(np.maximum(w, 1e-300))))
        dH = -w * (np.log(np.maximum(w, 1e-300)) + Hw)
        dF_dpi = 0.5 * float(errors.e_ye @ errors.e_ye) - 0.5 * len(errors.e_ye) / errors.pi_e_eff
        g_vh += dF_dpi * errors.pi_e_eff * (-dH / H_MAX)

    grads = {"x_o": g_x, "v_o": g_vo, "v_h": g_vh, "rho": g_rho, "a": g_a}
    return F, grads, errors


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def _preconditioners(cfg: EngineConfig, pi_e_eff: float) -> dict:
    p = cfg.precisions
    lam = cfg.demand_gain
    return {
        "x_o": p.pi_p + p.pi_x + lam * lam * p.pi_a,
        "v_o": p.pi_p + 2.0 * p.pi_x + lam * lam * p.pi_a,
        "v_h": p.pi_x + pi_e_eff,
        "rho": 1.0 + pi_e_eff,
        "a": p.pi_x + p.pi_a + p.pi_p,
    }


def integrate_step(mu: GenExpectations, y: tuple, eta: LinkDescend,
                   weights: vae.VaeWeights, dt: float, cfg: EngineConfig = None,
                   advance: bool = True):
    """One Euler step of the expectation/action flow.

    Returns (mu', F, errors). The eye-position block carries the
    velocity estimate as its motion term, and the action receives the
    proprioceptive reflex through the inverse model d y_p / d a = -1;
    both presuppose an advancing plant. With frozen sensory input
    (advance=False) they are dropped and the flow reduces to
    preconditioned descent on F.
    """
    cfg = cfg or EngineConfig()
    F, grads, errors = free_energy_gradients(mu, y, eta, weights, cfg)
    pre = _preconditioners(cfg, errors.pi_e_eff)
    k = cfg.rate

    new = mu.copy()
    motion = mu.a if advance else 0.0
    reflex = -cfg.precisions.pi_p * errors.e_yp if advance else 0.0
    new.x_o = mu.x_o + dt * (motion - k * grads["x_o"] / pre["x_o"])
    new.v_o = mu.v_o + dt * (-k * grads["v_o"] / pre["v_o"])
    new.v_h = mu.v_h + dt * (-k * grads["v_h"] / pre["v_h"])
    new.rho = mu.rho + dt * (-k * grads["rho"] / pre["rho"])
    new.a = mu.a + dt * (-k * (grads["a"] + reflex) / pre["a"])

    if new.max_abs() > cfg.guard:
        raise IntegrationDivergedError("expectation magnitude exceeded guard")
    return new, F, errors


def run_saccade(stimulus: np.ndarray, eta: LinkDescend, weights: vae.VaeWeights,
                cfg: EngineConfig = None, rng=None, eye0=None) -> SaccadeTrace:
    """Integrate one saccade (cfg.steps Euler steps, dt = 1/steps).

    The fovea is re-sampled every step as the eye moves; each step
    records the per-hypothesis log-likelihood increments of the fixated
    patch for the link layer.
    """
    cfg = cfg or EngineConfig()
    eye = np.asarray(eye0 if eye0 is not None else eta.eta_o, dtype=np.float64).copy()
    mu = init_expectations(eta, eye, cfg.prior_floor)
    dt = 1.0 / cfg.steps
    steps = []
    for _ in range(cfg.steps):
        sample = sample_fovea(stimulus, grid_to_pixel(eye), rng, cfg.jitter_scale)
        y = (eta.eta_o - eye, sample)

        decodes = vae.decode_classes(weights, mu.rho)
        patches = _gather_decode(decodes, sample)
        mix_eta = eta.eta_h @ patches
        if float(np.max(sample.patch)) > 1e-12:
            loglik = loglik_increments(sample.patch, patches, mix_eta, cfg.precisions.pi_e)
        else:
            loglik = np.zeros(10)  # content gate: an empty patch is not evidence

        mu, F, errors = integrate_step(mu, y, eta, weights, dt, cfg)
        eye = eye + dt * mu.a
        steps.append(StepRecord(mu=mu.copy(), error_mag=errors.magnitudes(),
                                F=F, loglik=loglik))
    return SaccadeTrace(steps=steps, final_mu=mu, final_eye=eye, eta=eta)
