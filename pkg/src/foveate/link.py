"""Bidirectional interface between the discrete planner and the
continuous loop.

Descending: policy-averaged outcome predictions become empirical priors
(a target location and a class prior) for one saccade. Ascending: each
of the 500 reduced models (class hypothesis x target location) carries
an energy equal to its negative log prior minus the evidence integral
accumulated while fixating; the softmax over model energies,
marginalized onto classes, replaces the digit outcome of the discrete
level. Only the ten models at the fixated location gather evidence; the
rest keep prior-only energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import cell_center
from .mdp import M_DIGIT, M_WHERE, N_CLASSES, N_WHERE

PRIOR_FLOOR = 1e-12


@dataclass
class ReducedModelSet:
    """Hypothesis-at-location priors, indexed (class h, location l)."""
    n_classes: int = N_CLASSES
    n_locations: int = N_WHERE

    @property
    def n_models(self) -> int:
        return self.n_classes * self.n_locations


@dataclass
class LinkDescend:
    eta_o: np.ndarray  # (2,) grid coordinates of the expected target
    eta_h: np.ndarray  # (10,) class prior simplex

    def __post_init__(self):
        self.eta_h = np.asarray(self.eta_h, dtype=np.float64)
        if abs(self.eta_h.sum() - 1.0) > 1e-8:
            raise ValueError("eta_h must be a simplex")


@dataclass
class EvidenceAccumulator:
    location: int
    integral: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES))
    steps: int = 0


def descend(q_pi: np.ndarray, predictions: list) -> list:
    """Bayesian model average of per-policy outcome predictions.

    predictions[p][m] is policy p's predicted distribution for modality
    m; the average is taken under q_pi.
    """
    q = np.asarray(q_pi, dtype=np.float64)
    n_modalities = len(predictions[0])
    out = []
    for m in range(n_modalities):
        acc = np.zeros_like(np.asarray(predictions[0][m], dtype=np.float64))
        for p, pred in enumerate(predictions):
            acc += q[p] * np.asarray(pred[m], dtype=np.float64)
        out.append(acc)
    return out


def to_priors(o_tau: list, reduced_set: ReducedModelSet, mode: str = "soft") -> LinkDescend:
    """Empirical priors for the continuous level from predicted outcomes."""
    p_digit = np.asarray(o_tau[M_DIGIT], dtype=np.float64)
    p_where = np.asarray(o_tau[M_WHERE], dtype=np.float64)
    total = p_where.sum()
    if total <= 0 or p_digit.sum() <= 0:
        raise ValueError("degenerate outcome distribution")
    p_where = p_where / total
    if mode == "hard":
        eta_o = cell_center(int(np.argmax(p_where)))
    else:
        centers = np.stack([cell_center(l) for l in range(reduced_set.n_locations)])
        eta_o = p_where @ centers
    return LinkDescend(eta_o=eta_o, eta_h=p_digit / p_digit.sum())


def loglik_increments(y_patch: np.ndarray, class_patches: np.ndarray,
                      mixture_patch: np.ndarray, pi_e: float) -> np.ndarray:
    """L_m per class: Gaussian log-likelihood of the observed patch under
    the class-h prediction minus under the eta-mixture prediction."""
    y = np.asarray(y_patch, dtype=np.float64).reshape(-1)
    d_mix = float(np.sum((y - np.asarray(mixture_patch).reshape(-1)) ** 2))
    d_cls = np.sum((y[None, :] - np.asarray(class_patches).reshape(len(class_patches), -1)) ** 2, axis=1)
    return 0.5 * pi_e * (d_mix - d_cls)


def accumulate(trace_step, reduced_set: ReducedModelSet, eta: LinkDescend,
               acc: EvidenceAccumulator, dt: float) -> EvidenceAccumulator:
    """Add one integration step's evidence for the fixated location."""
    acc.integral = acc.integral + np.asarray(trace_step.loglik, dtype=np.float64) * dt
    acc.steps += 1
    return acc


def ascend(o_prior: tuple, acc: EvidenceAccumulator) -> np.ndarray:
    """Posterior digit distribution from reduced-model energies.

    o_prior = (digit prior (10,), location prior (50,)). Model (h, l)
    has energy -ln(p_h * p_l) minus its evidence integral (zero away
    from the fixated location); the class marginal of softmax(-E) is
    returned.
    """
    p_digit, p_where = (np.asarray(p, dtype=np.float64) for p in o_prior)
    ln_prior = (np.log(np.maximum(p_digit, PRIOR_FLOOR))[:, None]
                + np.log(np.maximum(p_where, PRIOR_FLOOR))[None, :])
    energy = -ln_prior
    energy[:, acc.location] -= acc.integral
    w = np.exp(-(energy - energy.min()))
    post = w.sum(axis=1)
    return post / post.sum()
