"""Objective-model side: simulate subjects, score behavior traces, and
recover (preference, policy inverse-precision) by variational Laplace.

Replay conditions on the trace's recorded fixations, so the belief
trajectories and the preference-independent parts of every policy's
expected free energy can be cached once per trace; each objective
evaluation then reduces to re-softmaxing the cached energies under the
candidate (c, beta). The optimizer ascends the free energy
(log-likelihood plus Gaussian priors over c and ln beta) with central
finite-difference gradients and a backtracking line search; the
posterior covariance is the inverse negative finite-difference Hessian
at the optimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mdp
from .dynamics import EngineConfig
from .grid import cell_footprint
from .mdp import DECISION_LOC, NO_REPORT, TaskConfig, build_model
from .priority import PriorityAtlas
from .rng import trial_rng
from .trial import TrialSetup, run_trial
from .vae import VaeWeights

PROB_FLOOR = 1e-12
SACCADE_MS = 200.0


@dataclass
class SubjectiveParams:
    c_pref: float = 6.0
    beta: float = 1.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class BehaviorTrace:
    trial_id: int
    stimulus_id: int
    fixations: list        # (step, cell) pairs
    report: int            # 0..9 or None when undecided
    correct: bool

    def __post_init__(self):
        if len(self.fixations) > 8:
            raise ValueError("at most 8 saccades per trial")
        if self.report is not None and not 0 <= self.report <= 9:
            raise ValueError("report must be a digit class or None")

    @property
    def elapsed_ms(self) -> list:
        return [SACCADE_MS * (i + 1) for i in range(len(self.fixations))]


def format_trace(trace: BehaviorTrace) -> str:
    cells = ",".join(str(c) for _, c in trace.fixations)
    rep = "U" if trace.report is None else str(trace.report)
    return (f"{trace.trial_id}\t{trace.stimulus_id}\tfix=({cells})"
            f"\treport={rep}\tcorrect={1 if trace.correct else 0}")


def parse_trace(line: str) -> BehaviorTrace:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise ValueError(f"expected 5 tab-separated fields, got {len(parts)}")
    trial_id = int(parts[0])
    stimulus_id = int(parts[1])
    if not (parts[2].startswith("fix=(") and parts[2].endswith(")")):
        raise ValueError("malformed fixation field")
    inner = parts[2][len("fix=("):-1]
    cells = [int(c) for c in inner.split(",")] if inner else []
    if not parts[3].startswith("report="):
        raise ValueError("malformed report field")
    rep_str = parts[3][len("report="):]
    report = None if rep_str == "U" else int(rep_str)
    if parts[4] not in ("correct=0", "correct=1"):
        raise ValueError("malformed correct field")
    correct = parts[4] == "correct=1"
    return BehaviorTrace(trial_id=trial_id, stimulus_id=stimulus_id,
                         fixations=[(i, c) for i, c in enumerate(cells)],
                         report=report, correct=correct)


def write_traces(path, traces: list) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in traces:
            f.write(format_trace(t) + "\n")


def read_traces(path) -> list:
    with open(path, encoding="utf-8") as f:
        return [parse_trace(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def make_setup(params: SubjectiveParams, atlas: PriorityAtlas, weights: VaeWeights,
               engine: EngineConfig = None, mode: str = "sample") -> TrialSetup:
    config = TaskConfig(c_pref=max(params.c_pref, 1e-6))
    model = build_model(config, atlas)
    return TrialSetup(model=model, weights=weights,
                      engine=engine or EngineConfig(), mode=mode)


def stimuli_per_class(dataset, per_class: int, seed: int = 0) -> list:
    """(stimulus_id, image, label) drawn round-robin from each class."""
    rng = np.random.default_rng([seed, 0xD5])
    picks = []
    for d in range(10):
        ids = np.flatnonzero(dataset.labels == d)
        chosen = rng.choice(ids, size=per_class, replace=per_class > len(ids))
        picks.extend(int(i) for i in chosen)
    return [(i, dataset.image_float(i), int(dataset.labels[i])) for i in picks]


def simulate_subject(params: SubjectiveParams, stimuli: list, seed: int, *,
                     atlas: PriorityAtlas, weights: VaeWeights,
                     engine: EngineConfig = None, mode: str = "sample") -> list:
    """Run the full pipeline over the stimuli; deterministic in seed."""
    setup = make_setup(params, atlas, weights, engine, mode)
    traces = []
    for trial_id, (sid, image, label) in enumerate(stimuli):
        rng = trial_rng(seed, trial_id)
        rec = run_trial(setup, image, label, rng, beta=params.beta)
        report = None if rec.report == NO_REPORT else rec.report
        traces.append(BehaviorTrace(
            trial_id=trial_id, stimulus_id=sid, fixations=list(rec.fixations),
            report=report, correct=rec.correct))
    return traces


# ---------------------------------------------------------------------------
# Likelihood replay
# ---------------------------------------------------------------------------

def trace_actions(trace: BehaviorTrace, horizon: int = 9) -> list:
    """Composite action sequence implied by a trace."""
    actions = [(cell, NO_REPORT) for _, cell in trace.fixations]
    if trace.report is not None:
        actions.append((DECISION_LOC, trace.report))
    elif len(actions) == horizon - 1:
        actions.append((DECISION_LOC, NO_REPORT))  # declined to report
    return actions


@dataclass
class ReplayCache:
    """Preference-independent per-step quantities of one replayed trace."""
    steps: list  # (G_base, neg_entropy_fb, o_fb, chosen_pos) per planning step


def build_replay_cache(trace: BehaviorTrace, stimulus: np.ndarray, *,
                       atlas: PriorityAtlas, weights: VaeWeights,
                       engine: EngineConfig = None) -> ReplayCache:
    """One full pipeline replay conditioned on the recorded fixations."""
    setup = make_setup(SubjectiveParams(c_pref=4.0, beta=1.0), atlas, weights,
                       engine, mode="argmax")
    actions = trace_actions(trace, setup.model.T)
    rec = run_trial(setup, stimulus, label=0, rng=None, beta=1.0,
                    forced_actions=actions)
    model = setup.model
    steps = []
    for (idx, _q, chosen), G_parts in zip(rec.q_history, rec.G_history):
        G_base, o_fb = G_parts
        pos = int(np.flatnonzero(idx == chosen)[0])
        o = np.maximum(o_fb, PROB_FLOOR)
        neg_entropy = np.sum(o * np.log(o), axis=1)
        steps.append((G_base, neg_entropy, o_fb, pos))
    return ReplayCache(steps=steps)


def _log_pref(c: float) -> np.ndarray:
    C = np.array([c, -c, 0.0])
    return C - (np.max(C) + np.log(np.sum(np.exp(C - np.max(C)))))


def cache_loglik(cache: ReplayCache, c: float, beta: float) -> float:
    """ln prod_t Q(u_t | history) under the cached replay."""
    ln_pref = _log_pref(c)
    gamma = 1.0 / beta
    total = 0.0
    for G_base, neg_entropy, o_fb, pos in cache.steps:
        G = G_base + neg_entropy - o_fb @ ln_pref
        q = mdp.softmax(-gamma * G)
        total += float(np.log(max(q[pos], PROB_FLOOR)))
    return total


def action_likelihood(trace: BehaviorTrace, params: SubjectiveParams, *,
                      stimulus: np.ndarray, atlas: PriorityAtlas,
                      weights: VaeWeights, engine: EngineConfig = None) -> float:
    """Log-likelihood of one trace's actions under subjective parameters."""
    cache = build_replay_cache(trace, stimulus, atlas=atlas, weights=weights,
                               engine=engine)
    return cache_loglik(cache, params.c_pref, params.beta)


# ---------------------------------------------------------------------------
# Variational Laplace inversion
# ---------------------------------------------------------------------------

@dataclass
class GaussianPriors:
    c_mean: float = 4.0
    c_sd: float = 2.0
    lnb_mean: float = 0.0
    lnb_sd: float = 1.0


@dataclass
class InvertOptions:
    atlas: PriorityAtlas = None
    weights: VaeWeights = None
    engine: EngineConfig = None
    stimuli: dict = None          # stimulus_id -> (image, label)
    max_iter: int = 100
    tol: float = 1e-4
    fd_h: float = 1e-2


@dataclass
class InversionResult:
    mean: np.ndarray              # (c_pref, ln beta)
    covariance: np.ndarray        # 2x2
    free_energy: list             # per-iteration trajectory, non-decreasing
    iterations: int
    reliable: bool = True

    @property
    def c_pref(self) -> float:
        return float(self.mean[0])

    @property
    def beta(self) -> float:
        return float(np.exp(self.mean[1]))


def invert(traces: list, priors: GaussianPriors = None,
           opts: InvertOptions = None) -> InversionResult:
    """Recover (c, ln beta) from traces by free-energy ascent."""
    priors = priors or GaussianPriors()
    if opts is None or opts.stimuli is None:
        raise ValueError("opts.stimuli must map stimulus ids to images")

    caches = [
        build_replay_cache(t, opts.stimuli[t.stimulus_id][0], atlas=opts.atlas,
                           weights=opts.weights, engine=opts.engine)
        for t in traces
    ]

    def objective(theta: np.ndarray) -> float:
        c, lnb = float(theta[0]), float(theta[1])
        beta = float(np.exp(np.clip(lnb, -10, 10)))
        ll = sum(cache_loglik(cache, c, beta) for cache in caches)
        lp = (-0.5 * ((c - priors.c_mean) / priors.c_sd) ** 2
              - 0.5 * ((lnb - priors.lnb_mean) / priors.lnb_sd) ** 2)
        return ll + lp

    theta = np.array([priors.c_mean, priors.lnb_mean])
    h = opts.fd_h
    trajectory = [objective(theta)]
    iterations = 0
    for _ in range(opts.max_iter):
        iterations += 1
        grad = np.zeros(2)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            grad[i] = (objective(theta + e) - objective(theta - e)) / (2 * h)
        if np.linalg.norm(grad) < 1e-10:
            break
        step = grad / max(np.linalg.norm(grad), 1.0)
        alpha = 1.0
        improved = False
        for _ in range(25):
            cand = theta + alpha * step
            F_cand = objective(cand)
            if F_cand > trajectory[-1]:
                theta = cand
                trajectory.append(F_cand)
                improved = True
                break
            alpha *= 0.5
        if not improved or abs(trajectory[-1] - trajectory[-2]) < opts.tol:
            break

    # Laplace covariance from the FD Hessian at the optimum
    H = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            ei, ej = np.zeros(2), np.zeros(2)
            ei[i] = h
            ej[j] = h
            H[i, j] = (objective(theta + ei + ej) - objective(theta + ei - ej)
                       - objective(theta - ei + ej) + objective(theta - ei - ej)) / (4 * h * h)
    H = 0.5 * (H + H.T)
    reliable = True
    prec = -H
    eig = np.linalg.eigvalsh(prec)
    if eig.min() <= 0:
        prec = prec + (1e-6 - eig.min()) * np.eye(2)
        eig = np.linalg.eigvalsh(prec)
        if eig.min() <= 0:
            reliable = False
            prec = np.eye(2)
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    return InversionResult(mean=theta, covariance=cov, free_energy=trajectory,
                           iterations=iterations, reliable=reliable)


# ---------------------------------------------------------------------------
# Behavioral metrics
# ---------------------------------------------------------------------------

def behavioral_metrics(traces: list, stimuli=None) -> dict:
    """Aggregate accuracy, saccade count, fixation duration, coverage."""
    if not traces:
        raise ValueError("empty trace set")
    accuracy = float(np.mean([t.correct for t in traces]))
    mean_saccades = float(np.mean([len(t.fixations) for t in traces]))

    durations = []
    coverages = []
    for t in traces:
        cells = [c for _, c in t.fixations]
        run = 1
        for a, b in zip(cells, cells[1:]):
            if a == b:
                run += 1
            else:
                durations.append(run * SACCADE_MS)
                run = 1
        if cells:
            durations.append(run * SACCADE_MS)
        seen = set()
        for c in cells:
            seen |= cell_footprint(c)
        coverages.append(len(seen) / 784.0)
    return {
        "accuracy": accuracy,
        "mean_saccades": mean_saccades,
        "mean_fixation_ms": float(np.mean(durations)) if durations else 0.0,
        "pct_unique_pixels": float(np.mean(coverages)),
    }


def sweep(param_grid: list, stimuli: list, seed: int, *, atlas: PriorityAtlas,
          weights: VaeWeights, engine: EngineConfig = None) -> list:
    """behavioral_metrics at every (c, beta) grid point; CSV-ready rows."""
    rows = []
    for c, beta in param_grid:
        traces = simulate_subject(SubjectiveParams(c_pref=c, beta=beta), stimuli,
                                  seed, atlas=atlas, weights=weights, engine=engine)
        metrics = behavioral_metrics(traces)
        rows.append({"param_c": c, "param_beta": beta, **metrics})
    return rows
