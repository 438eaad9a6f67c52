"""One full gaze-contingent trial: the discrete planner commands
saccades, each saccade runs the continuous loop against the stimulus,
and the link layer turns accumulated evidence back into digit-outcome
posteriors for the next planning step.

The planner's fixation outcome is the commanded cell (the continuous
loop lands within tolerance and the residual carries over as the next
saccade's true starting eye position). Feature outcomes are the
stimulus's own quantized channel levels at the fixated cell; at the
decision location, which lies off the stimulus, they are uninformative
soft outcomes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mdp
from .dynamics import EngineConfig, run_saccade
from .grid import cell_center
from .link import EvidenceAccumulator, ReducedModelSet, accumulate, ascend, descend, to_priors
from .mdp import (
    DECISION_LOC, FB_CORRECT, FB_INCORRECT, FB_UNDECIDED, NO_REPORT,
    START_CELL, MdpModel, init_beliefs, predicted_outcomes, step_trial,
)
from .priority import N_LEVELS, grid_levels
from .vae import VaeWeights


@dataclass
class TrialSetup:
    model: MdpModel
    weights: VaeWeights
    engine: EngineConfig = field(default_factory=EngineConfig)
    mode: str = "sample"
    reduced: ReducedModelSet = field(default_factory=ReducedModelSet)


@dataclass
class TrialRecord:
    """Everything observable about one simulated or replayed trial."""
    fixations: list          # (step, cell) pairs, in saccade order
    report: int              # 0..9, or NO_REPORT when undecided
    correct: bool
    outcome_history: list    # per step: outcome vectors fed to the planner
    action_history: list     # composite actions
    q_history: list          # per step: (allowed indices, q over them, chosen index)
    digit_posts: list        # ascending digit posteriors per saccade
    saccade_traces: list     # SaccadeTrace per saccade (empty unless detailed)
    G_history: list = field(default_factory=list)  # (G_base, o_fb) per step, replay only
    final_beliefs: object = None


def _feature_outcomes(levels: np.ndarray, cell: int) -> list:
    if cell == DECISION_LOC:
        return [np.full(N_LEVELS, 1.0 / N_LEVELS) for _ in range(levels.shape[0])]
    r, c = divmod(cell, 7)
    return [int(levels[f, r, c]) - 1 for f in range(levels.shape[0])]


def _initial_outcomes(model: MdpModel, levels: np.ndarray) -> list:
    outs = []
    for name in model.modality_names:
        if name == "digit":
            outs.append(np.full(10, 0.1))
        elif name == "where":
            outs.append(START_CELL)
        elif name == "feedback":
            outs.append(FB_UNDECIDED)
        else:
            outs.append(None)
    feats = _feature_outcomes(levels, START_CELL)
    fi = 0
    for m, name in enumerate(model.modality_names):
        if name.startswith("feature_"):
            outs[m] = feats[fi]
            fi += 1
    return outs


def run_trial(setup: TrialSetup, stimulus: np.ndarray, label: int, rng,
              beta: float = 1.0, forced_actions: list = None,
              detailed: bool = False) -> TrialRecord:
    """Simulate one trial (or replay it when forced_actions is given).

    stimulus is (28, 28) float in [0, 1]; rng drives fovea jitter and
    action sampling. Replays are run without jitter so they are
    deterministic functions of the stimulus and action sequence.
    """
    model = setup.model
    levels = grid_levels(stimulus)
    beliefs = init_beliefs(model, beta=beta)
    eye = cell_center(START_CELL).astype(np.float64)
    outcomes = _initial_outcomes(model, levels)

    engine = setup.engine
    if forced_actions is not None:
        engine = EngineConfig(precisions=engine.precisions, steps=engine.steps,
                              jitter_scale=0.0, rate=engine.rate,
                              demand_gain=engine.demand_gain,
                              prior_floor=engine.prior_floor, guard=engine.guard)

    rec = TrialRecord(fixations=[], report=NO_REPORT, correct=False,
                      outcome_history=[], action_history=[], q_history=[],
                      digit_posts=[], saccade_traces=[])

    done = False
    while not done:
        rec.outcome_history.append([o.copy() if isinstance(o, np.ndarray) else o
                                    for o in outcomes])
        if forced_actions is None:
            beliefs, action, done = step_trial(model, beliefs, outcomes,
                                               rng=rng, mode=setup.mode)
        else:
            beliefs = mdp.infer_states(model, beliefs, outcomes)
            t = beliefs.t
            mask = mdp.allowed_policies(model, t)
            idx = np.flatnonzero(mask)
            G_base, o_fb = mdp.policy_G_components(model, beliefs, idx)
            m_fb = model.modality_names.index("feedback")
            ln_pref = model.C[m_fb] - _logsumexp(model.C[m_fb])
            o = np.maximum(o_fb, 1e-12)
            G = G_base + np.sum(o * np.log(o), axis=1) - o_fb @ ln_pref
            rec.G_history.append((G_base, o_fb))
            F = np.zeros(len(idx))
            q1 = mdp.policy_posterior(F, G, beliefs.gamma)
            gamma, _ = mdp.update_gamma(beliefs, G, q_pi=q1)
            q = mdp.policy_posterior(F, G, gamma)
            q_full = np.zeros(len(model.policies))
            q_full[idx] = q
            beliefs.q_pi = q_full
            action = forced_actions[t]
            beliefs.actions.append(action)
            done = action[1] != NO_REPORT or t == model.T - 1

        t = beliefs.t
        idx = np.flatnonzero(mdp.allowed_policies(model, t))
        chosen = _policy_index(model, action)
        rec.q_history.append((idx, beliefs.q_pi[idx], chosen))
        rec.action_history.append(action)

        if action[1] != NO_REPORT:
            rec.report = action[1]
            rec.correct = action[1] == label
            break
        if done:
            break

        # execute the saccade through the continuous level
        target = action[0]
        exec_policy = model.policies[chosen]
        preds = predicted_outcomes(model, beliefs, exec_policy)
        o_tau = descend(np.array([1.0]), [preds])
        eta = to_priors([o_tau[mdp.M_DIGIT], o_tau[mdp.M_WHERE]], setup.reduced,
                        mode="hard")
        trace = run_saccade(stimulus, eta, setup.weights, engine, rng=rng, eye0=eye)
        eye = trace.final_eye
        rec.fixations.append((t, target))

        acc = EvidenceAccumulator(location=target)
        dt = 1.0 / engine.steps
        for s in trace.steps:
            accumulate(s, setup.reduced, eta, acc, dt)
        digit_post = ascend((eta.eta_h, o_tau[mdp.M_WHERE]), acc)
        rec.digit_posts.append(digit_post)
        if detailed:
            rec.saccade_traces.append(trace)

        feats = _feature_outcomes(levels, target)
        outcomes = []
        fi = 0
        for name in model.modality_names:
            if name == "digit":
                outcomes.append(digit_post)
            elif name == "where":
                outcomes.append(target)
            elif name == "feedback":
                outcomes.append(FB_UNDECIDED)
            else:
                outcomes.append(feats[fi])
                fi += 1

    rec.final_beliefs = beliefs
    return rec


def _policy_index(model: MdpModel, action: tuple) -> int:
    for i, pol in enumerate(model.policies):
        if pol.actions[0] == tuple(action):
            return i
    raise ValueError(f"action {action} is not in the policy set")


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))
