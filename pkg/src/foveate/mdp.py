"""Discrete-time active-inference engine for one search trial.

The generative model factorizes hidden states into digit (10), fixation
location (49 grid cells + 1 decision location), report (10 classes +
undecided) and per-channel feature levels. Outcome modalities are digit,
location, feedback (correct/incorrect/undecided) and one 5-level outcome
per feature channel whose likelihood is read from the priority atlas.

Each step the agent re-evaluates depth-1 composite policies (saccade
target, report choice), scores them by expected free energy (risk to
preferences plus likelihood ambiguity), updates the policy precision
gamma = 1/beta by a single fixed-point step, and samples an action.
Belief updates run a fixed-point iteration per factor that never
increases the policy free energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .priority import PriorityAtlas, N_LEVELS

N_CLASSES = 10
N_CELLS = 49
DECISION_LOC = 49
N_WHERE = 50
NO_REPORT = 10
N_REPORT = 11
START_CELL = 24  # center of the 7x7 grid

FB_CORRECT, FB_INCORRECT, FB_UNDECIDED = 0, 1, 2

F_DIGIT, F_WHERE, F_REPORT = 0, 1, 2
M_DIGIT, M_WHERE, M_FEEDBACK = 0, 1, 2

SIMPLEX_TOL = 1e-10
LOG_FLOOR = 1e-16
BETA_MIN, BETA_MAX = 1e-3, 1e3


@dataclass
class Policy:
    """Composite (where, report) action sequence; depth 1 in this task."""
    actions: tuple

    def __post_init__(self):
        for w, r in self.actions:
            if r != NO_REPORT and w != DECISION_LOC:
                raise ValueError("report actions are only valid at the decision location")

    def action_at(self, t: int) -> tuple:
        return self.actions[min(t, len(self.actions) - 1)]


@dataclass
class TaskConfig:
    c_pref: float = 6.0
    eps_a: float = 0.02
    horizon: int = 9

    def __post_init__(self):
        if self.c_pref <= 0:
            raise ValueError("preference scalar c must be positive")
        if not 0.0 < self.eps_a <= 0.1:
            raise ValueError("eps_a must lie in (0, 0.1]")


@dataclass
class MdpModel:
    factor_sizes: list
    A: list            # per modality: (n_out, *dep sizes)
    A_deps: list       # per modality: tuple of factor indices
    B: list            # per factor: (size, size, n_controls)
    B_control: list    # per factor: "where" | "report" | None
    C: list            # per modality: log preferences over outcomes
    D: list            # per factor: initial simplex
    policies: list
    T: int = 9
    modality_names: list = field(default_factory=list)
    _ambiguity: list = field(default=None, repr=False)

    def __post_init__(self):
        for m, A in enumerate(self.A):
            if A.min() < 0:
                raise ValueError(f"A[{m}] has negative entries")
            cols = A.sum(axis=0)
            if np.max(np.abs(cols - 1.0)) > SIMPLEX_TOL:
                raise ValueError(f"A[{m}] columns must sum to 1")
        for f, B in enumerate(self.B):
            cols = B.sum(axis=0)
            if np.max(np.abs(cols - 1.0)) > SIMPLEX_TOL or B.min() < 0:
                raise ValueError(f"B[{f}] must be column-stochastic")
        for f, D in enumerate(self.D):
            if abs(D.sum() - 1.0) > SIMPLEX_TOL or D.min() < 0:
                raise ValueError(f"D[{f}] must be a simplex")

    @property
    def n_modalities(self) -> int:
        return len(self.A)

    @property
    def n_factors(self) -> int:
        return len(self.factor_sizes)

    def ambiguity(self, m: int) -> np.ndarray:
        """Column entropies H[A_m(.|s)] over the modality's dep grid."""
        if self._ambiguity is None:
            self._ambiguity = [None] * self.n_modalities
        if self._ambiguity[m] is None:
            A = self.A[m]
            self._ambiguity[m] = -np.sum(A * np.log(np.maximum(A, LOG_FLOOR)), axis=0)
        return self._ambiguity[m]

    def transition(self, f: int, action: tuple) -> np.ndarray:
        """B matrix of factor f under a composite (where, report) action."""
        ctrl = self.B_control[f]
        if ctrl == "where":
            return self.B[f][:, :, action[0]]
        if ctrl == "report":
            return self.B[f][:, :, action[1]]
        return self.B[f][:, :, 0]


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def _as_outcome_vector(o, size: int) -> np.ndarray:
    """Hard index or soft distribution -> validated outcome vector."""
    if np.isscalar(o) or isinstance(o, (int, np.integer)):
        idx = int(o)
        if not 0 <= idx < size:
            raise ValueError(f"outcome index {idx} out of range 0..{size - 1}")
        v = np.zeros(size)
        v[idx] = 1.0
        return v
    v = np.asarray(o, dtype=np.float64)
    if v.shape != (size,):
        raise ValueError(f"outcome vector has shape {v.shape}, expected ({size},)")
    if abs(v.sum() - 1.0) > 1e-8 or v.min() < -1e-12:
        raise ValueError("outcome vector must be a normalized distribution")
    return np.clip(v, 0.0, None)


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------

def build_model(config: TaskConfig, atlas: PriorityAtlas) -> MdpModel:
    """Assemble the trial model from the task config and priority atlas."""
    if atlas.levels.shape[0] != N_CLASSES or atlas.levels.shape[2:] != (7, 7):
        raise ValueError(f"atlas shape mismatch: {atlas.levels.shape}")
    eps = config.eps_a
    n_feat = atlas.n_channels
    factor_sizes = [N_CLASSES, N_WHERE, N_REPORT] + [N_LEVELS] * n_feat

    A, A_deps, names = [], [], []

    A_digit = np.full((N_CLASSES, N_CLASSES), eps / (N_CLASSES - 1))
    np.fill_diagonal(A_digit, 1.0 - eps)
    A.append(A_digit); A_deps.append((F_DIGIT,)); names.append("digit")

    A_where = np.full((N_WHERE, N_WHERE), eps / (N_WHERE - 1))
    np.fill_diagonal(A_where, 1.0 - eps)
    A.append(A_where); A_deps.append((F_WHERE,)); names.append("where")

    A_fb = np.zeros((3, N_CLASSES, N_REPORT))
    for d in range(N_CLASSES):
        for r in range(N_REPORT):
            if r == NO_REPORT:
                hot = FB_UNDECIDED
            elif r == d:
                hot = FB_CORRECT
            else:
                hot = FB_INCORRECT
            A_fb[:, d, r] = eps / 2.0
            A_fb[hot, d, r] = 1.0 - eps
    A.append(A_fb); A_deps.append((F_DIGIT, F_REPORT)); names.append("feedback")

    grid_levels = atlas.levels.reshape(N_CLASSES, n_feat, N_CELLS)  # row-major cells
    for f in range(n_feat):
        A_f = np.zeros((N_LEVELS, N_CLASSES, N_WHERE))
        A_f[:, :, DECISION_LOC] = 1.0 / N_LEVELS
        for d in range(N_CLASSES):
            for l in range(N_CELLS):
                A_f[:, d, l] = eps / (N_LEVELS - 1)
                A_f[grid_levels[d, f, l] - 1, d, l] = 1.0 - eps
        A.append(A_f); A_deps.append((F_DIGIT, F_WHERE)); names.append(f"feature_{f}")

    B = []
    B.append(np.eye(N_CLASSES)[:, :, None])
    B_where = np.zeros((N_WHERE, N_WHERE, N_WHERE))
    for u in range(N_WHERE):
        B_where[u, :, u] = 1.0
    B.append(B_where)
    B_report = np.zeros((N_REPORT, N_REPORT, N_REPORT))
    for u in range(N_REPORT):
        for j in range(N_REPORT):
            B_report[j if j != NO_REPORT else (u if u != NO_REPORT else NO_REPORT), j, u] = 1.0
    B.append(B_report)
    for _ in range(n_feat):
        B.append(np.eye(N_LEVELS)[:, :, None])
    B_control = [None, "where", "report"] + [None] * n_feat

    C = [np.zeros(N_CLASSES), np.zeros(N_WHERE),
         np.array([config.c_pref, -config.c_pref, 0.0])] + [np.zeros(N_LEVELS)] * n_feat

    D = [np.full(N_CLASSES, 1.0 / N_CLASSES)]
    d_where = np.zeros(N_WHERE); d_where[START_CELL] = 1.0
    D.append(d_where)
    d_rep = np.zeros(N_REPORT); d_rep[NO_REPORT] = 1.0
    D.append(d_rep)
    D += [np.full(N_LEVELS, 1.0 / N_LEVELS)] * n_feat

    policies = [Policy(actions=((l, NO_REPORT),)) for l in range(N_WHERE)]
    policies += [Policy(actions=((DECISION_LOC, k),)) for k in range(N_CLASSES)]

    return MdpModel(factor_sizes=factor_sizes, A=A, A_deps=A_deps, B=B,
                    B_control=B_control, C=C, D=D, policies=policies,
                    T=config.horizon, modality_names=names)


# ---------------------------------------------------------------------------
# Beliefs
# ---------------------------------------------------------------------------

@dataclass
class BeliefState:
    s: list                 # per factor: (T, size) lattice, rows 0..t filled
    q_pi: np.ndarray
    gamma: float
    beta: float
    beta_prior: float
    observed: list          # per elapsed step: list of outcome vectors
    actions: list           # executed composite actions
    t: int = -1             # last step with observations
    F_total: float = 0.0
    F_steps: list = field(default_factory=list)
    F_iterations: list = field(default_factory=list)  # within-step FPI trajectory

    def s_hat(self, policy, f: int, tau: int, model: MdpModel = None) -> np.ndarray:
        """Posterior of factor f at step tau under a policy.

        History (tau <= t) is shared across the depth-1 policies; the
        one-step prediction requires the model for its transition.
        """
        if tau <= self.t:
            return self.s[f][tau]
        if tau == self.t + 1 and model is not None:
            return model.transition(f, policy.action_at(self.t)) @ self.s[f][self.t]
        raise ValueError(f"no beliefs at step {tau}")

    def validate(self):
        for f, lat in enumerate(self.s):
            rows = lat[: self.t + 1]
            if np.max(np.abs(rows.sum(axis=1) - 1.0)) > SIMPLEX_TOL:
                raise ValueError(f"belief simplex drift in factor {f}")
        if self.gamma <= 0 or self.beta <= 0:
            raise ValueError("gamma and beta must stay positive")


def init_beliefs(model: MdpModel, beta: float = 1.0) -> BeliefState:
    s = [np.zeros((model.T, size)) for size in model.factor_sizes]
    q0 = np.full(len(model.policies), 1.0 / len(model.policies))
    return BeliefState(s=s, q_pi=q0, gamma=1.0 / beta, beta=beta,
                       beta_prior=beta, observed=[], actions=[])


def infer_states(model: MdpModel, beliefs: BeliefState, outcomes) -> BeliefState:
    """Assimilate the outcomes of the next step by fixed-point iteration.

    Factor posteriors are updated sequentially (softmax of prior plus
    expected log-likelihood messages) until the largest change falls
    below 1e-6 or 32 sweeps; each exact coordinate update cannot
    increase the step's free energy.
    """
    t = beliefs.t + 1
    if t >= model.T:
        raise ValueError("trial horizon exhausted")
    obs = [_as_outcome_vector(o, model.A[m].shape[0]) for m, o in enumerate(outcomes)]

    if t == 0:
        priors = [model.D[f].copy() for f in range(model.n_factors)]
    else:
        u = beliefs.actions[t - 1]
        priors = [model.transition(f, u) @ beliefs.s[f][t - 1] for f in range(model.n_factors)]
    ln_priors = [np.log(np.maximum(p, LOG_FLOOR)) for p in priors]

    lnA = [np.log(np.maximum(model.A[m], LOG_FLOOR)) for m in range(model.n_modalities)]
    ell = [np.tensordot(obs[m], lnA[m], axes=(0, 0)) for m in range(model.n_modalities)]

    s = [priors[f].copy() for f in range(model.n_factors)]

    def step_free_energy(s_cur):
        F = 0.0
        for f in range(model.n_factors):
            sf = s_cur[f]
            F += float(sf @ (np.log(np.maximum(sf, LOG_FLOOR)) - ln_priors[f]))
        for m in range(model.n_modalities):
            deps = model.A_deps[m]
            red = ell[m]
            for ax in range(len(deps) - 1, -1, -1):
                red = np.tensordot(red, s_cur[deps[ax]], axes=(ax, 0))
            F -= float(red)
        return F

    iteration_F = [step_free_energy(s)]
    for _ in range(32):
        max_delta = 0.0
        for f in range(model.n_factors):
            msg = ln_priors[f].copy()
            for m in range(model.n_modalities):
                deps = model.A_deps[m]
                if f not in deps:
                    continue
                i = deps.index(f)
                red = ell[m]
                # contract every other dep factor with its current belief
                for ax in range(len(deps) - 1, -1, -1):
                    if ax == i:
                        continue
                    red = np.tensordot(red, s[deps[ax]], axes=(ax, 0))
                msg = msg + red
            new = softmax(msg)
            max_delta = max(max_delta, float(np.max(np.abs(new - s[f]))))
            s[f] = new
        iteration_F.append(step_free_energy(s))
        if max_delta < 1e-6:
            break

    F_step = iteration_F[-1]
    for f in range(model.n_factors):
        beliefs.s[f][t] = s[f]
    beliefs.observed.append(obs)
    beliefs.t = t
    beliefs.F_steps.append(F_step)
    beliefs.F_total += F_step
    beliefs.F_iterations = iteration_F
    return beliefs


# ---------------------------------------------------------------------------
# Policy evaluation
# ---------------------------------------------------------------------------

def predicted_outcomes(model: MdpModel, beliefs: BeliefState, policy: Policy) -> list:
    """Outcome distributions one step ahead under a policy."""
    t = beliefs.t
    u = policy.action_at(t)
    s_next = [model.transition(f, u) @ beliefs.s[f][t] for f in range(model.n_factors)]
    preds = []
    for m in range(model.n_modalities):
        red = model.A[m]
        for ax in range(len(model.A_deps[m]), 0, -1):
            red = np.tensordot(red, s_next[model.A_deps[m][ax - 1]], axes=(ax, 0))
        preds.append(red)
    return preds


def expected_free_energy(model: MdpModel, beliefs: BeliefState, policy: Policy) -> float:
    """Risk (KL to the preference prior) plus expected likelihood entropy."""
    t = beliefs.t
    u = policy.action_at(t)
    s_next = [model.transition(f, u) @ beliefs.s[f][t] for f in range(model.n_factors)]
    G = 0.0
    for m in range(model.n_modalities):
        deps = model.A_deps[m]
        red = model.A[m]
        for ax in range(len(deps), 0, -1):
            red = np.tensordot(red, s_next[deps[ax - 1]], axes=(ax, 0))
        o = np.maximum(red, LOG_FLOOR)
        pref = softmax(model.C[m])
        G += float(o @ (np.log(o) - np.log(np.maximum(pref, LOG_FLOOR))))  # risk
        amb = model.ambiguity(m)
        for ax in range(len(deps), 0, -1):
            amb = np.tensordot(amb, s_next[deps[ax - 1]], axes=(ax - 1, 0))
        G += float(amb)
    return G


def policy_G_components(model: MdpModel, beliefs: BeliefState, idx: np.ndarray):
    """EFE split for preference-independent replay.

    Returns (G_base, o_fb) over the policies in idx, where G_base holds
    every term except the feedback risk and o_fb the predicted feedback
    distributions, so that for any preference scalar c:
    G = G_base + sum_o o_fb (ln o_fb - ln softmax(C_fb(c))).
    """
    m_fb = model.modality_names.index("feedback")
    G_base = np.zeros(len(idx))
    o_fb = np.zeros((len(idx), model.A[m_fb].shape[0]))
    t = beliefs.t
    for j, i in enumerate(idx):
        policy = model.policies[i]
        u = policy.action_at(t)
        s_next = [model.transition(f, u) @ beliefs.s[f][t] for f in range(model.n_factors)]
        G = 0.0
        for m in range(model.n_modalities):
            deps = model.A_deps[m]
            red = model.A[m]
            for ax in range(len(deps), 0, -1):
                red = np.tensordot(red, s_next[deps[ax - 1]], axes=(ax, 0))
            o = np.maximum(red, LOG_FLOOR)
            if m == m_fb:
                o_fb[j] = red
            else:
                pref = softmax(model.C[m])
                G += float(o @ (np.log(o) - np.log(np.maximum(pref, LOG_FLOOR))))
            amb = model.ambiguity(m)
            for ax in range(len(deps), 0, -1):
                amb = np.tensordot(amb, s_next[deps[ax - 1]], axes=(ax - 1, 0))
            G += float(amb)
        G_base[j] = G
    return G_base, o_fb


def policy_posterior(F_vec: np.ndarray, G_vec: np.ndarray, gamma: float) -> np.ndarray:
    """q_pi = softmax(-F - gamma * G)."""
    F_vec = np.asarray(F_vec, dtype=np.float64)
    G_vec = np.asarray(G_vec, dtype=np.float64)
    if not (np.all(np.isfinite(F_vec)) and np.all(np.isfinite(G_vec))):
        raise ValueError("free energies must be finite")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return softmax(-F_vec - gamma * G_vec)


def update_gamma(beliefs: BeliefState, G_vec: np.ndarray,
                 q_pi: np.ndarray = None, q_pi0: np.ndarray = None):
    """Single fixed-point update of the precision posterior.

    beta_post = beta_prior + (q_pi - q_pi0) . (-G), clamped, with
    q_pi0 the prior policy distribution softmax(-gamma * G) unless
    supplied explicitly.
    """
    G_vec = np.asarray(G_vec, dtype=np.float64)
    q = beliefs.q_pi if q_pi is None else q_pi
    q0 = softmax(-beliefs.gamma * G_vec) if q_pi0 is None else np.asarray(q_pi0)
    beta_post = beliefs.beta_prior + float((q - q0) @ (-G_vec))
    beta_post = float(np.clip(beta_post, BETA_MIN, BETA_MAX))
    gamma = 1.0 / beta_post
    beliefs.beta = beta_post
    beliefs.gamma = gamma
    return gamma, beta_post


def sample_action(q_pi: np.ndarray, policies: list, t: int, rng=None, mode: str = "sample") -> tuple:
    """Draw (or argmax, lowest index winning ties) a policy's step-t action."""
    if len(policies) == 0:
        raise ValueError("empty policy set")
    q = np.asarray(q_pi, dtype=np.float64)
    if mode == "argmax" or rng is None:
        idx = int(np.argmax(q))
    else:
        idx = int(rng.choice(len(q), p=q / q.sum()))
    return policies[idx].action_at(t)


def allowed_policies(model: MdpModel, t: int) -> np.ndarray:
    """Mask of policies available at step t.

    Reports are masked out on the first step; the final step forces the
    transition to the decision location.
    """
    mask = np.ones(len(model.policies), dtype=bool)
    for i, pol in enumerate(model.policies):
        w, r = pol.action_at(t)
        if t == 0 and r != NO_REPORT:
            mask[i] = False
        if t == model.T - 1 and w != DECISION_LOC:
            mask[i] = False
    return mask


def step_trial(model: MdpModel, beliefs: BeliefState, outcome_posteriors,
               rng=None, mode: str = "sample"):
    """One full planning step: infer, evaluate, reweigh precision, act.

    Returns (beliefs, action, done); done once a report is executed or
    the horizon is reached.
    """
    beliefs = infer_states(model, beliefs, outcome_posteriors)
    t = beliefs.t
    mask = allowed_policies(model, t)
    idx = np.flatnonzero(mask)
    G = np.array([expected_free_energy(model, beliefs, model.policies[i]) for i in idx])
    F = np.full(len(idx), beliefs.F_total)

    q1 = policy_posterior(F, G, beliefs.gamma)
    gamma, _ = update_gamma(beliefs, G, q_pi=q1)
    q = policy_posterior(F, G, gamma)

    q_full = np.zeros(len(model.policies))
    q_full[idx] = q
    beliefs.q_pi = q_full

    sub_policies = [model.policies[i] for i in idx]
    action = sample_action(q, sub_policies, t, rng=rng, mode=mode)
    beliefs.actions.append(action)
    done = action[1] != NO_REPORT or t == model.T - 1
    return beliefs, action, done
