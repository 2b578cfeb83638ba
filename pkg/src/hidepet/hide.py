"""The hierarchical continual-learning engine.

Each task trains a frozen-backbone classifier in two stages. Stage one learns
a task-specific tuning set (within-task objective, softmax restricted to the
task's classes) and, in parallel, a task-shared tuning set through an interim
copy of the class head. Stage two preserves class-conditional statistics of
both uninstructed and instructed representations, then retrains the task-
identity head on pseudo-samples from the uninstructed statistics and the
class head on pseudo-samples from the instructed ones. Raw samples of a task
are never retained once the task finishes.

Inference first predicts the task identity from the uninstructed
representation, then classifies the sample's instructed representation
(produced by the predicted task's tuning set) over all observed classes.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import io, numcore as nc
from .backbone import BackboneCheckpoint, encode
from .errors import ConfigError, ProtocolError, StateError
from .numcore import Tensor
from .pet import PetParams, ensemble_init, init_pet
from .rng import stream

STATE_VERSION = 1

RECOVERY_STRATEGIES = ("none", "prototype", "variance", "covariance", "multicentroid")
SHARED_STRATEGIES = ("f_t", "fsa", "sl", "ema", "fsa_sl")


@dataclass
class Components:
    """Which pieces of the decomposed objective a run optimizes."""

    task_softmax: bool   # within-task loss restricted to the task's classes
    shared_set: bool     # train the task-shared tuning set
    task_inference: bool # preserve uninstructed stats + train the task head
    recovery_head: bool  # preserve instructed stats + retrain the class head


COMPONENT_PRESETS = {
    "naive": Components(False, False, False, False),
    "wtp": Components(True, False, False, False),
    "wtp+tii": Components(True, True, True, False),
    "wtp+tap": Components(True, False, False, True),
    "full": Components(True, True, True, True),
}


@dataclass
class TrainConfig:
    seed: int = 1
    technique: str = "pret"
    pet_layers: tuple = (0, 1, 2, 3)
    prompt_len: int = 20
    bottleneck: int = 10
    lora_scale: float = 1.0
    lora_targets: tuple = ("wk", "wv")
    blend_alpha: float = 0.1       # weight of summed earlier sets at task init
    epochs: int = 12               # representation epochs per task
    head_epochs: int = 50          # head-recovery rounds per task (one step each)
    batch_size: int = 128
    lr: float = 1e-3               # task-specific sets (and the head columns they drag)
    lr_heads: float = 0.01         # head-only recovery steps
    lr_strong: float = 0.01        # first-session / tuning rate for the shared set
    lr_slow: float = 0.001         # slow-learner rate for the shared set
    ema_momentum: float = 0.1
    shared_strategy: str = "fsa_sl"
    recovery: str = "multicentroid"
    components: str = "full"
    samples_per_class: int = 64    # pseudo-samples per class per recovery epoch
    stats_centroids: int = 10
    cov_reg: float = 1e-4
    dtype: str = "float32"

    def __post_init__(self):
        if self.shared_strategy not in SHARED_STRATEGIES:
            raise ConfigError(f"unknown shared strategy {self.shared_strategy!r}")
        if self.recovery not in RECOVERY_STRATEGIES:
            raise ConfigError(f"unknown recovery strategy {self.recovery!r}")
        if self.components not in COMPONENT_PRESETS:
            raise ConfigError(f"unknown component set {self.components!r}")

    @property
    def component_set(self) -> Components:
        return COMPONENT_PRESETS[self.components]


# ---------------------------------------------------------------------------
# representation statistics


@dataclass
class RepStats:
    """Class-conditional representation distribution, approximated.

    Payload by strategy — prototype: `vectors` (10, d) stored samples;
    variance: per-dim `mean` and `var`; covariance: `mean` plus regularized
    `cov`; multicentroid: `centroids` (k<=10, d) plus one scalar noise level
    `sigma` (per-dimension std tied to within-cluster spread).
    """

    strategy: str
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    cov: np.ndarray | None = None
    vectors: np.ndarray | None = None
    centroids: np.ndarray | None = None
    sigma: float = 0.0

    def param_count(self) -> int:
        """Stored vector-payload floats per class (noise scalar excluded)."""
        n = 0
        for arr in (self.mean, self.var, self.cov, self.vectors, self.centroids):
            if arr is not None:
                n += arr.size
        return n

    def sample(self, n: int, rng) -> np.ndarray:
        return sample_reps(self, n, rng)

    def arrays(self) -> dict:
        out = {}
        for name in ("mean", "var", "cov", "vectors", "centroids"):
            arr = getattr(self, name)
            if arr is not None:
                out[name] = arr
        if self.strategy == "multicentroid":
            out["sigma"] = np.asarray([self.sigma], dtype=np.float32)
        return out


def kmeans(points: np.ndarray, k: int, rng, iters: int = 50) -> np.ndarray:
    """Plain Lloyd iterations from ++-style seeding; deduplicates exact
    duplicate centroids so degenerate inputs collapse to fewer centers."""
    n = len(points)
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    pts = points.astype(np.float64)
    centers[0] = pts[rng.integers(n)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j:] = centers[0]
            break
        centers[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pts - centers[j]) ** 2).sum(axis=1))
    for _ in range(iters):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        new = centers.copy()
        for j in range(k):
            sel = assign == j
            if sel.any():
                new[j] = pts[sel].mean(axis=0)
        if np.allclose(new, centers, atol=1e-12):
            centers = new
            break
        centers = new
    return np.unique(centers.round(decimals=12), axis=0)


def fit_stats(reps: np.ndarray, strategy: str, rng, k: int = 10, cov_reg: float = 1e-4) -> RepStats:
    """Summarize one class's representations for later recovery."""
    reps = np.asarray(reps, dtype=np.float64)
    d = reps.shape[1]
    if strategy == "prototype":
        if len(reps) >= k:
            pick = rng.choice(len(reps), size=k, replace=False)
        else:
            pick = rng.choice(len(reps), size=k, replace=True)
        return RepStats("prototype", vectors=reps[pick].copy())
    if strategy == "variance":
        return RepStats("variance", mean=reps.mean(axis=0), var=reps.var(axis=0))
    if strategy == "covariance":
        mean = reps.mean(axis=0)
        centered = reps - mean
        cov = centered.T @ centered / max(1, len(reps))
        cov = 0.5 * (cov + cov.T)
        return RepStats("covariance", mean=mean, cov=cov)
    if strategy == "multicentroid":
        if len(reps) < k:
            warnings.warn(
                f"only {len(reps)} samples for {k} centroids; storing all samples",
                stacklevel=2,
            )
            centroids = np.unique(reps.round(decimals=12), axis=0)
        else:
            centroids = kmeans(reps, k, rng)
        dist = ((reps[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        rms = float(np.sqrt(dist.min(axis=1).mean()))
        return RepStats("multicentroid", centroids=centroids, sigma=rms / np.sqrt(d))
    raise ConfigError(f"unknown recovery strategy {strategy!r}")


def sample_reps(stats: RepStats, n_per_class: int, rng) -> np.ndarray:
    """Draw pseudo-representations from preserved statistics."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    if stats.strategy == "prototype":
        pick = rng.integers(len(stats.vectors), size=n_per_class)
        return stats.vectors[pick].copy()
    if stats.strategy == "variance":
        z = rng.standard_normal((n_per_class, stats.mean.size))
        return stats.mean + np.sqrt(stats.var) * z
    if stats.strategy == "covariance":
        d = stats.mean.size
        chol = np.linalg.cholesky(stats.cov + 1e-4 * np.eye(d))
        z = rng.standard_normal((n_per_class, d))
        return stats.mean + z @ chol.T
    if stats.strategy == "multicentroid":
        pick = rng.integers(len(stats.centroids), size=n_per_class)
        base = stats.centroids[pick]
        return base + stats.sigma * rng.standard_normal(base.shape)
    raise ConfigError(f"unknown recovery strategy {stats.strategy!r}")


# ---------------------------------------------------------------------------
# learner state


@dataclass
class HideState:
    """Everything a continual run accumulates: per-task tuning sets, the
    shared set, both output heads, the class registry, and preserved
    statistics keyed by (task_number, class_column)."""

    technique: str
    scenario: str
    dim: int
    task_pets: list = field(default_factory=list)
    shared_pet: PetParams | None = None
    task_head: dict | None = None
    class_head: dict | None = None
    class_ids: list = field(default_factory=list)
    task_classes: list = field(default_factory=list)
    uninstructed_stats: dict = field(default_factory=dict)
    instructed_stats: dict = field(default_factory=dict)
    shared_strategy: str = "fsa_sl"
    recovery: str = "multicentroid"
    task_count: int = 0
    snapshots: dict = field(default_factory=dict)
    probe: np.ndarray | None = None

    @property
    def col_of(self) -> dict:
        return {c: i for i, c in enumerate(self.class_ids)}

    def task_columns(self, task_number: int) -> np.ndarray:
        cols = self.col_of
        return np.asarray([cols[c] for c in self.task_classes[task_number - 1]])

    def register_classes(self, classes) -> None:
        for c in classes:
            if c not in self.col_of:
                self.class_ids.append(int(c))
        self.task_classes.append([int(c) for c in classes])


def _grow_head(head, n_new: int, dim: int, dtype) -> dict:
    """Append zero-initialized output columns, preserving old ones bit-exactly."""
    if n_new <= 0 and head is not None:
        return head
    dt = np.dtype(dtype)
    if head is None:
        return {
            "w": Tensor(np.zeros((dim, n_new), dtype=dt), requires_grad=True),
            "b": Tensor(np.zeros(n_new, dtype=dt), requires_grad=True),
        }
    w = np.concatenate([head["w"].data, np.zeros((dim, n_new), dtype=dt)], axis=1)
    b = np.concatenate([head["b"].data, np.zeros(n_new, dtype=dt)])
    return {"w": Tensor(w, requires_grad=True), "b": Tensor(b, requires_grad=True)}


def _head_logits(feats, head):
    return nc.affine(feats, head["w"], head["b"])


# ---------------------------------------------------------------------------
# the three losses


def wtp_loss(x, y_global, ckpt, pet_params, class_head, col_start, col_stop, col_of):
    """Within-task objective: cross-entropy of the instructed representation
    over the current task's class columns only."""
    targets = []
    for c in np.asarray(y_global).tolist():
        col = col_of[int(c)]
        if not col_start <= col < col_stop:
            raise IndexError(f"label {c} falls outside the task's class columns")
        targets.append(col - col_start)
    feats = encode(x, ckpt, pet_params)
    logits = nc.narrow(_head_logits(feats, class_head), 1, col_start, col_stop - col_start)
    return nc.cross_entropy(logits, targets)


def tii_loss(samples, task_labels, task_head):
    """Task-identity objective: cross-entropy of uninstructed pseudo-samples
    over the task logits."""
    labels = np.asarray(task_labels, dtype=np.int64)
    if labels.size and labels.max() >= task_head["w"].shape[1]:
        raise IndexError("task label exceeds the task head width")
    return nc.cross_entropy(_head_logits(_as_f(samples, task_head), task_head), labels)


def tap_loss(samples, col_labels, class_head):
    """Task-adaptive objective: cross-entropy of instructed pseudo-samples
    over every observed class column."""
    labels = np.asarray(col_labels, dtype=np.int64)
    if labels.size and labels.max() >= class_head["w"].shape[1]:
        raise IndexError("class column exceeds the class head width")
    return nc.cross_entropy(_head_logits(_as_f(samples, class_head), class_head), labels)


def _as_f(samples, head):
    if isinstance(samples, Tensor):
        return samples
    return Tensor(np.asarray(samples, dtype=head["w"].dtype))


# ---------------------------------------------------------------------------
# shared-set update policies


@dataclass
class SharedPolicy:
    lr: float
    frozen: bool = False        # no shared-set updates at all this task
    freeze_epochs: int = 0      # leading epochs with the set frozen
    interim: bool = False       # train a copy, blend back with momentum

    def trains_at(self, epoch: int) -> bool:
        return not self.frozen and epoch >= self.freeze_epochs


def update_shared(strategy: str, task_number: int, n_epochs: int, cfg: TrainConfig) -> SharedPolicy:
    """Per-task update policy for the task-shared tuning set.

    fsa: strong rate on the first task, frozen afterwards. sl: slow rate on
    every task. fsa_sl: strong first task, slow afterwards. f_t: frozen for
    the first half of each task's epochs, then the strong rate. ema: a copy
    trains at the strong rate and is folded back with small momentum.
    """
    if strategy == "fsa":
        return SharedPolicy(lr=cfg.lr_strong, frozen=task_number > 1)
    if strategy == "sl":
        return SharedPolicy(lr=cfg.lr_slow)
    if strategy == "fsa_sl":
        return SharedPolicy(lr=cfg.lr_strong if task_number == 1 else cfg.lr_slow)
    if strategy == "f_t":
        return SharedPolicy(lr=cfg.lr_strong, freeze_epochs=n_epochs // 2)
    if strategy == "ema":
        return SharedPolicy(lr=cfg.lr_strong, interim=True)
    raise ConfigError(f"unknown shared strategy {strategy!r}")


# ---------------------------------------------------------------------------
# training


def _fresh_pet(cfg: TrainConfig, dim: int, label, seed_path, n_layers=None) -> PetParams:
    layers = cfg.pet_layers
    if cfg.technique == "prot" and n_layers is not None:
        layers = (n_layers - 1,)
    return init_pet(
        cfg.technique,
        layers=layers,
        dim=dim,
        rng=stream(cfg.seed, *seed_path, label),
        prompt_len=cfg.prompt_len,
        bottleneck=cfg.bottleneck,
        lora_scale=cfg.lora_scale,
        lora_targets=cfg.lora_targets,
        dtype=cfg.dtype,
    )


def init_state(cfg: TrainConfig, ckpt: BackboneCheckpoint, scenario: str = "cil") -> HideState:
    state = HideState(
        technique=cfg.technique,
        scenario=scenario,
        dim=ckpt.dim,
        shared_strategy=cfg.shared_strategy,
        recovery=cfg.recovery,
    )
    if cfg.component_set.shared_set:
        state.shared_pet = _fresh_pet(cfg, ckpt.dim, "g", ("shared",), ckpt.n_layers)
    state.probe = stream(cfg.seed, "probe").standard_normal(
        (4, 8, ckpt.d_feat)
    ).astype(cfg.dtype)
    return state


def _batches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_task(
    task_number: int,
    train_set,
    state: HideState,
    ckpt: BackboneCheckpoint,
    cfg: TrainConfig,
    *,
    shared_override=None,
    instructed_ckpt=None,
    uninstructed_pet="shared",
    shared_policy=None,
    phased_merge=None,
) -> HideState:
    """Learn one task in arrival order; never retains its raw samples.

    The keyword overrides exist for the knowledge-pool variant, which swaps
    in a pool set for the shared parameters, a merged backbone view for
    instructed encoding, and the plain backbone for uninstructed encoding.
    With `phased_merge` the shared set finishes all its epochs first and the
    callback folds it into the backbone used for the task-specific stage
    (the two stages touch disjoint parameters, so plain runs interleave them
    per epoch instead).
    """
    if task_number != state.task_count + 1:
        raise ProtocolError(
            f"tasks must arrive in order: got {task_number}, expected {state.task_count + 1}"
        )
    comp = cfg.component_set
    x, y = train_set.x.astype(cfg.dtype), train_set.y
    classes = sorted(int(c) for c in np.unique(y))
    if state.scenario in ("cil", "til"):
        clash = set(classes) & set(state.col_of)
        if clash:
            raise ProtocolError(f"classes {sorted(clash)} already seen; disjoint label spaces required")
    state.register_classes(classes)
    n_new = len(state.class_ids) - (0 if state.class_head is None else state.class_head["w"].shape[1])
    state.class_head = _grow_head(state.class_head, n_new, state.dim, cfg.dtype)
    cols = state.task_columns(task_number)
    col_start, col_stop = int(cols.min()), int(cols.max()) + 1
    col_of = state.col_of

    # stage one: representation learning
    interim_head = {"w": state.class_head["w"].copy(requires_grad=True),
                    "b": state.class_head["b"].copy(requires_grad=True)}
    fresh = _fresh_pet(cfg, state.dim, task_number, ("task",), ckpt.n_layers)
    task_pet = ensemble_init(state.task_pets, cfg.blend_alpha, fresh)
    task_pet.set_trainable(True)
    state.task_pets.append(task_pet)

    shared = shared_override if shared_override is not None else state.shared_pet
    policy = shared_policy
    if comp.shared_set and shared is not None and policy is None:
        policy = update_shared(cfg.shared_strategy, task_number, cfg.epochs, cfg)
    train_shared = comp.shared_set and shared is not None and not policy.frozen

    shared_target = None
    if train_shared:
        shared_target = shared.copy() if policy.interim else shared
        shared_target.set_trainable(True)
        opt_shared = nc.Adam(shared_target.parameters(), lr=policy.lr)
        opt_interim = nc.Adam([interim_head["w"], interim_head["b"]], lr=cfg.lr)

    opt_task = nc.Adam(
        task_pet.parameters() + [state.class_head["w"], state.class_head["b"]], lr=cfg.lr
    )

    n = len(y)

    def shared_step(sel, epoch):
        feats = encode(x[sel], ckpt, shared_target)
        logits = nc.narrow(
            _head_logits(feats, interim_head), 1, col_start, col_stop - col_start
        )
        targets = [col_of[int(c)] - col_start for c in y[sel]]
        loss_g = nc.cross_entropy(logits, targets)
        opt_shared.zero_grad()
        opt_interim.zero_grad()
        nc.backward(loss_g)
        if policy.trains_at(epoch):
            opt_shared.step()
        opt_interim.step()

    def task_step(sel, enc_ckpt):
        if comp.task_softmax:
            loss_w = wtp_loss(x[sel], y[sel], enc_ckpt, task_pet,
                              state.class_head, col_start, col_stop, col_of)
        else:
            feats = encode(x[sel], enc_ckpt, task_pet)
            targets = [col_of[int(c)] for c in y[sel]]
            loss_w = nc.cross_entropy(_head_logits(feats, state.class_head), targets)
        opt_task.zero_grad()
        nc.backward(loss_w)
        opt_task.step()

    if phased_merge is not None:
        if train_shared:
            for epoch in range(cfg.epochs):
                rng_b = stream(cfg.seed, "task", task_number, "epoch", epoch)
                for sel in _batches(n, cfg.batch_size, rng_b):
                    shared_step(sel, epoch)
        instructed_ckpt = phased_merge(shared_target if train_shared else shared)
        for epoch in range(cfg.epochs):
            rng_b = stream(cfg.seed, "task", task_number, "wtp_epoch", epoch)
            for sel in _batches(n, cfg.batch_size, rng_b):
                task_step(sel, instructed_ckpt)
    else:
        for epoch in range(cfg.epochs):
            rng_b = stream(cfg.seed, "task", task_number, "epoch", epoch)
            for sel in _batches(n, cfg.batch_size, rng_b):
                if train_shared:
                    shared_step(sel, epoch)
                task_step(sel, instructed_ckpt or ckpt)

    if train_shared and policy.interim:
        m = cfg.ema_momentum
        for key in shared.tensors:
            shared.tensors[key].data = (
                (1.0 - m) * shared.tensors[key].data + m * shared_target.tensors[key].data
            ).astype(shared.tensors[key].dtype)
        shared_target.set_trainable(False)
    if train_shared and not policy.interim:
        shared_target.set_trainable(False)
    task_pet.set_trainable(False)
    state.class_head["w"].requires_grad = False
    state.class_head["b"].requires_grad = False

    # stage two: preserve statistics, then recover the heads
    upet = state.shared_pet if uninstructed_pet == "shared" else uninstructed_pet
    live_uninstructed = None
    if comp.task_inference or comp.recovery_head:
        for c in classes:
            sel = y == c
            if comp.task_inference:
                reps_u = _encode_plain(x[sel], ckpt, upet)
                if cfg.recovery != "none":
                    state.uninstructed_stats[(task_number, col_of[c])] = fit_stats(
                        reps_u, cfg.recovery, stream(cfg.seed, "stats", "u", task_number, c),
                        k=cfg.stats_centroids, cov_reg=cfg.cov_reg,
                    )
            if comp.recovery_head and cfg.recovery != "none":
                reps_i = _encode_plain(x[sel], instructed_ckpt or ckpt, task_pet)
                state.instructed_stats[(task_number, col_of[c])] = fit_stats(
                    reps_i, cfg.recovery, stream(cfg.seed, "stats", "i", task_number, c),
                    k=cfg.stats_centroids, cov_reg=cfg.cov_reg,
                )
        if comp.task_inference and cfg.recovery == "none":
            live_uninstructed = (_encode_plain(x, ckpt, upet), np.full(n, task_number - 1))

    if comp.task_inference:
        state.task_head = _grow_head(state.task_head, 1, state.dim, cfg.dtype)
        opt_tii = nc.Adam([state.task_head["w"], state.task_head["b"]], lr=cfg.lr_heads)
    if comp.recovery_head and cfg.recovery != "none":
        state.class_head["w"].requires_grad = True
        state.class_head["b"].requires_grad = True
        opt_tap = nc.Adam([state.class_head["w"], state.class_head["b"]], lr=cfg.lr_heads)

    for epoch in range(cfg.head_epochs):
        if comp.task_inference:
            if cfg.recovery != "none":
                xs, ls = _draw(state.uninstructed_stats, cfg.samples_per_class,
                               stream(cfg.seed, "recover", task_number, epoch, "u"), by_task=True)
            else:
                xs, ls = live_uninstructed
            loss = tii_loss(xs.astype(cfg.dtype), ls, state.task_head)
            opt_tii.zero_grad()
            nc.backward(loss)
            opt_tii.step()
        if comp.recovery_head and cfg.recovery != "none":
            xs, ls = _draw(state.instructed_stats, cfg.samples_per_class,
                           stream(cfg.seed, "recover", task_number, epoch, "i"), by_task=False)
            loss = tap_loss(xs.astype(cfg.dtype), ls, state.class_head)
            opt_tap.zero_grad()
            nc.backward(loss)
            opt_tap.step()

    if comp.task_inference:
        state.task_head["w"].requires_grad = False
        state.task_head["b"].requires_grad = False
    state.class_head["w"].requires_grad = False
    state.class_head["b"].requires_grad = False

    state.task_count = task_number
    _record_snapshot(state, ckpt)
    return state


def _encode_plain(x, ckpt, pet_params) -> np.ndarray:
    out = []
    for start in range(0, len(x), 512):
        out.append(encode(x[start : start + 512], ckpt, pet_params).data)
    return np.concatenate(out, axis=0)


def _draw(stats_map: dict, per_class: int, rng, by_task: bool):
    xs, labels = [], []
    for (task_number, col) in sorted(stats_map):
        s = stats_map[(task_number, col)]
        xs.append(s.sample(per_class, rng))
        labels.append(np.full(per_class, task_number - 1 if by_task else col))
    return np.concatenate(xs, axis=0), np.concatenate(labels)


def _record_snapshot(state: HideState, ckpt: BackboneCheckpoint) -> None:
    snap = {"theta": ckpt.content_hash()}
    for j, p in enumerate(state.task_pets, start=1):
        snap[f"set{j}"] = p.content_hash()
        enc = encode(state.probe, ckpt, p).data
        snap[f"probe{j}"] = io.content_hash({"e": enc})
    state.snapshots[state.task_count] = snap


# ---------------------------------------------------------------------------
# inference and evaluation


def infer(x, state: HideState, ckpt: BackboneCheckpoint, true_tasks=None,
          restrict_to_task=False, set_for_task=None, merged_for_set=None):
    """Predict class ids (and the task used) for a batch.

    Without a task head the most recent task's tuning set is used (the
    ablation fallback). With `true_tasks` the oracle identity is used instead
    of the predicted one. Ties break to the lowest index.
    """
    x = np.asarray(x)
    if state.task_count < 1:
        raise StateError("no tasks learned yet")
    if true_tasks is not None:
        tasks = np.asarray(true_tasks)
    elif state.task_head is not None:
        upet = None if merged_for_set is not None else state.shared_pet
        u = _encode_plain(x.astype(ckpt.input_embed.dtype), ckpt, upet)
        logits = u @ state.task_head["w"].data + state.task_head["b"].data
        tasks = logits.argmax(axis=1) + 1
    else:
        tasks = np.full(len(x), state.task_count)

    pred_cols = np.empty(len(x), dtype=np.int64)
    for t in np.unique(tasks):
        sel = tasks == t
        enc_ckpt = ckpt
        if merged_for_set is not None and set_for_task is not None:
            enc_ckpt = merged_for_set[set_for_task[int(t)]]
        feats = _encode_plain(x[sel].astype(ckpt.input_embed.dtype), enc_ckpt,
                              state.task_pets[int(t) - 1])
        logits = feats @ state.class_head["w"].data + state.class_head["b"].data
        if restrict_to_task:
            cols = state.task_columns(int(t))
            local = logits[:, cols].argmax(axis=1)
            pred_cols[sel] = cols[local]
        else:
            pred_cols[sel] = logits.argmax(axis=1)
    ids = np.asarray(state.class_ids)
    return ids[pred_cols], tasks


def task_accuracy(state, ckpt, test_set, task_number, scenario="cil", **infer_kw) -> float:
    """Percent accuracy on one task's test split under the scenario's rules
    (oracle identity and task-local prediction for the task-incremental
    setting; global prediction otherwise)."""
    if scenario == "til":
        preds, _ = infer(test_set.x, state, ckpt,
                         true_tasks=np.full(len(test_set.y), task_number),
                         restrict_to_task=True, **infer_kw)
    else:
        preds, _ = infer(test_set.x, state, ckpt, **infer_kw)
    return 100.0 * float((preds == test_set.y).mean())


def eval_tii(state: HideState, ckpt: BackboneCheckpoint, tasks, cfg: TrainConfig):
    """Task-identity accuracy over the seen test sets, plus the accuracy of an
    auxiliary all-class head trained purely on uninstructed statistics."""
    if state.task_head is None:
        raise StateError("no task head was trained")
    hits = total = 0
    for t, test_set in enumerate(tasks, start=1):
        u = _encode_plain(test_set.x.astype(cfg.dtype), ckpt, state.shared_pet)
        logits = u @ state.task_head["w"].data + state.task_head["b"].data
        hits += int((logits.argmax(axis=1) + 1 == t).sum())
        total += len(test_set.y)
    tii_acc = 100.0 * hits / total

    faa_u = float("nan")
    if state.uninstructed_stats:
        head = _grow_head(None, len(state.class_ids), state.dim, cfg.dtype)
        opt = nc.Adam([head["w"], head["b"]], lr=cfg.lr_heads)
        for epoch in range(cfg.head_epochs):
            xs, ls = _draw(state.uninstructed_stats, cfg.samples_per_class,
                           stream(cfg.seed, "faa_u", epoch), by_task=False)
            loss = tap_loss(xs.astype(cfg.dtype), ls, head)
            opt.zero_grad()
            nc.backward(loss)
            opt.step()
        ids = np.asarray(state.class_ids)
        hits = total = 0
        for test_set in tasks:
            u = _encode_plain(test_set.x.astype(cfg.dtype), ckpt, state.shared_pet)
            logits = u @ head["w"].data + head["b"].data
            hits += int((ids[logits.argmax(axis=1)] == test_set.y).sum())
            total += len(test_set.y)
        faa_u = 100.0 * hits / total
    return tii_acc, faa_u


# ---------------------------------------------------------------------------
# persistence


def save_state(state: HideState, path) -> None:
    """Tensor container (same wire format as checkpoints) plus a JSON manifest
    at `<path>.json` carrying the registry and statistics structure."""
    named = {}
    for i, p in enumerate(state.task_pets, start=1):
        named.update(p.named(f"e.{i}"))
    if state.shared_pet is not None:
        named.update(state.shared_pet.named("g"))
    for label, head in (("omega", state.task_head), ("psi", state.class_head)):
        if head is not None:
            named[f"{label}.w"] = head["w"].data
            named[f"{label}.b"] = head["b"].data
    for fam, stats_map in (("stats_u", state.uninstructed_stats),
                           ("stats_i", state.instructed_stats)):
        for (t, col), s in stats_map.items():
            for part, arr in s.arrays().items():
                named[f"{fam}.{t}.{col}.{part}"] = arr
    io.write_tensors(path, named)

    def _pet_desc(p):
        return {
            "technique": p.technique, "layers": list(p.layers),
            "prompt_len": p.prompt_len, "bottleneck": p.bottleneck,
            "lora_scale": p.lora_scale, "lora_targets": list(p.lora_targets),
        }

    manifest = {
        "version": STATE_VERSION,
        "technique": state.technique,
        "scenario": state.scenario,
        "dim": state.dim,
        "task_count": state.task_count,
        "class_ids": state.class_ids,
        "task_classes": state.task_classes,
        "shared_strategy": state.shared_strategy,
        "recovery": state.recovery,
        "task_pets": [_pet_desc(p) for p in state.task_pets],
        "shared_pet": _pet_desc(state.shared_pet) if state.shared_pet else None,
        "stats": {
            fam: {f"{t}.{col}": sm[(t, col)].strategy for (t, col) in sorted(sm)}
            for fam, sm in (("stats_u", state.uninstructed_stats),
                            ("stats_i", state.instructed_stats))
        },
        "snapshots": state.snapshots,
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_state(path) -> HideState:
    named = io.read_tensors(path)
    with open(str(path) + ".json") as f:
        manifest = json.load(f)
    if manifest["version"] > STATE_VERSION:
        raise StateError(f"state version {manifest['version']} is newer than supported")

    def _build_pet(desc, prefix):
        tensors = {}
        plen = len(prefix) + 1
        for k in list(named):
            if k.startswith(prefix + "."):
                tensors[k[plen:]] = Tensor(named.pop(k))
        return PetParams(
            desc["technique"], tuple(desc["layers"]), tensors,
            desc["prompt_len"], desc["bottleneck"], desc["lora_scale"],
            tuple(desc["lora_targets"]),
        )

    state = HideState(
        technique=manifest["technique"], scenario=manifest["scenario"],
        dim=manifest["dim"], shared_strategy=manifest["shared_strategy"],
        recovery=manifest["recovery"], task_count=manifest["task_count"],
        class_ids=[int(c) for c in manifest["class_ids"]],
        task_classes=[[int(c) for c in tc] for tc in manifest["task_classes"]],
        snapshots={int(k): v for k, v in manifest["snapshots"].items()},
    )
    state.task_pets = [
        _build_pet(desc, f"e.{i}") for i, desc in enumerate(manifest["task_pets"], start=1)
    ]
    if manifest["shared_pet"]:
        state.shared_pet = _build_pet(manifest["shared_pet"], "g")
    for label, attr in (("omega", "task_head"), ("psi", "class_head")):
        if f"{label}.w" in named:
            setattr(state, attr, {
                "w": Tensor(named.pop(f"{label}.w")),
                "b": Tensor(named.pop(f"{label}.b")),
            })
    for fam, attr in (("stats_u", "uninstructed_stats"), ("stats_i", "instructed_stats")):
        groups: dict = {}
        for k in list(named):
            if k.startswith(fam + "."):
                _, t, col, part = k.split(".", 3)
                groups.setdefault((int(t), int(col)), {})[part] = named.pop(k)
        out = {}
        for key, parts in groups.items():
            strategy = manifest["stats"][fam][f"{key[0]}.{key[1]}"]
            sigma = float(parts.pop("sigma")[0]) if "sigma" in parts else 0.0
            out[key] = RepStats(strategy, sigma=sigma,
                                **{name: arr.astype(np.float64) for name, arr in parts.items()})
        setattr(state, attr, out)
    return state
