"""Adaptive knowledge accumulation: an expandable pool of low-rank tuning
sets, gated by out-of-distribution detection over uninstructed
representations and merged temporarily into the frozen backbone.

Before each task, every training sample is scored against the preserved
statistics of previous tasks (mean Euclidean distance between L2-normalized
representations and stored centroids, both under the plain backbone). If the
majority of samples sit beyond the threshold for every known task, a fresh
set is added at the strong first-session rate; otherwise the set owned by
the majority's nearest task is retrieved and refined at the slow rate. The
selected set is folded into the backbone for the task-specific stage, while
the plain backbone keeps producing the uninstructed statistics, so scores
stay comparable across the whole stream.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .backbone import BackboneCheckpoint, LayerWeights, encode
from .bench import AccuracyMatrix, TaskStream, metrics, verify_frozen_paths
from .errors import ConfigError, StateError
from .hide import (
    HideState,
    SharedPolicy,
    TrainConfig,
    _encode_plain,
    _grow_head,
    eval_tii,
    init_state,
    tap_loss,
    task_accuracy,
    train_task,
)
from .pet import PetParams, init_pet, lora_merge
from .rng import stream


@dataclass
class SharedPool:
    """The expandable hierarchy of shared low-rank sets.

    Every learned task maps to exactly one set; all sets share one shape so
    any of them can be folded into the same backbone.
    """

    sets: list = field(default_factory=list)
    association: dict = field(default_factory=dict)   # task_number -> set index
    tasks_per_set: list = field(default_factory=list)
    ood_threshold: float = 0.7

    @property
    def size(self) -> int:
        return len(self.sets)


def merge_temporarily(ckpt: BackboneCheckpoint, pet_set: PetParams) -> BackboneCheckpoint:
    """A backbone view with the low-rank update folded into its target
    matrices. The original checkpoint is untouched; discarding the view is
    the exact unmerge."""
    if pet_set.technique != "lora":
        raise ConfigError(f"only low-rank sets can be merged, got {pet_set.technique!r}")
    layers = []
    for i, lw in enumerate(ckpt.layers):
        if i in pet_set.layers:
            mats = {"wq": lw.wq, "wk": lw.wk, "wv": lw.wv, "wo": lw.wo}
            for tgt in pet_set.lora_targets:
                mats[tgt] = lora_merge(
                    mats[tgt],
                    pet_set.tensors[f"layer{i}.{tgt}_down"],
                    pet_set.tensors[f"layer{i}.{tgt}_up"],
                    pet_set.lora_scale,
                )
            layers.append(LayerWeights(**mats))
        else:
            layers.append(lw)
    merged = BackboneCheckpoint(layers, ckpt.input_embed, ckpt.heads, dict(ckpt.meta))
    merged.meta["merged"] = 1.0
    return merged


# ---------------------------------------------------------------------------
# OOD scoring and the expand/retrieve decision


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)


def _task_centroids(state: HideState, task_number: int) -> np.ndarray:
    cols = [col for (t, col) in state.uninstructed_stats if t == task_number]
    if not cols:
        raise StateError(f"no uninstructed statistics for task {task_number}")
    parts = []
    for col in cols:
        s = state.uninstructed_stats[(task_number, col)]
        if s.centroids is not None:
            parts.append(s.centroids)
        elif s.vectors is not None:
            parts.append(s.vectors)
        else:
            parts.append(s.mean[None, :])
    return np.concatenate(parts, axis=0)


def ood_score(x, state: HideState, ckpt: BackboneCheckpoint, task_number: int) -> float:
    """Distance of one sample from a previous task's representation region:
    mean Euclidean distance between the normalized uninstructed encoding and
    that task's normalized stored centroids."""
    rep = _encode_plain(np.asarray(x)[None, ...].astype(ckpt.input_embed.dtype), ckpt, None)
    cents = _normalize(_task_centroids(state, task_number))
    return float(np.linalg.norm(_normalize(rep)[0] - cents, axis=1).mean())


def _score_matrix(reps_normed: np.ndarray, state: HideState, upto_task: int) -> np.ndarray:
    """(n_samples, n_tasks) mean distances to each previous task's centroids."""
    cols = []
    for t in range(1, upto_task + 1):
        cents = _normalize(_task_centroids(state, t))
        d = np.linalg.norm(reps_normed[:, None, :] - cents[None, :, :], axis=2)
        cols.append(d.mean(axis=1))
    return np.stack(cols, axis=1)


def decide(scores: np.ndarray, pool: SharedPool, threshold: float):
    """Expand/retrieve decision from per-sample scores against known tasks.

    A sample is out-of-distribution for every task iff its smallest task
    score exceeds the threshold. The task expands the pool when a strict
    majority of its samples are OOD-for-all; otherwise it retrieves the set
    owned by the majority vote of per-sample nearest tasks (argmin, ties to
    the lowest task index).
    """
    if scores.size == 0:
        return "expand", None, {"ood_fraction": 1.0, "votes": {}}
    min_scores = scores.min(axis=1)
    nearest = scores.argmin(axis=1) + 1
    ood_fraction = float((min_scores > threshold).mean())
    counts = {int(t): int((nearest == t).sum()) for t in np.unique(nearest)}
    votes = {t: c / len(nearest) for t, c in sorted(counts.items())}
    if ood_fraction > 0.5:
        return "expand", None, {"ood_fraction": ood_fraction, "votes": votes}
    best = max(sorted(counts), key=lambda t: counts[t])
    return "retrieve", pool.association[best], {"ood_fraction": ood_fraction, "votes": votes}


# ---------------------------------------------------------------------------
# training with the pool


def _fresh_pool_set(cfg: TrainConfig, dim: int, index: int) -> PetParams:
    return init_pet(
        "lora",
        layers=cfg.pet_layers,
        dim=dim,
        rng=stream(cfg.seed, "pool", index),
        bottleneck=cfg.bottleneck,
        lora_scale=cfg.lora_scale,
        lora_targets=cfg.lora_targets,
        dtype=cfg.dtype,
    )


def aka_train_task(task_number, train_set, state: HideState, pool: SharedPool,
                   ckpt: BackboneCheckpoint, cfg: TrainConfig) -> dict:
    """One task of the pool-gated variant; returns the decision log entry."""
    if cfg.technique != "lora":
        raise ConfigError("the knowledge pool requires the low-rank technique")
    x = train_set.x.astype(cfg.dtype)
    if state.task_count == 0:
        decision, set_idx, info = "expand", None, {"ood_fraction": 1.0, "votes": {}}
    else:
        reps = _normalize(_encode_plain(x, ckpt, None))
        scores = _score_matrix(reps, state, state.task_count)
        decision, set_idx, info = decide(scores, pool, pool.ood_threshold)

    if decision == "expand":
        set_idx = pool.size
        pool.sets.append(_fresh_pool_set(cfg, state.dim, set_idx))
        pool.tasks_per_set.append(0)
    selected = pool.sets[set_idx]
    first_for_set = pool.tasks_per_set[set_idx] == 0
    policy = SharedPolicy(lr=cfg.lr_strong if first_for_set else cfg.lr_slow)

    train_task(
        task_number, train_set, state, ckpt, cfg,
        shared_override=selected,
        uninstructed_pet=None,
        shared_policy=policy,
        phased_merge=lambda final_set: merge_temporarily(ckpt, final_set),
    )
    pool.tasks_per_set[set_idx] += 1
    pool.association[task_number] = set_idx
    return {
        "task": task_number,
        "decision": decision,
        "set": set_idx,
        "ood_fraction": info["ood_fraction"],
        "votes": info["votes"],
    }


def run_aka_experiment(stream_obj: TaskStream, ckpt: BackboneCheckpoint, cfg: TrainConfig,
                       ood_threshold: float, config_hash: str = ""):
    """Pool-gated run over a (typically mixed) stream with per-task decisions.

    Evaluation folds each predicted task's associated set into the backbone;
    the plain backbone keeps serving uninstructed encodings. Also probes
    transfer onto held-out validation tasks, full-shot and 5-shot, with and
    without the retrieved merge.
    """
    state = init_state(cfg, ckpt, stream_obj.scenario)
    state.shared_pet = None  # the pool replaces the single shared set
    pool = SharedPool(ood_threshold=ood_threshold)
    decisions = []
    n = stream_obj.n_tasks
    matrix = AccuracyMatrix(n)
    for i, task in enumerate(stream_obj.tasks, start=1):
        decisions.append(aka_train_task(i, task.train, state, pool, ckpt, cfg))
        merged = [merge_temporarily(ckpt, s) for s in pool.sets]
        kw = {"set_for_task": dict(pool.association), "merged_for_set": merged}
        for j in range(1, i + 1):
            matrix.set(j, i, task_accuracy(state, ckpt, stream_obj.tasks[j - 1].test, j,
                                           stream_obj.scenario, **kw))
    mets = metrics(matrix)
    tii_acc, faa_u = eval_tii(state, ckpt, [t.test for t in stream_obj.tasks], cfg)

    transfer = {}
    if stream_obj.validation:
        merged = [merge_temporarily(ckpt, s) for s in pool.sets]
        for label, shots in (("full", None), ("few", 5)):
            with_pool, without_pool = [], []
            for v, vtask in enumerate(stream_obj.validation):
                sel = _retrieve_for_samples(vtask.train.x.astype(cfg.dtype), state, pool, ckpt)
                with_pool.append(probe_accuracy(vtask, merged[sel], cfg, shots, tag=f"v{v}m"))
                without_pool.append(probe_accuracy(vtask, ckpt, cfg, shots, tag=f"v{v}p"))
            transfer[label] = {
                "with_pool": float(np.mean(with_pool)),
                "without_pool": float(np.mean(without_pool)),
            }

    record = {
        "record_version": 1,
        "kind": "aka",
        "config_hash": config_hash,
        "seed": cfg.seed,
        "scenario": stream_obj.scenario,
        "technique": cfg.technique,
        "components": cfg.components,
        "shared_strategy": "fsa_sl",
        "recovery": cfg.recovery,
        "lambda_ood": ood_threshold,
        "n_tasks": n,
        "dataset_tags": [t.dataset_tag for t in stream_obj.tasks],
        "metrics": {k: mets[k] for k in ("faa", "caa", "ffm", "ala")},
        "aa": mets["aa"],
        "matrix": matrix.to_lists(),
        "tii_accuracy": tii_acc,
        "faa_u": faa_u,
        "pool_size": pool.size,
        "decisions": decisions,
        "transfer": transfer,
        "theta_hash": ckpt.content_hash(),
        "frozen_paths_ok": all(verify_frozen_paths(state).values()),
    }
    return record, state, pool, matrix


def _retrieve_for_samples(x, state: HideState, pool: SharedPool, ckpt) -> int:
    reps = _normalize(_encode_plain(x, ckpt, None))
    scores = _score_matrix(reps, state, state.task_count)
    nearest = scores.argmin(axis=1) + 1
    counts = {int(t): int((nearest == t).sum()) for t in np.unique(nearest)}
    best = max(sorted(counts), key=lambda t: counts[t])
    return pool.association[best]


def probe_accuracy(task_data, enc_ckpt, cfg: TrainConfig, shots=None, tag="",
                   epochs: int = 40) -> float:
    """Linear probe on a held-out task: train a fresh head on (optionally
    few-shot) encodings, report percent test accuracy."""
    x, y = task_data.train.x.astype(cfg.dtype), task_data.train.y
    classes = sorted(int(c) for c in np.unique(y))
    remap = {c: i for i, c in enumerate(classes)}
    if shots is not None:
        keep = []
        for c in classes:
            idx = np.flatnonzero(y == c)
            pick = stream(cfg.seed, "probe_shots", tag, c).choice(idx, size=min(shots, len(idx)), replace=False)
            keep.extend(pick.tolist())
        keep = np.asarray(sorted(keep))
        x, y = x[keep], y[keep]
    feats = _encode_plain(x, enc_ckpt, None)
    labels = np.asarray([remap[int(c)] for c in y])
    head = _grow_head(None, len(classes), feats.shape[1], cfg.dtype)
    opt = nc.Adam([head["w"], head["b"]], lr=cfg.lr_strong)
    ft = feats.astype(cfg.dtype)
    for _ in range(epochs):
        loss = tap_loss(ft, labels, head)
        opt.zero_grad()
        nc.backward(loss)
        opt.step()
    test_feats = _encode_plain(task_data.test.x.astype(cfg.dtype), enc_ckpt, None)
    logits = test_feats @ head["w"].data + head["b"].data
    test_labels = np.asarray([remap[int(c)] for c in task_data.test.y])
    return 100.0 * float((logits.argmax(axis=1) == test_labels).mean())


# ---------------------------------------------------------------------------
# threshold sweeps


def sweep_pool_size(stream_obj: TaskStream, ckpt: BackboneCheckpoint, cfg: TrainConfig,
                    thresholds) -> list:
    """Pool size after the stream as a function of the OOD threshold.

    Decisions depend only on plain-backbone statistics, never on the pool
    itself, so one scoring pass serves every threshold.
    """
    per_task_centroids = []
    per_task_reps = []
    for task in stream_obj.tasks:
        x = task.train.x.astype(cfg.dtype)
        y = task.train.y
        reps = _encode_plain(x, ckpt, None)
        cents = []
        for c in np.unique(y):
            fit_rng = stream(cfg.seed, "sweep_stats", int(c))
            from .hide import fit_stats

            cents.append(fit_stats(reps[y == c], "multicentroid", fit_rng,
                                   k=cfg.stats_centroids).centroids)
        per_task_centroids.append(_normalize(np.concatenate(cents, axis=0)))
        per_task_reps.append(_normalize(reps))

    points = []
    for lam in thresholds:
        association: dict[int, int] = {}
        k = 0
        for t in range(len(stream_obj.tasks)):
            if t == 0:
                association[1] = 0
                k = 1
                continue
            reps = per_task_reps[t]
            scores = np.stack(
                [np.linalg.norm(reps[:, None, :] - per_task_centroids[p][None, :, :], axis=2).mean(axis=1)
                 for p in range(t)], axis=1,
            )
            min_scores = scores.min(axis=1)
            nearest = scores.argmin(axis=1) + 1
            if float((min_scores > lam).mean()) > 0.5:
                association[t + 1] = k
                k += 1
            else:
                counts = {int(i): int((nearest == i).sum()) for i in np.unique(nearest)}
                best = max(sorted(counts), key=lambda i: counts[i])
                association[t + 1] = association[best]
        points.append({"lambda_ood": float(lam), "pool_size": k})
    return points
