"""Benchmark generation, continual-learning metrics, experiment orchestration
and report emission (delimited tables plus rendered figures).

Synthetic tasks are Gaussian-cluster token sequences: every class owns a
center in raw feature space and a sample is `token_len` noisy copies of that
center. Class-incremental streams partition disjoint classes into tasks;
domain-incremental streams reuse one class set under per-task domain offsets;
mixed streams interleave two generative families with distinct signature
directions so distribution changes are pronounced.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .backbone import BackboneCheckpoint, LabeledSet
from .errors import ConfigError, ContractError, GroupingError
from .hide import TrainConfig, eval_tii, init_state, task_accuracy, train_task
from .rng import stream


@dataclass
class TaskData:
    train: LabeledSet
    test: LabeledSet
    classes: list
    dataset_tag: int = 0


@dataclass
class TaskStream:
    scenario: str
    tasks: list
    descriptor: dict
    validation: list = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)


@dataclass
class StreamConfig:
    seed: int = 1
    scenario: str = "cil"
    n_classes: int = 24
    n_tasks: int = 4
    train_per_class: int = 100
    test_per_class: int = 50
    token_len: int = 8
    d_feat: int = 32
    center_scale: float = 1.0
    noise: float = 1.0
    domain_scale: float = 2.0      # domain-incremental offset strength
    task_drift: float = 0.0        # distribution movement per task index
    subspace_dim: int = 0          # 0 = full space; else class centers live in
                                   # a low-dim subspace (small, amplifiable margins)
    subspace_rotation: float = 0.0 # radians the class subspace turns across the
                                   # stream (needs subspace_dim > 0)
    class_id_base: int = 1000
    pretext_classes: int = 20

    def __post_init__(self):
        if self.scenario not in ("cil", "dil", "til"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")


def _class_center(seed, class_id, scale, d_feat, namespace="cl"):
    return stream(seed, "center", namespace, class_id).standard_normal(d_feat) * scale


def _draw_class(seed, class_id, center, n, token_len, d_feat, noise, split, task_tag=""):
    g = stream(seed, "sample", class_id, task_tag, split)
    return center[None, None, :] + noise * g.standard_normal((n, token_len, d_feat))


def make_pretext(cfg: StreamConfig) -> LabeledSet:
    """Held-out pretext classes (ids [0, pretext_classes)) for pretraining."""
    xs, ys = [], []
    for cid in range(cfg.pretext_classes):
        center = _class_center(cfg.seed, cid, cfg.center_scale, cfg.d_feat, "pretext")
        x = _draw_class(cfg.seed, cid, center, cfg.train_per_class, cfg.token_len,
                        cfg.d_feat, cfg.noise, "pretext")
        xs.append(x)
        ys.append(np.full(cfg.train_per_class, cid))
    return LabeledSet(np.concatenate(xs).astype(np.float32), np.concatenate(ys))


def make_stream(cfg: StreamConfig) -> TaskStream:
    """Build a task stream. Class-incremental and task-incremental streams use
    pairwise-disjoint label spaces; domain-incremental streams repeat one
    label space under per-task offsets. Deterministic under the seed."""
    if cfg.class_id_base < cfg.pretext_classes:
        raise ConfigError(
            f"class ids from {cfg.class_id_base} overlap the pretext range "
            f"[0, {cfg.pretext_classes})"
        )
    if cfg.scenario in ("cil", "til") and cfg.n_classes % cfg.n_tasks:
        raise ConfigError(f"{cfg.n_classes} classes not divisible into {cfg.n_tasks} tasks")
    per_task = cfg.n_classes // cfg.n_tasks if cfg.scenario in ("cil", "til") else cfg.n_classes
    drift_dir = stream(cfg.seed, "drift").standard_normal(cfg.d_feat)
    drift_dir /= np.linalg.norm(drift_dir)
    basis = basis_far = None
    if cfg.subspace_dim:
        both, _ = np.linalg.qr(
            stream(cfg.seed, "class_subspace").standard_normal((cfg.d_feat, 2 * cfg.subspace_dim))
        )
        basis, basis_far = both[:, : cfg.subspace_dim], both[:, cfg.subspace_dim :]
    tasks = []
    for t in range(cfg.n_tasks):
        if cfg.scenario in ("cil", "til"):
            classes = [cfg.class_id_base + t * per_task + j for j in range(per_task)]
            offset = drift_dir * cfg.task_drift * t
            tag = ""
        else:
            classes = [cfg.class_id_base + j for j in range(per_task)]
            offset = stream(cfg.seed, "domain", t).standard_normal(cfg.d_feat) * cfg.domain_scale
            tag = f"dom{t}"
        task_basis = basis
        if basis is not None and cfg.subspace_rotation and cfg.n_tasks > 1:
            angle = cfg.subspace_rotation * t / (cfg.n_tasks - 1)
            task_basis = basis * np.cos(angle) + basis_far * np.sin(angle)
        xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
        for cid in classes:
            if basis is not None:
                coords = stream(cfg.seed, "center", "sub", cid).standard_normal(cfg.subspace_dim)
                center = task_basis @ coords * cfg.center_scale + offset
            else:
                center = _class_center(cfg.seed, cid, cfg.center_scale, cfg.d_feat) + offset
            tr = _draw_class(cfg.seed, cid, center, cfg.train_per_class, cfg.token_len,
                             cfg.d_feat, cfg.noise, f"train{tag}", tag)
            te = _draw_class(cfg.seed, cid, center, cfg.test_per_class, cfg.token_len,
                             cfg.d_feat, cfg.noise, f"test{tag}", tag)
            xs_tr.append(tr)
            ys_tr.append(np.full(cfg.train_per_class, cid))
            xs_te.append(te)
            ys_te.append(np.full(cfg.test_per_class, cid))
        tasks.append(TaskData(
            train=LabeledSet(np.concatenate(xs_tr).astype(np.float32), np.concatenate(ys_tr)),
            test=LabeledSet(np.concatenate(xs_te).astype(np.float32), np.concatenate(ys_te)),
            classes=classes,
        ))
    return TaskStream(cfg.scenario, tasks, descriptor=vars(cfg).copy())


@dataclass
class MixedStreamConfig:
    seed: int = 1
    n_datasets: int = 2
    tasks_per_dataset: int = 2
    val_tasks_per_dataset: int = 2
    classes_per_task: int = 5
    train_per_class: int = 60
    test_per_class: int = 30
    token_len: int = 8
    d_feat: int = 32
    signature_scale: float = 12.0  # dataset-level direction, dominates classes
    center_scale: float = 1.2      # class spread inside the dataset's subspace
    subspace_dim: int = 2          # dataset-private subspace carrying class info
    noise: float = 1.0
    class_id_base: int = 1000
    pretext_classes: int = 20


def make_mixed_stream(cfg: MixedStreamConfig) -> TaskStream:
    """Interleave tasks from generatively distinct families and hold out
    validation tasks per family for transfer probes.

    Each family owns a signature direction (large, identifies the family) and
    a private low-dimensional subspace in which all of its class centers
    live, so family-level adaptation transfers to its held-out classes.
    """
    if cfg.n_datasets < 2:
        raise ConfigError("a mixed stream needs at least two dataset descriptors")
    if cfg.class_id_base < cfg.pretext_classes:
        raise ConfigError("mixed-stream class ids overlap the pretext range")
    next_id = cfg.class_id_base
    per_ds_tasks: list[list[TaskData]] = []
    per_ds_val: list[list[TaskData]] = []
    for k in range(cfg.n_datasets):
        sig = stream(cfg.seed, "dataset", k, "signature").standard_normal(cfg.d_feat)
        norm = np.linalg.norm(sig)
        sig = sig / norm * cfg.signature_scale if cfg.signature_scale else np.zeros(cfg.d_feat)
        basis = None
        if cfg.subspace_dim:
            basis, _ = np.linalg.qr(
                stream(cfg.seed, "dataset", k, "subspace").standard_normal(
                    (cfg.d_feat, cfg.subspace_dim)
                )
            )
        ds_tasks, ds_val = [], []
        for t in range(cfg.tasks_per_dataset + cfg.val_tasks_per_dataset):
            classes = list(range(next_id, next_id + cfg.classes_per_task))
            next_id += cfg.classes_per_task
            xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
            for cid in classes:
                if basis is not None:
                    coords = stream(cfg.seed, "center", "mixed", cid).standard_normal(cfg.subspace_dim)
                    center = sig + basis @ coords * cfg.center_scale
                else:
                    # no private subspace: same family as the plain generator
                    center = sig + _class_center(cfg.seed, cid, cfg.center_scale, cfg.d_feat)
                tr = _draw_class(cfg.seed, cid, center, cfg.train_per_class,
                                 cfg.token_len, cfg.d_feat, cfg.noise, "train")
                te = _draw_class(cfg.seed, cid, center, cfg.test_per_class,
                                 cfg.token_len, cfg.d_feat, cfg.noise, "test")
                xs_tr.append(tr)
                ys_tr.append(np.full(cfg.train_per_class, cid))
                xs_te.append(te)
                ys_te.append(np.full(cfg.test_per_class, cid))
            td = TaskData(
                train=LabeledSet(np.concatenate(xs_tr).astype(np.float32), np.concatenate(ys_tr)),
                test=LabeledSet(np.concatenate(xs_te).astype(np.float32), np.concatenate(ys_te)),
                classes=classes,
                dataset_tag=k,
            )
            (ds_tasks if t < cfg.tasks_per_dataset else ds_val).append(td)
        per_ds_tasks.append(ds_tasks)
        per_ds_val.append(ds_val)
    interleaved = []
    for t in range(cfg.tasks_per_dataset):
        for k in range(cfg.n_datasets):
            interleaved.append(per_ds_tasks[k][t])
    validation = [td for ds in per_ds_val for td in ds]
    return TaskStream("cil", interleaved, descriptor=vars(cfg).copy(), validation=validation)


# ---------------------------------------------------------------------------
# metrics


class AccuracyMatrix:
    """Lower-triangular per-task accuracies: entry (task, stage) is the
    percent accuracy on `task` after learning `stage` (both 1-based)."""

    def __init__(self, n_tasks: int):
        self.n_tasks = n_tasks
        self.a = np.full((n_tasks, n_tasks), np.nan)

    def set(self, task: int, stage: int, value: float):
        if not 0.0 <= value <= 100.0:
            raise ContractError(f"accuracy {value} outside [0, 100]")
        self.a[task - 1, stage - 1] = value

    def get(self, task: int, stage: int) -> float:
        return float(self.a[task - 1, stage - 1])

    def rows(self):
        for i in range(self.n_tasks):
            for j in range(self.n_tasks):
                if not np.isnan(self.a[i, j]):
                    yield i + 1, j + 1, float(self.a[i, j])

    def to_lists(self):
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.a]

    @classmethod
    def from_lists(cls, rows):
        m = cls(len(rows))
        for i, row in enumerate(rows):
            for j, v in enumerate(row):
                if v is not None:
                    m.a[i, j] = v
        return m


def metrics(matrix: AccuracyMatrix, ala_literal: bool = False) -> dict:
    """Final/cumulative average accuracy, final forgetting, learning accuracy.

    `ala_literal=True` evaluates each task at the stage just before it was
    learned, which requires pre-learning entries below the diagonal; the
    default uses the accuracy at each task's own learning stage.
    """
    a = matrix.a
    t = matrix.n_tasks
    for i in range(t):
        for j in range(i, t):
            if np.isnan(a[i, j]):
                raise ContractError(f"missing accuracy entry (task {i + 1}, stage {j + 1})")
    aa = [float(np.mean([a[i, j] for i in range(j + 1)])) for j in range(t)]
    faa = aa[-1]
    caa = float(np.mean(aa))
    if t > 1:
        ffm = float(np.mean([
            max(a[i, j] for j in range(i, t - 1)) - a[i, t - 1] for i in range(t - 1)
        ]))
        if ala_literal:
            vals = [a[i, i - 1] for i in range(1, t)]
            if any(np.isnan(v) for v in vals):
                raise ContractError(
                    "literal learning-accuracy needs pre-learning entries (task i at stage i-1)"
                )
            ala = float(np.mean(vals))
        else:
            ala = float(np.mean([a[i, i] for i in range(1, t)]))
    else:
        ffm = 0.0
        ala = float("nan")
    return {"faa": faa, "caa": caa, "ffm": ffm, "ala": ala, "aa": aa}


def save_matrix_csv(matrix: AccuracyMatrix, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "stage", "accuracy"])
        for task, stage, v in matrix.rows():
            w.writerow([task, stage, repr(v)])


def load_matrix_csv(path) -> AccuracyMatrix:
    entries = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            entries.append((int(row["task"]), int(row["stage"]), float(row["accuracy"])))
    m = AccuracyMatrix(max(max(t, s) for t, s, _ in entries))
    for t, s, v in entries:
        m.set(t, s, v)
    return m


# ---------------------------------------------------------------------------
# experiments


RECORD_VERSION = 1


def run_experiment(stream_obj: TaskStream, ckpt: BackboneCheckpoint, tcfg: TrainConfig,
                   config_hash: str = "", extra: dict | None = None):
    """Train through the stream, evaluating all seen tasks after each one.

    Returns (record, state, matrix). The record is a plain dict ready for
    canonical JSON; wall time goes to a sidecar, never into the record, so
    identical config + seed reproduces identical bytes.
    """
    t0 = time.time()
    scenario = stream_obj.scenario
    if ckpt.meta.get("pretrain_classes") and stream_obj.descriptor.get("class_id_base", 0) < ckpt.meta["pretrain_classes"]:
        raise ConfigError("stream classes overlap the checkpoint's pretext classes")
    if stream_obj.tasks[0].train.x.shape[-1] != ckpt.d_feat:
        raise ConfigError(
            f"stream feature dim {stream_obj.tasks[0].train.x.shape[-1]} != checkpoint {ckpt.d_feat}"
        )
    state = init_state(tcfg, ckpt, scenario)
    n = stream_obj.n_tasks
    matrix = AccuracyMatrix(n)
    for i, task in enumerate(stream_obj.tasks, start=1):
        train_task(i, task.train, state, ckpt, tcfg)
        for j in range(1, i + 1):
            acc = task_accuracy(state, ckpt, stream_obj.tasks[j - 1].test, j, scenario)
            matrix.set(j, i, acc)
    mets = metrics(matrix)
    if state.task_head is not None:
        tii_acc, faa_u = eval_tii(state, ckpt, [t.test for t in stream_obj.tasks], tcfg)
    else:
        tii_acc, faa_u = float("nan"), float("nan")
    frozen = verify_frozen_paths(state)
    record = {
        "record_version": RECORD_VERSION,
        "kind": "run",
        "config_hash": config_hash,
        "seed": tcfg.seed,
        "scenario": scenario,
        "technique": tcfg.technique,
        "components": tcfg.components,
        "shared_strategy": tcfg.shared_strategy,
        "recovery": tcfg.recovery,
        "n_tasks": n,
        "metrics": {k: mets[k] for k in ("faa", "caa", "ffm", "ala")},
        "aa": mets["aa"],
        "matrix": matrix.to_lists(),
        "tii_accuracy": tii_acc,
        "faa_u": faa_u,
        "theta_hash": ckpt.content_hash(),
        "set_hashes": [p.content_hash() for p in state.task_pets],
        "frozen_paths_ok": all(frozen.values()),
    }
    if extra:
        record.update(extra)
    sidecar = {"wall_time_s": time.time() - t0}
    return record, state, matrix, sidecar


def verify_frozen_paths(state) -> dict:
    """Check that the backbone, every completed tuning set, and every probe
    encoding are hash-identical at every stage after their task finished."""
    out = {"theta": True, "sets": True, "probes": True}
    stages = sorted(state.snapshots)
    if not stages:
        return out
    theta0 = state.snapshots[stages[0]]["theta"]
    for s in stages:
        snap = state.snapshots[s]
        if snap["theta"] != theta0:
            out["theta"] = False
        for j in range(1, s + 1):
            ref = state.snapshots[j]
            if snap.get(f"set{j}") != ref[f"set{j}"]:
                out["sets"] = False
            if snap.get(f"probe{j}") != ref[f"probe{j}"]:
                out["probes"] = False
    return out


def record_to_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_records(records, path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(record_to_line(r) + "\n")


def read_records(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# reporting: delimited tables + rendered figures


_GROUP_FIELDS = ("scenario", "technique", "components", "shared_strategy", "recovery", "kind")


def _group_key(record):
    parts = [str(record.get(f, "")) for f in _GROUP_FIELDS]
    if record.get("lambda_ood") is not None:
        parts.append(f"lam={record['lambda_ood']}")
    return "|".join(parts)


def _mean_std(values):
    values = [v for v in values if v is not None and not np.isnan(v)]
    if not values:
        return float("nan"), float("nan")
    if len(values) == 1:
        return float(values[0]), 0.0
    return float(np.mean(values)), float(np.std(values, ddof=1))


def report(records, out_dir) -> dict:
    """Aggregate run records into mean +- std tables and figures.

    Emits summary.csv (one row per method group and metric), series.csv
    (per-stage average accuracy), and PNG figures next to them. Refuses to
    mix incompatible scenarios into one table.
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not records:
        raise ContractError("no records to report")
    runs = [r for r in records if r.get("kind") in ("run", "aka")]
    scenarios = {r["scenario"] for r in runs}
    if len(scenarios) > 1:
        raise GroupingError(f"records mix scenarios {sorted(scenarios)}; report them separately")

    groups: dict[str, list] = {}
    for r in runs:
        groups.setdefault(_group_key(r), []).append(r)

    paths = {}
    with open(out_dir / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "n_seeds", "metric", "mean", "std"])
        for key in sorted(groups):
            rs = groups[key]
            for metric in ("faa", "caa", "ffm", "ala"):
                m, s = _mean_std([r["metrics"][metric] for r in rs])
                w.writerow([key, len(rs), metric, repr(m), repr(s)])
            m, s = _mean_std([r.get("tii_accuracy") for r in rs])
            w.writerow([key, len(rs), "tii_accuracy", repr(m), repr(s)])
    paths["summary"] = out_dir / "summary.csv"

    with open(out_dir / "series.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group", "stage", "aa_mean", "aa_std"])
        for key in sorted(groups):
            rs = groups[key]
            n_stages = max(len(r["aa"]) for r in rs)
            for stage in range(n_stages):
                m, s = _mean_std([r["aa"][stage] for r in rs if len(r["aa"]) > stage])
                w.writerow([key, stage + 1, repr(m), repr(s)])
    paths["series"] = out_dir / "series.csv"

    paths.update(_render_figures(groups, records, out_dir))
    return paths


def _render_figures(groups, records, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = {}
    if groups:
        fig, ax = plt.subplots(figsize=(6.5, 4.0))
        for key in sorted(groups):
            rs = groups[key]
            n_stages = max(len(r["aa"]) for r in rs)
            xs = np.arange(1, n_stages + 1)
            means, stds = [], []
            for stage in range(n_stages):
                m, s = _mean_std([r["aa"][stage] for r in rs if len(r["aa"]) > stage])
                means.append(m)
                stds.append(s)
            ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3, label=key)
        ax.set_xlabel("tasks learned")
        ax.set_ylabel("average accuracy (%)")
        ax.set_xticks(xs)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = out_dir / "accuracy_vs_task.png"
        fig.savefig(p, dpi=150)
        plt.close(fig)
        paths["accuracy_vs_task"] = p

        fig, ax = plt.subplots(figsize=(6.5, 4.0))
        keys = sorted(groups)
        means, stds = [], []
        for key in keys:
            m, s = _mean_std([r["metrics"]["faa"] for r in groups[key]])
            means.append(m)
            stds.append(s)
        ax.bar(range(len(keys)), means, yerr=stds, capsize=4)
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels(keys, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel("final average accuracy (%)")
        fig.tight_layout()
        p = out_dir / "faa_by_method.png"
        fig.savefig(p, dpi=150)
        plt.close(fig)
        paths["faa_by_method"] = p

    sweep = [r for r in records if r.get("kind") == "aka_sweep"]
    if sweep:
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        for r in sweep:
            lams = [pt["lambda_ood"] for pt in r["points"]]
            ks = [pt["pool_size"] for pt in r["points"]]
            ax.plot(lams, ks, marker="s", label=f"seed {r['seed']}")
        ax.set_xlabel("OOD threshold")
        ax.set_ylabel("pool size after the stream")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = out_dir / "pool_size_vs_lambda.png"
        fig.savefig(p, dpi=150)
        plt.close(fig)
        paths["pool_size_vs_lambda"] = p
    return paths
