import numpy as np
import pytest

from hidepet import backbone as bb
from hidepet import bench, hide, numcore as nc
from hidepet.errors import ConfigError, ProtocolError, StateError
from hidepet.numcore import Tensor
from hidepet.rng import stream


def _small_run(ckpt, seed=1, n_classes=8, n_tasks=2, epochs=3, head_epochs=8, **kw):
    scfg = bench.StreamConfig(seed=seed, n_classes=n_classes, n_tasks=n_tasks,
                              train_per_class=25, test_per_class=12)
    stream_obj = bench.make_stream(scfg)
    tcfg = hide.TrainConfig(seed=seed, epochs=epochs, head_epochs=head_epochs, **kw)
    state = hide.init_state(tcfg, ckpt, scfg.scenario)
    for i, task in enumerate(stream_obj.tasks, 1):
        hide.train_task(i, task.train, state, ckpt, tcfg)
    return state, stream_obj, tcfg


# ---------------------------------------------------------------------------
# representation statistics


def test_fit_stats_identical_reps_collapse():
    reps = np.tile([1.0, 2.0, 3.0], (40, 1))
    s = hide.fit_stats(reps, "multicentroid", stream(1, "id"))
    assert len(s.centroids) == 1
    assert s.sigma == 0.0
    draws = s.sample(16, stream(1, "d"))
    assert (draws == reps[0]).all()


def test_fit_stats_storage_matches_complexity_table():
    d = 16
    reps = stream(2, "st").standard_normal((50, d))
    counts = {
        "prototype": hide.fit_stats(reps, "prototype", stream(2, "p")).param_count(),
        "variance": hide.fit_stats(reps, "variance", stream(2, "v")).param_count(),
        "covariance": hide.fit_stats(reps, "covariance", stream(2, "c")).param_count(),
        "multicentroid": hide.fit_stats(reps, "multicentroid", stream(2, "m")).param_count(),
    }
    assert counts["prototype"] == 10 * d
    assert counts["variance"] == 2 * d
    assert counts["covariance"] == d * d + d
    assert counts["multicentroid"] <= 10 * d


def test_fit_stats_recovers_known_cluster_centers():
    g = stream(3, "two")
    a = np.array([3.0] * 4)
    b = np.array([-3.0] * 4)
    reps = np.concatenate([
        a + 0.05 * g.standard_normal((200, 4)),
        b + 0.05 * g.standard_normal((200, 4)),
    ])
    s = hide.fit_stats(reps, "multicentroid", stream(3, "km"), k=2)
    got = sorted(s.centroids.tolist())
    assert np.abs(np.asarray(got[0]) - b).max() <= 1e-2
    assert np.abs(np.asarray(got[1]) - a).max() <= 1e-2


def test_fit_stats_fallback_warns_with_few_samples():
    reps = stream(4, "few").standard_normal((4, 6))
    with pytest.warns(UserWarning, match="centroids"):
        s = hide.fit_stats(reps, "multicentroid", stream(4, "k"), k=10)
    assert len(s.centroids) <= 4


def test_sample_reps_degenerate_draws():
    mean = np.array([1.0, -2.0, 0.5])
    s = hide.RepStats("variance", mean=mean, var=np.zeros(3))
    draws = hide.sample_reps(s, 8, stream(5, "v0"))
    assert (draws == mean).all()
    with pytest.raises(ConfigError):
        hide.sample_reps(s, 0, stream(5, "n"))


def test_sample_reps_law_of_large_numbers():
    mean = np.array([2.0, -1.0])
    var = np.array([0.5, 2.0])
    s = hide.RepStats("variance", mean=mean, var=var)
    n = 10_000
    draws = hide.sample_reps(s, n, stream(6, "lln"))
    bound = 3.0 * np.sqrt(var) / np.sqrt(n)
    assert (np.abs(draws.mean(axis=0) - mean) <= bound).all()


def test_sample_reps_covariance_matches_target():
    g = stream(7, "cov")
    a = g.standard_normal((4, 4))
    cov = a @ a.T + 0.5 * np.eye(4)
    s = hide.RepStats("covariance", mean=np.zeros(4), cov=cov)
    draws = hide.sample_reps(s, 20_000, stream(7, "d"))
    emp = np.cov(draws.T)
    assert np.abs(emp - cov).max() <= 0.15 * np.abs(cov).max() + 0.05


# ---------------------------------------------------------------------------
# losses


def test_wtp_loss_perfect_and_uniform(desk_ckpt):
    scfg = bench.StreamConfig(seed=1, n_classes=8, n_tasks=2, train_per_class=25,
                              test_per_class=12, center_scale=2.0)
    stream_obj = bench.make_stream(scfg)
    tcfg = hide.TrainConfig(seed=1, epochs=25, head_epochs=8, batch_size=32, components="wtp")
    state = hide.init_state(tcfg, desk_ckpt, "cil")
    for i, task in enumerate(stream_obj.tasks, 1):
        hide.train_task(i, task.train, state, desk_ckpt, tcfg)
    task = stream_obj.tasks[1]
    cols = state.task_columns(2)
    loss = hide.wtp_loss(task.train.x.astype(np.float32), task.train.y, desk_ckpt,
                         state.task_pets[1], state.class_head,
                         int(cols.min()), int(cols.max()) + 1, state.col_of)
    assert loss.item() < 0.1  # converged task-local classifier approaches zero
    # uniform head gives log |Y_t|
    zero_head = {"w": Tensor(np.zeros((desk_ckpt.dim, len(state.class_ids)), dtype=np.float32)),
                 "b": Tensor(np.zeros(len(state.class_ids), dtype=np.float32))}
    uniform = hide.wtp_loss(task.train.x.astype(np.float32), task.train.y, desk_ckpt,
                            state.task_pets[1], zero_head,
                            int(cols.min()), int(cols.max()) + 1, state.col_of)
    assert abs(uniform.item() - np.log(len(cols))) <= 1e-5


def test_wtp_loss_rejects_out_of_task_labels(desk_ckpt):
    state, stream_obj, _ = _small_run(desk_ckpt, epochs=1, head_epochs=1)
    task2 = stream_obj.tasks[1]
    cols = state.task_columns(1)
    with pytest.raises(IndexError):
        hide.wtp_loss(task2.train.x.astype(np.float32), task2.train.y, desk_ckpt,
                      state.task_pets[0], state.class_head,
                      int(cols.min()), int(cols.max()) + 1, state.col_of)


def test_tii_and_tap_losses_match_direct_formula():
    g = stream(8, "fl")
    d, t, n = 6, 3, 12
    samples = g.standard_normal((n, d))
    head = {"w": Tensor(g.standard_normal((d, t))), "b": Tensor(g.standard_normal(t))}
    labels = g.integers(t, size=n)
    loss = hide.tii_loss(samples, labels, head)
    logits = samples @ head["w"].data + head["b"].data
    expected = 0.0
    for row, lab in zip(logits, labels):
        p = np.exp(row - row.max())
        p /= p.sum()
        expected += -np.log(p[lab])
    assert abs(loss.item() - expected / n) <= 1e-10
    loss2 = hide.tap_loss(samples, labels, head)
    assert abs(loss2.item() - expected / n) <= 1e-10
    with pytest.raises(IndexError):
        hide.tii_loss(samples, labels + t, head)
    with pytest.raises(IndexError):
        hide.tap_loss(samples, labels + t, head)


def test_restricted_softmax_leaves_other_columns_untouched():
    # gradient of the within-task objective must not reach other tasks' columns
    g = stream(9, "cols")
    feats = Tensor(g.standard_normal((5, 6)))
    head = {"w": Tensor(g.standard_normal((6, 9)), requires_grad=True),
            "b": Tensor(np.zeros(9), requires_grad=True)}
    logits = nc.narrow(nc.affine(feats, head["w"], head["b"]), 1, 3, 3)
    loss = nc.cross_entropy(logits, [0, 1, 2, 0, 1])
    nc.backward(loss)
    grad = head["w"].grad
    assert np.abs(grad[:, :3]).max() == 0.0
    assert np.abs(grad[:, 6:]).max() == 0.0
    assert np.abs(grad[:, 3:6]).max() > 0.0


# ---------------------------------------------------------------------------
# shared-set policies


def test_update_shared_policies():
    cfg = hide.TrainConfig()
    fsa1 = hide.update_shared("fsa", 1, 10, cfg)
    assert fsa1.lr == cfg.lr_strong and not fsa1.frozen
    assert hide.update_shared("fsa", 3, 10, cfg).frozen
    assert hide.update_shared("sl", 2, 10, cfg).lr == cfg.lr_slow
    assert hide.update_shared("fsa_sl", 1, 10, cfg).lr == cfg.lr_strong
    assert hide.update_shared("fsa_sl", 2, 10, cfg).lr == cfg.lr_slow
    ft = hide.update_shared("f_t", 1, 10, cfg)
    assert not ft.trains_at(4) and ft.trains_at(5)
    assert hide.update_shared("ema", 2, 10, cfg).interim
    with pytest.raises(ConfigError):
        hide.update_shared("warp", 1, 10, cfg)


def test_paper_default_rates():
    cfg = hide.TrainConfig()
    assert cfg.lr_strong == 0.01
    assert cfg.lr_slow == 0.001
    assert cfg.ema_momentum == 0.1
    assert cfg.blend_alpha == 0.1
    assert cfg.prompt_len == 20
    assert cfg.bottleneck == 10


def test_fsa_freezes_shared_set_after_first_task(desk_ckpt):
    state, _, _ = _small_run(desk_ckpt, shared_strategy="fsa", epochs=2, head_epochs=2)
    # retrain another task and confirm the shared set is bit-identical
    h_after_1 = None
    scfg = bench.StreamConfig(seed=3, n_classes=8, n_tasks=2, train_per_class=20, test_per_class=8)
    stream_obj = bench.make_stream(scfg)
    tcfg = hide.TrainConfig(seed=3, shared_strategy="fsa", epochs=2, head_epochs=2)
    state = hide.init_state(tcfg, desk_ckpt, "cil")
    hide.train_task(1, stream_obj.tasks[0].train, state, desk_ckpt, tcfg)
    h_after_1 = state.shared_pet.content_hash()
    hide.train_task(2, stream_obj.tasks[1].train, state, desk_ckpt, tcfg)
    assert state.shared_pet.content_hash() == h_after_1


def test_ema_blends_with_momentum(desk_ckpt):
    scfg = bench.StreamConfig(seed=4, n_classes=4, n_tasks=1, train_per_class=20, test_per_class=8)
    stream_obj = bench.make_stream(scfg)
    tcfg = hide.TrainConfig(seed=4, shared_strategy="ema", epochs=2, head_epochs=2)
    state = hide.init_state(tcfg, desk_ckpt, "cil")
    before = {k: v.data.copy() for k, v in state.shared_pet.tensors.items()}
    hide.train_task(1, stream_obj.tasks[0].train, state, desk_ckpt, tcfg)
    moved = max(np.abs(state.shared_pet.tensors[k].data - before[k]).max() for k in before)
    assert 0.0 < moved  # blended, not frozen
    # momentum bounds the move: g' = (1-m) g + m g_interim
    for k in before:
        delta = np.abs(state.shared_pet.tensors[k].data - before[k])
        assert (delta <= tcfg.ema_momentum * (np.abs(before[k]) + 10.0)).all()


# ---------------------------------------------------------------------------
# training protocol


def test_tasks_must_arrive_in_order(desk_ckpt):
    scfg = bench.StreamConfig(seed=5, n_classes=8, n_tasks=2, train_per_class=10, test_per_class=5)
    stream_obj = bench.make_stream(scfg)
    tcfg = hide.TrainConfig(seed=5, epochs=1, head_epochs=1)
    state = hide.init_state(tcfg, desk_ckpt, "cil")
    with pytest.raises(ProtocolError):
        hide.train_task(2, stream_obj.tasks[1].train, state, desk_ckpt, tcfg)


def test_first_task_trains_trivial_identity(desk_ckpt):
    state, stream_obj, tcfg = _small_run(desk_ckpt, n_tasks=2, n_classes=8, epochs=2, head_epochs=4)
    assert state.task_head["w"].shape[1] == 2
    # after one task the width was 1 and identity was trivially task 1
    tcfg2 = hide.TrainConfig(seed=9, epochs=1, head_epochs=2)
    scfg = bench.StreamConfig(seed=9, n_classes=4, n_tasks=1, train_per_class=10, test_per_class=5)
    s2 = bench.make_stream(scfg)
    st2 = hide.init_state(tcfg2, desk_ckpt, "cil")
    hide.train_task(1, s2.tasks[0].train, st2, desk_ckpt, tcfg2)
    assert st2.task_head["w"].shape[1] == 1
    preds, tasks = hide.infer(s2.tasks[0].test.x, st2, desk_ckpt)
    assert (tasks == 1).all()


def test_earlier_sets_and_backbone_frozen_through_later_tasks(desk_ckpt):
    state, _, _ = _small_run(desk_ckpt, n_tasks=2, epochs=2, head_epochs=2)
    frozen = bench.verify_frozen_paths(state)
    assert frozen == {"theta": True, "sets": True, "probes": True}


def test_rehearsal_free_state_holds_no_raw_samples(desk_ckpt):
    state, stream_obj, _ = _small_run(desk_ckpt, epochs=1, head_epochs=1)
    n_train = len(stream_obj.tasks[0].train.y)
    # nothing in the persisted payload is as large as a raw task split
    for stats_map in (state.uninstructed_stats, state.instructed_stats):
        for s in stats_map.values():
            assert s.param_count() < n_train * desk_ckpt.d_feat
    for p in state.task_pets:
        for t in p.tensors.values():
            assert t.data.ndim == 2


def test_duplicate_classes_rejected_in_disjoint_scenarios(desk_ckpt):
    scfg = bench.StreamConfig(seed=6, n_classes=4, n_tasks=1, train_per_class=10, test_per_class=5)
    stream_obj = bench.make_stream(scfg)
    tcfg = hide.TrainConfig(seed=6, epochs=1, head_epochs=1)
    state = hide.init_state(tcfg, desk_ckpt, "cil")
    hide.train_task(1, stream_obj.tasks[0].train, state, desk_ckpt, tcfg)
    with pytest.raises(ProtocolError):
        hide.train_task(2, stream_obj.tasks[0].train, state, desk_ckpt, tcfg)


# ---------------------------------------------------------------------------
# inference and evaluation


def test_infer_oracle_at_least_as_good_as_predicted(desk_ckpt):
    state, stream_obj, tcfg = _small_run(desk_ckpt, epochs=6, head_epochs=20)
    hits_pred = hits_oracle = total = 0
    for t, task in enumerate(stream_obj.tasks, 1):
        preds, _ = hide.infer(task.test.x, state, desk_ckpt)
        oracle, _ = hide.infer(task.test.x, state, desk_ckpt,
                               true_tasks=np.full(len(task.test.y), t))
        hits_pred += int((preds == task.test.y).sum())
        hits_oracle += int((oracle == task.test.y).sum())
        total += len(task.test.y)
    assert hits_oracle >= hits_pred


def test_infer_before_training_fails(desk_ckpt):
    tcfg = hide.TrainConfig(seed=7)
    state = hide.init_state(tcfg, desk_ckpt, "cil")
    with pytest.raises(StateError):
        hide.infer(np.zeros((1, 8, desk_ckpt.d_feat)), state, desk_ckpt)


def test_end_to_end_separable_stream_reaches_high_accuracy(desk_ckpt):
    # widely separated clusters: the full pipeline should be nearly perfect
    scfg = bench.StreamConfig(seed=11, n_classes=9, n_tasks=3, train_per_class=40,
                              test_per_class=20, center_scale=4.0)
    stream_obj = bench.make_stream(scfg)
    tcfg = hide.TrainConfig(seed=11, epochs=6, head_epochs=30)
    state = hide.init_state(tcfg, desk_ckpt, "cil")
    matrix = bench.AccuracyMatrix(3)
    for i, task in enumerate(stream_obj.tasks, 1):
        hide.train_task(i, task.train, state, desk_ckpt, tcfg)
        for j in range(1, i + 1):
            matrix.set(j, i, hide.task_accuracy(state, desk_ckpt, stream_obj.tasks[j - 1].test, j))
    assert bench.metrics(matrix)["faa"] >= 95.0


def test_eval_tii_single_task_is_perfect(desk_ckpt):
    scfg = bench.StreamConfig(seed=12, n_classes=4, n_tasks=1, train_per_class=20, test_per_class=10)
    stream_obj = bench.make_stream(scfg)
    tcfg = hide.TrainConfig(seed=12, epochs=2, head_epochs=4)
    state = hide.init_state(tcfg, desk_ckpt, "cil")
    hide.train_task(1, stream_obj.tasks[0].train, state, desk_ckpt, tcfg)
    tii_acc, faa_u = hide.eval_tii(state, desk_ckpt, [t.test for t in stream_obj.tasks], tcfg)
    assert tii_acc == 100.0
    assert 0.0 <= faa_u <= 100.0


def test_random_task_head_sits_at_chance(desk_ckpt):
    state, stream_obj, tcfg = _small_run(desk_ckpt, n_tasks=2, epochs=2, head_epochs=2)
    g = stream(13, "rand_head")
    state.task_head = {
        "w": Tensor(g.standard_normal((desk_ckpt.dim, 2)).astype(np.float32) * 1e-6),
        "b": Tensor(np.zeros(2, dtype=np.float32)),
    }
    tii_acc, _ = hide.eval_tii(state, desk_ckpt, [t.test for t in stream_obj.tasks], tcfg)
    # binomial 3-sigma band around chance level (two tasks)
    n = sum(len(t.test.y) for t in stream_obj.tasks)
    band = 300.0 * np.sqrt(0.25 / n)
    assert abs(tii_acc - 50.0) <= band


# ---------------------------------------------------------------------------
# persistence


def test_state_round_trip(tmp_path, desk_ckpt):
    state, stream_obj, _ = _small_run(desk_ckpt, epochs=2, head_epochs=3)
    path = tmp_path / "state.bin"
    hide.save_state(state, path)
    back = hide.load_state(path)
    assert back.task_count == state.task_count
    assert back.class_ids == state.class_ids
    assert back.task_classes == state.task_classes
    for a, b in zip(state.task_pets, back.task_pets):
        assert a.content_hash() == b.content_hash()
    assert set(back.uninstructed_stats) == set(state.uninstructed_stats)
    x = stream_obj.tasks[0].test.x
    p1, _ = hide.infer(x, state, desk_ckpt)
    p2, _ = hide.infer(x, back, desk_ckpt)
    assert (p1 == p2).all()
