import numpy as np
import pytest

from hidepet import backbone as bb
from hidepet import bench, numcore as nc, pet
from hidepet.errors import ConfigError, ShapeError
from hidepet.numcore import Tensor
from hidepet.rng import stream

from conftest import small_backbone


def brute_force_attention(h, lw, heads):
    """Test-local oracle: per-head attention evaluated with explicit loops."""
    d = h.shape[1]
    dh = d // heads
    q, k, v = h @ lw.wq.data, h @ lw.wk.data, h @ lw.wv.data
    out = np.zeros_like(h)
    for m in range(heads):
        sl = slice(m * dh, (m + 1) * dh)
        qm, km, vm = q[:, sl], k[:, sl], v[:, sl]
        for i in range(h.shape[0]):
            logits = np.array([qm[i] @ km[j] / np.sqrt(dh) for j in range(h.shape[0])])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * vm[j] for j in range(h.shape[0]))
    return out @ lw.wo.data


def test_single_token_identity_attention():
    # one position, value/output projections identity: attention is a no-op
    d = 6
    g = stream(1, "ident")
    lw = bb.LayerWeights(
        wq=Tensor(g.standard_normal((d, d))),
        wk=Tensor(g.standard_normal((d, d))),
        wv=Tensor(np.eye(d)),
        wo=Tensor(np.eye(d)),
    )
    h = Tensor(g.standard_normal((1, 1, d)))
    out, _ = bb.attention_block(h, lw, heads=1, pure=True)
    assert np.abs(out.data - h.data).max() <= 1e-12


def test_attention_matches_brute_force_oracle(tiny_ckpt):
    g = stream(2, "bf")
    for trial in range(5):
        h = g.standard_normal((2, tiny_ckpt.dim))
        lw = tiny_ckpt.layers[0]
        out, _ = bb.attention_block(Tensor(h[None]), lw, heads=1, pure=True)
        expected = brute_force_attention(h, lw, heads=1)
        assert np.abs(out.data[0] - expected).max() <= 1e-10
        out_mh, _ = bb.attention_block(Tensor(h[None]), lw, heads=2, pure=True)
        expected_mh = brute_force_attention(h, lw, heads=2)
        assert np.abs(out_mh.data[0] - expected_mh).max() <= 1e-10


def test_empty_prefix_is_bit_identical(tiny_ckpt):
    g = stream(3, "pre0")
    h = Tensor(g.standard_normal((2, 4, tiny_ckpt.dim)))
    plain, _ = bb.attention_block(h, tiny_ckpt.layers[0], 2)
    zero = Tensor(np.zeros((0, tiny_ckpt.dim)))
    hooked, _ = bb.attention_block(h, tiny_ckpt.layers[0], 2, {"pret": (zero, zero)})
    assert (plain.data == hooked.data).all()


def test_msa_layer_token_sequence_surface(tiny_ckpt):
    g = stream(4, "seq")
    seq = bb.TokenSequence(Tensor(g.standard_normal((4, tiny_ckpt.dim))))
    out = bb.msa_layer(seq, 0, tiny_ckpt)
    assert out.tokens.shape == seq.tokens.shape
    assert out.prefix_rows == 0
    with pytest.raises(ShapeError):
        bb.msa_layer(bb.TokenSequence(Tensor(g.standard_normal((4, 3)))), 0, tiny_ckpt)


def test_prompt_grows_length_and_is_last_layer_only(tiny_ckpt):
    g = stream(5, "prot")
    p = pet.init_pet("prot", layers=(1,), dim=tiny_ckpt.dim, rng=g, prompt_len=3, dtype="float64")
    seq = bb.TokenSequence(Tensor(g.standard_normal((4, tiny_ckpt.dim))))
    out = bb.msa_layer(seq, 1, tiny_ckpt, p)
    assert out.tokens.shape[0] == 4 + 3
    assert out.class_row == 3
    bad = pet.init_pet("prot", layers=(0,), dim=tiny_ckpt.dim, rng=g, prompt_len=3, dtype="float64")
    with pytest.raises(ConfigError):
        bb.msa_layer(seq, 0, tiny_ckpt, bad)


def test_encode_is_pure_and_shape_stable(tiny_ckpt):
    g = stream(6, "enc")
    x = g.standard_normal((3, 5, tiny_ckpt.d_feat))
    a = bb.encode(x, tiny_ckpt)
    b = bb.encode(x, tiny_ckpt)
    assert a.shape == (3, tiny_ckpt.dim)
    assert (a.data == b.data).all()
    single = bb.encode(x[0], tiny_ckpt)
    assert single.shape == (tiny_ckpt.dim,)
    assert (single.data == a.data[0]).all()


def test_encode_zero_lora_equals_plain(tiny_ckpt):
    g = stream(7, "zl")
    x = g.standard_normal((2, 5, tiny_ckpt.d_feat))
    lora = pet.init_pet("lora", layers=(0, 1), dim=tiny_ckpt.dim, rng=g,
                        bottleneck=4, dtype="float64")
    for k in list(lora.tensors):
        if k.endswith("_down"):
            lora.tensors[k] = Tensor(np.zeros_like(lora.tensors[k].data))
    plain = bb.encode(x, tiny_ckpt)
    hooked = bb.encode(x, tiny_ckpt, lora)
    assert (plain.data == hooked.data).all()


def test_encode_dim_mismatch(tiny_ckpt):
    with pytest.raises(ShapeError):
        bb.encode(np.zeros((2, 4, tiny_ckpt.d_feat + 1)), tiny_ckpt)


# ---------------------------------------------------------------------------
# pretraining


def test_pretrain_reaches_target_accuracy(desk_ckpt):
    assert desk_ckpt.meta["train_accuracy"] >= 0.90
    assert all(not t.requires_grad for t in desk_ckpt.parameters())


def test_pretrain_zero_epochs_gives_random_frozen():
    scfg = bench.StreamConfig(seed=9, pretext_classes=6, train_per_class=10)
    ckpt = bb.pretrain(bench.make_pretext(scfg), bb.PretrainConfig(seed=9, max_epochs=0))
    assert ckpt.meta["epochs_run"] == 0.0
    assert ckpt.meta["train_accuracy"] == -1.0
    assert all(not t.requires_grad for t in ckpt.parameters())


def test_pretrain_is_deterministic():
    scfg = bench.StreamConfig(seed=10, pretext_classes=5, train_per_class=12)
    pcfg = bb.PretrainConfig(seed=10, max_epochs=2)
    a = bb.pretrain(bench.make_pretext(scfg), pcfg)
    b = bb.pretrain(bench.make_pretext(scfg), pcfg)
    assert a.content_hash() == b.content_hash()


def test_pretrain_rejects_overlapping_classes():
    scfg = bench.StreamConfig(seed=11, pretext_classes=5, train_per_class=8)
    pretext = bench.make_pretext(scfg)
    pretext.y = pretext.y + 2000  # collide with the downstream id range
    with pytest.raises(ConfigError):
        bb.pretrain(pretext, bb.PretrainConfig(seed=11, max_epochs=1))


def test_instructed_beats_uninstructed_on_trained_task(desk_ckpt):
    # needs (a) converged within-task training and (b) a task the frozen
    # features do not already solve, hence the weakly-separable subspace
    from hidepet import hide

    scfg = bench.StreamConfig(seed=1, n_classes=12, n_tasks=2, train_per_class=60,
                              test_per_class=20, center_scale=0.5, subspace_dim=4)
    stream_obj = bench.make_stream(scfg)
    tcfg = hide.TrainConfig(seed=1, technique="lora", epochs=40, head_epochs=10,
                            components="wtp", batch_size=64)
    state = hide.init_state(tcfg, desk_ckpt, "cil")
    hide.train_task(1, stream_obj.tasks[0].train, state, desk_ckpt, tcfg)
    task = stream_obj.tasks[0]
    col_of = state.col_of
    cols = state.task_columns(1)
    instructed = hide.wtp_loss(task.train.x.astype(np.float32), task.train.y, desk_ckpt,
                               state.task_pets[0], state.class_head,
                               int(cols.min()), int(cols.max()) + 1, col_of)
    uninstructed = hide.wtp_loss(task.train.x.astype(np.float32), task.train.y, desk_ckpt,
                                 None, state.class_head,
                                 int(cols.min()), int(cols.max()) + 1, col_of)
    assert instructed.item() < uninstructed.item()


# ---------------------------------------------------------------------------
# checkpoint files


def test_checkpoint_round_trip(tmp_path, desk_ckpt):
    path = tmp_path / "c.bin"
    bb.save_checkpoint(desk_ckpt, path)
    back = bb.load_checkpoint(path)
    assert back.heads == desk_ckpt.heads
    assert back.meta == desk_ckpt.meta
    for k, v in desk_ckpt.tensors().items():
        assert np.array_equal(back.tensors()[k].data, v.data), k
    assert back.content_hash() == desk_ckpt.content_hash()


def test_frozen_backbone_unchanged_by_training(desk_ckpt):
    from hidepet import hide

    before = desk_ckpt.content_hash()
    scfg = bench.StreamConfig(seed=2, n_classes=8, n_tasks=2, train_per_class=20, test_per_class=10)
    stream_obj = bench.make_stream(scfg)
    tcfg = hide.TrainConfig(seed=2, epochs=2, head_epochs=4)
    state = hide.init_state(tcfg, desk_ckpt, "cil")
    for i, task in enumerate(stream_obj.tasks, 1):
        hide.train_task(i, task.train, state, desk_ckpt, tcfg)
    assert desk_ckpt.content_hash() == before
