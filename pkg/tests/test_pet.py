import numpy as np
import pytest

from hidepet import backbone as bb
from hidepet import numcore as nc, pet
from hidepet.errors import ConfigError
from hidepet.numcore import Tensor
from hidepet.rng import stream

from conftest import small_backbone


def _rand_pet(technique, dim, seed, layers=(0, 1), **kw):
    p = pet.init_pet(technique, layers=layers, dim=dim, rng=stream(seed, technique),
                     dtype="float64", **kw)
    # randomize the zero-initialized up-projections for algebra tests
    for k, t in p.tensors.items():
        if k.endswith("up") or k.endswith("_up"):
            t.data = stream(seed, technique, k).standard_normal(t.data.shape) * 0.3
    return p


# ---------------------------------------------------------------------------
# whole-prompt attention


def test_prot_zero_length_is_plain_attention(tiny_ckpt):
    g = stream(1, "p0")
    h = Tensor(g.standard_normal((4, tiny_ckpt.dim)))
    lw = tiny_ckpt.layers[1]
    plain = pet.prot_apply(Tensor(np.zeros((0, tiny_ckpt.dim))), h, lw, tiny_ckpt.heads)
    ref, _ = bb.attention_block(nc.reshape(h, (1, 4, tiny_ckpt.dim)), lw, tiny_ckpt.heads, pure=True)
    assert (plain.data == ref.data[0]).all()


def test_prot_output_length_grows_by_prompt():
    ckpt = small_backbone(dim=8, heads=2)
    g = stream(2, "plen")
    h = Tensor(g.standard_normal((5, 8)))
    p = Tensor(g.standard_normal((3, 8)))
    out = pet.prot_apply(p, h, ckpt.layers[0], 2)
    assert out.shape == (5 + 3, 8)


def test_prot_matches_concatenated_attention_oracle(tiny_ckpt):
    # one token, one prefix row, single head: direct evaluation of the
    # concatenated attention
    d = tiny_ckpt.dim
    g = stream(3, "poracle")
    h = g.standard_normal((1, d))
    p = g.standard_normal((1, d))
    lw = tiny_ckpt.layers[0]
    full = np.concatenate([p, h])
    q = full @ lw.wq.data
    k = full @ lw.wk.data
    v = full @ lw.wv.data
    expected = np.zeros((2, d))
    for i in range(2):
        logits = q[i] @ k.T / np.sqrt(d)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        expected[i] = w @ v
    expected = expected @ lw.wo.data
    out = pet.prot_apply(Tensor(p), Tensor(h), lw, 1)
    assert np.abs(out.data - expected).max() <= 1e-10


def test_prot_rejects_non_final_layer(tiny_ckpt):
    g = stream(4, "pl")
    with pytest.raises(ConfigError):
        pet.prot_apply(Tensor(g.standard_normal((2, tiny_ckpt.dim))),
                       Tensor(g.standard_normal((3, tiny_ckpt.dim))),
                       tiny_ckpt.layers[0], tiny_ckpt.heads,
                       layer_index=0, n_layers=2)


# ---------------------------------------------------------------------------
# prefix attention and its rewrite


def test_pret_zero_prefix_is_plain(tiny_ckpt):
    g = stream(5, "pret0")
    h = Tensor(g.standard_normal((4, tiny_ckpt.dim)))
    zero = Tensor(np.zeros((0, tiny_ckpt.dim)))
    out = pet.pret_apply(zero, zero, h, tiny_ckpt.layers[0], tiny_ckpt.heads)
    ref, _ = bb.attention_block(nc.reshape(h, (1, 4, tiny_ckpt.dim)),
                                tiny_ckpt.layers[0], tiny_ckpt.heads, pure=True)
    assert (out.data == ref.data[0]).all()


def test_pret_preserves_shape_at_default_length():
    ckpt = small_backbone(dim=32, heads=4, d_feat=8)
    p = pet.init_pet("pret", layers=(0,), dim=32, rng=stream(6, "d20"),
                     prompt_len=20, dtype="float64")
    g = stream(6, "h")
    h = Tensor(g.standard_normal((7, 32)))
    out = pet.pret_apply(p.tensors["layer0.p_k"], p.tensors["layer0.p_v"],
                         h, ckpt.layers[0], 4)
    assert out.shape == h.shape


def test_pret_apply_equals_reframed_form(tiny_ckpt):
    # the convex-blend rewrite agrees with the concatenated form per head
    d = tiny_ckpt.dim
    worst = 0.0
    for trial in range(10):
        g = stream(200 + trial, "reframe")
        h = Tensor(g.standard_normal((5, d)))
        pk = Tensor(g.standard_normal((3, d)))
        pv = Tensor(g.standard_normal((3, d)))
        lw = tiny_ckpt.layers[trial % 2]
        a = pet.pret_apply(pk, pv, h, lw, heads=1)
        b, lam = pet.pret_reframe(pk, pv, h, lw)
        worst = max(worst, float(np.abs(a.data - b.data).max()))
        assert lam.min() >= 0.0 and lam.max() <= 1.0
    assert worst <= 1e-8


def test_reframe_empty_prefix_gives_zero_mass(tiny_ckpt):
    g = stream(7, "lam0")
    h = Tensor(g.standard_normal((4, tiny_ckpt.dim)))
    zero = Tensor(np.zeros((0, tiny_ckpt.dim)))
    out, lam = pet.pret_reframe(zero, zero, h, tiny_ckpt.layers[0])
    assert (lam == 0.0).all()
    ref = pet.pret_apply(zero, zero, h, tiny_ckpt.layers[0], 1)
    assert np.abs(out.data - ref.data).max() <= 1e-12


def test_prefix_mass_monotone_in_key_scale():
    # positive-logit construction: scaling the prefix keys up drives the
    # prefix attention mass toward one at every position
    d = 4
    lw = bb.LayerWeights(wq=Tensor(np.eye(d)), wk=Tensor(np.eye(d)),
                         wv=Tensor(np.eye(d)), wo=Tensor(np.eye(d)))
    h = Tensor(np.abs(stream(8, "mono").standard_normal((3, d))) + 0.5)
    base_pk = np.abs(stream(8, "monok").standard_normal((2, d))) + 0.5
    pv = Tensor(stream(8, "monov").standard_normal((2, d)))
    last = None
    for scale in (0.25, 0.5, 1.0, 2.0, 4.0, 8.0):
        _, lam = pet.pret_reframe(Tensor(base_pk * scale), pv, h, lw)
        if last is not None:
            assert (lam >= last - 1e-12).all()
        last = lam
    assert last.min() > 0.9


# ---------------------------------------------------------------------------
# adapters


def test_adapter_zero_up_projection_is_identity(tiny_ckpt):
    g = stream(9, "a0")
    h = Tensor(g.standard_normal((4, tiny_ckpt.dim)))
    h_prime = Tensor(g.standard_normal((4, tiny_ckpt.dim)))
    down = Tensor(g.standard_normal((tiny_ckpt.dim, 3)))
    up = Tensor(np.zeros((3, tiny_ckpt.dim)))
    out = pet.adapter_apply("seq", h, h_prime, down, up)
    assert (out.data == h_prime.data).all()


def test_adapter_seq_matches_formula_oracle(tiny_ckpt):
    g = stream(10, "aseq")
    d = tiny_ckpt.dim
    h = g.standard_normal((4, d))
    hp = g.standard_normal((4, d))
    down = g.standard_normal((d, 3))
    up = g.standard_normal((3, d)) * 0.3
    out = pet.adapter_apply("seq", Tensor(h), Tensor(hp), Tensor(down), Tensor(up))
    z = hp @ down
    gelu = 0.5 * z * (1.0 + np.tanh(0.7978845608028654 * (z + 0.044715 * z**3)))
    expected = hp + gelu @ up
    assert np.abs(out.data - expected).max() <= 1e-10
    out_par = pet.adapter_apply("par", Tensor(h), Tensor(hp), Tensor(down), Tensor(up))
    z = h @ down
    gelu = 0.5 * z * (1.0 + np.tanh(0.7978845608028654 * (z + 0.044715 * z**3)))
    assert np.abs(out_par.data - (hp + gelu @ up)).max() <= 1e-10


def test_adapter_bottleneck_and_mode_validation(tiny_ckpt):
    g = stream(11, "ab")
    h = Tensor(g.standard_normal((2, tiny_ckpt.dim)))
    with pytest.raises(ConfigError):
        pet.adapter_apply("seq", h, h, Tensor(np.zeros((tiny_ckpt.dim, 0))), Tensor(np.zeros((0, tiny_ckpt.dim))))
    with pytest.raises(ConfigError):
        pet.adapter_apply("diagonal", h, h, Tensor(np.zeros((tiny_ckpt.dim, 2))), Tensor(np.zeros((2, tiny_ckpt.dim))))


# ---------------------------------------------------------------------------
# low-rank updates


def test_lora_zero_down_is_identity(tiny_ckpt):
    g = stream(12, "l0")
    d = tiny_ckpt.dim
    h = Tensor(g.standard_normal((3, d)))
    hp = Tensor(g.standard_normal((3, d)))
    out = pet.lora_apply(h, hp, Tensor(np.zeros((d, 2))), Tensor(g.standard_normal((2, d))), 1.0)
    assert (out.data == hp.data).all()


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-6)])
def test_lora_merged_equals_side_branch(dtype, tol):
    ckpt = small_backbone(dtype=np.dtype(dtype).name)
    d = ckpt.dim
    g = stream(13, "lm")
    x = g.standard_normal((3, 5, ckpt.d_feat)).astype(dtype)
    lora = pet.init_pet("lora", layers=(0, 1), dim=d, rng=stream(13, "init"),
                        bottleneck=4, lora_scale=1.5, dtype=np.dtype(dtype).name)
    for k, t in lora.tensors.items():
        if k.endswith("_up"):
            t.data = (stream(13, k).standard_normal(t.data.shape) * 0.3).astype(dtype)
    side = bb.encode(x, ckpt, lora)
    merged_layers = []
    for i, lw in enumerate(ckpt.layers):
        mats = {"wq": lw.wq, "wk": lw.wk, "wv": lw.wv, "wo": lw.wo}
        for tgt in ("wk", "wv"):
            mats[tgt] = pet.lora_merge(mats[tgt], lora.tensors[f"layer{i}.{tgt}_down"],
                                       lora.tensors[f"layer{i}.{tgt}_up"], 1.5)
        merged_layers.append(bb.LayerWeights(**mats))
    merged = bb.BackboneCheckpoint(merged_layers, ckpt.input_embed, ckpt.heads)
    plain = bb.encode(x, merged)
    assert np.abs(side.data - plain.data).max() <= tol


def test_lora_rank_one_hand_computed():
    w = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    down = Tensor(np.array([[1.0], [2.0]]))
    up = Tensor(np.array([[3.0, 4.0]]))
    merged = pet.lora_merge(w, down, up, 1.0)
    assert np.array_equal(merged.data, [[1.0 + 3.0, 4.0], [6.0, 1.0 + 8.0]])


def test_lora_scale_below_one_rejected(tiny_ckpt):
    d = tiny_ckpt.dim
    g = stream(14, "ls")
    h = Tensor(g.standard_normal((2, d)))
    with pytest.raises(ConfigError):
        pet.lora_apply(h, h, Tensor(np.zeros((d, 2))), Tensor(np.zeros((2, d))), 0.5)
    with pytest.raises(ConfigError):
        pet.lora_merge(Tensor(np.eye(d)), Tensor(np.zeros((d, 2))), Tensor(np.zeros((2, d))), 0.5)


# ---------------------------------------------------------------------------
# construction, budget, blending


def test_zero_init_is_neutral_for_every_technique():
    ckpt = small_backbone()
    g = stream(15, "zn")
    x = g.standard_normal((2, 5, ckpt.d_feat))
    plain = bb.encode(x, ckpt)
    for tech in ("pret", "adapter", "adapter_seq", "adapter_par", "lora"):
        p = pet.init_pet(tech, layers=(0, 1), dim=ckpt.dim, rng=stream(15, tech),
                         prompt_len=0 if tech == "pret" else 4, bottleneck=4, dtype="float64")
        out = bb.encode(x, ckpt, p)
        assert (out.data == plain.data).all(), tech
    prot = pet.init_pet("prot", layers=(1,), dim=ckpt.dim, rng=stream(15, "prot"),
                        prompt_len=0, dtype="float64")
    assert (bb.encode(x, ckpt, prot).data == plain.data).all()


def test_param_budget_exact_counts():
    d = 32
    pret = pet.init_pet("pret", layers=(0, 1, 2, 3, 4), dim=d, rng=stream(16, "b1"),
                        prompt_len=20)
    assert pet.param_budget(pret) == 20 * d * 5


def test_budget_equal_across_techniques_at_defaults():
    d = 32
    layers = (0, 1, 2, 3, 4)
    budgets = {}
    for tech in ("pret", "adapter", "lora"):
        p = pet.init_pet(tech, layers=layers, dim=d, rng=stream(17, tech),
                         prompt_len=20, bottleneck=10)
        budgets[tech] = pet.param_budget(p)
    assert budgets["pret"] == budgets["adapter"] == budgets["lora"] == 20 * d * 5
    prot = pet.init_pet("prot", layers=(4,), dim=d, rng=stream(17, "prot"), prompt_len=20)
    assert pet.param_budget(prot) == 20 * d


def test_ensemble_init_blend():
    d = 8
    mk = lambda seed: _rand_pet("pret", d, seed, layers=(0,), prompt_len=4)
    e1, e2, fresh = mk(20), mk(21), mk(22)
    out = pet.ensemble_init([e1, e2], alpha=0.25, fresh=fresh)
    for key in e1.tensors:
        expected = 0.25 * (e1.tensors[key].data + e2.tensors[key].data) + 0.75 * e2.tensors[key].data
        assert np.abs(out.tensors[key].data - expected).max() <= 1e-12


def test_ensemble_init_alpha_zero_copies_latest():
    d = 8
    e1, e2 = _rand_pet("pret", d, 23, prompt_len=4), _rand_pet("pret", d, 24, prompt_len=4)
    out = pet.ensemble_init([e1, e2], alpha=0.0, fresh=_rand_pet("pret", d, 25, prompt_len=4))
    for key in e2.tensors:
        assert np.array_equal(out.tensors[key].data, e2.tensors[key].data)


def test_ensemble_init_first_task_is_fresh():
    fresh = _rand_pet("pret", 8, 26, prompt_len=4)
    assert pet.ensemble_init([], alpha=0.1, fresh=fresh) is fresh


def test_ensemble_init_validation():
    a = _rand_pet("pret", 8, 27, prompt_len=4)
    b = _rand_pet("lora", 8, 28, bottleneck=4)
    with pytest.raises(ConfigError):
        pet.ensemble_init([a, b], alpha=0.1, fresh=a)
    with pytest.raises(ConfigError):
        pet.ensemble_init([a], alpha=1.5, fresh=a)


def test_pet_params_invariants():
    with pytest.raises(ConfigError):
        pet.init_pet("pret", layers=(0,), dim=8, rng=stream(29, "odd"), prompt_len=5)
    with pytest.raises(ConfigError):
        pet.PetParams("lora", (0,), {}, lora_scale=0.9)
    with pytest.raises(ConfigError):
        pet.PetParams("unknown", (0,), {})
