"""Frozen transformer backbone: stacked multi-head self-attention layers with
tuning hook points, a desk-scale pretraining routine that manufactures the
checkpoint, and bit-exact checkpoint files.

The default block is pre-layer-norm with a residual connection around the
attention output (the standard ViT block, minus the MLP sub-block which the
tuning hooks never touch). `pure=True` switches to the bare attention
equation — no norm, no residual — which is what the brute-force oracles in
the tests evaluate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io, numcore as nc
from .errors import ConfigError, FormatError, ShapeError
from .numcore import Tensor
from .rng import stream

CHECKPOINT_VERSION = 1


@dataclass
class LayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def named(self, prefix):
        return {
            f"{prefix}.wq": self.wq,
            f"{prefix}.wk": self.wk,
            f"{prefix}.wv": self.wv,
            f"{prefix}.wo": self.wo,
        }


@dataclass
class BackboneCheckpoint:
    """Frozen weights plus architecture descriptor and provenance meta."""

    layers: list
    input_embed: Tensor
    heads: int
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.input_embed.shape[1]

    @property
    def d_feat(self) -> int:
        return self.input_embed.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    def tensors(self) -> dict:
        out = {"input_embed": self.input_embed}
        for i, lw in enumerate(self.layers):
            out.update(lw.named(f"layer{i}"))
        return out

    def parameters(self) -> list:
        return list(self.tensors().values())

    def set_trainable(self, flag: bool):
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None

    def astype(self, dtype) -> "BackboneCheckpoint":
        conv = lambda t: Tensor(t.data.astype(dtype))
        layers = [
            LayerWeights(conv(l.wq), conv(l.wk), conv(l.wv), conv(l.wo))
            for l in self.layers
        ]
        return BackboneCheckpoint(layers, conv(self.input_embed), self.heads, dict(self.meta))

    def content_hash(self) -> str:
        named = {k: v.data for k, v in self.tensors().items()}
        named.update({f"meta.{k}": np.asarray([v], dtype=np.float32) for k, v in self.meta.items()})
        named["meta.heads"] = np.asarray([self.heads], dtype=np.float32)
        return io.content_hash(named)


@dataclass
class TokenSequence:
    """A token matrix (length x dim); slot 0 of the content rows is the class
    token. `prefix_rows` counts prompt rows prepended by a last-layer hook."""

    tokens: Tensor
    prefix_rows: int = 0

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError("token sequence must be a non-empty 2-D matrix")

    @property
    def class_row(self):
        return self.prefix_rows


def _expand_batch(t: Tensor, n: int) -> Tensor:
    """Broadcast a (r, d) parameter to (n, r, d); gradient sums over batch."""

    def bw(g):
        return (g.sum(axis=0),)

    data = np.broadcast_to(t.data, (n,) + t.data.shape)
    return nc._out(data, (t,), bw)


def _split_heads(t: Tensor, m: int) -> Tensor:
    b, n, d = t.shape
    return nc.swap_axes(nc.reshape(t, (b, n, m, d // m)), 1, 2)


def _project(x: Tensor, w: Tensor, lora=None) -> Tensor:
    out = nc.matmul(x, w)
    if lora is not None:
        down, up, s = lora
        out = nc.add(out, nc.scale(nc.matmul(nc.matmul(x, down), up), s))
    return out


def attention_block(h: Tensor, layer: LayerWeights, heads: int, hooks=None, pure=False):
    """One multi-head self-attention layer with optional tuning hooks.

    `h` is (batch, length, dim). Returns (output, prefix_rows): output length
    grows by the prompt length when a whole-prompt hook is attached, and is
    unchanged otherwise.

    Hook keys: "prot" (prompt prepended to q, k and v), "pret" ((p_k, p_v)
    prepended to k and v), "lora" ({"wk"/"wv": (down, up, s)} side branches on
    the projections), "adapter_seq"/"adapter_par" ((down, up) bottlenecks on
    the attention output / input).
    """
    hooks = hooks or {}
    batch = h.shape[0]
    d = h.shape[-1]
    a = h if pure else nc.layer_norm(h)

    prefix_rows = 0
    q_in = k_in = v_in = a
    if "prot" in hooks:
        p = _expand_batch(hooks["prot"], batch)
        prefix_rows = p.shape[1]
        if prefix_rows:
            q_in = nc.concat([p, a], axis=1)
            k_in = v_in = q_in
    elif "pret" in hooks:
        p_k, p_v = hooks["pret"]
        if p_k.shape[0]:
            k_in = nc.concat([_expand_batch(p_k, batch), a], axis=1)
            v_in = nc.concat([_expand_batch(p_v, batch), a], axis=1)

    lora = hooks.get("lora", {})
    q = _project(q_in, layer.wq)
    k = _project(k_in, layer.wk, lora.get("wk"))
    v = _project(v_in, layer.wv, lora.get("wv"))

    dh = d // heads
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scores = nc.scale(nc.matmul(qh, nc.swap_axes(kh, -1, -2)), 1.0 / np.sqrt(dh))
    ctx = nc.matmul(nc.softmax_last(scores), vh)
    merged = nc.reshape(nc.swap_axes(ctx, 1, 2), (batch, q.shape[1], d))
    out = nc.matmul(merged, layer.wo)

    if "adapter_seq" in hooks:
        down, up = hooks["adapter_seq"]
        out = nc.add(out, nc.matmul(nc.gelu(nc.matmul(out, down)), up))
    if "adapter_par" in hooks:
        down, up = hooks["adapter_par"]
        out = nc.add(out, nc.matmul(nc.gelu(nc.matmul(q_in, down)), up))

    if not pure:
        if prefix_rows:
            head_part = nc.narrow(out, 1, 0, prefix_rows)
            content = nc.add(nc.narrow(out, 1, prefix_rows, h.shape[1]), h)
            out = nc.concat([head_part, content], axis=1)
        else:
            out = nc.add(out, h)
    return out, prefix_rows


def _resolve_hooks(pet, layer_index: int, n_layers: int):
    if pet is None:
        return None
    hooks = pet.layer_hooks(layer_index, n_layers)
    if hooks and "prot" in hooks and layer_index != n_layers - 1:
        raise ConfigError("whole-prompt hook is only permitted at the last layer")
    return hooks


def msa_layer(seq: TokenSequence, layer_index: int, ckpt: BackboneCheckpoint, pet=None, pure=False) -> TokenSequence:
    """Apply one backbone layer to a single token sequence."""
    if seq.tokens.shape[-1] != ckpt.dim:
        raise ShapeError(f"token dim {seq.tokens.shape[-1]} != backbone dim {ckpt.dim}")
    hooks = _resolve_hooks(pet, layer_index, ckpt.n_layers)
    h = nc.reshape(seq.tokens, (1,) + tuple(seq.tokens.shape))
    out, prefix = attention_block(h, ckpt.layers[layer_index], ckpt.heads, hooks, pure)
    return TokenSequence(nc.reshape(out, tuple(out.shape[1:])), prefix)


def encode(x, ckpt: BackboneCheckpoint, pet=None, pure=False) -> Tensor:
    """Project raw token features through the backbone; return the class-token
    row of the final layer. A pure function of (x, weights, pet).

    `x` is (batch, length, d_feat) or a single (length, d_feat) sequence.
    """
    single = False
    if isinstance(x, Tensor):
        xt = x
    else:
        xt = Tensor(np.asarray(x, dtype=ckpt.input_embed.dtype))
    if xt.ndim == 2:
        single = True
        xt = nc.reshape(xt, (1,) + tuple(xt.shape))
    if xt.shape[-1] != ckpt.d_feat:
        raise ShapeError(f"input feature dim {xt.shape[-1]} != embed rows {ckpt.d_feat}")

    tokens = nc.matmul(xt, ckpt.input_embed)
    prefix = 0
    for i, layer in enumerate(ckpt.layers):
        hooks = _resolve_hooks(pet, i, ckpt.n_layers)
        tokens, prefix = attention_block(tokens, layer, ckpt.heads, hooks, pure)
    cls = nc.narrow(tokens, 1, prefix, 1)
    cls = nc.reshape(cls, (cls.shape[0], cls.shape[-1]))
    if single:
        cls = nc.reshape(cls, (cls.shape[-1],))
    return cls


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class LabeledSet:
    """Raw token-feature samples with integer class labels."""

    x: np.ndarray  # (n, length, d_feat)
    y: np.ndarray  # (n,) global class ids

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)

    @property
    def class_ids(self):
        return np.unique(self.y)

    def __len__(self):
        return len(self.y)


@dataclass
class PretrainConfig:
    seed: int = 0
    n_layers: int = 4
    dim: int = 32
    heads: int = 4
    d_feat: int = 32
    max_epochs: int = 40
    target_acc: float = 0.90
    lr: float = 1e-3
    batch_size: int = 64
    init_std: float = 0.02
    dtype: str = "float32"
    downstream_class_base: int = 1000


def init_backbone(cfg: PretrainConfig, trainable=False) -> BackboneCheckpoint:
    """Random backbone weights drawn from the run's named streams."""
    dt = np.dtype(cfg.dtype)
    layers = []
    for i in range(cfg.n_layers):
        mats = {}
        for name in ("wq", "wk", "wv", "wo"):
            g = stream(cfg.seed, "pretrain", "init", f"layer{i}", name)
            mats[name] = Tensor(
                (g.standard_normal((cfg.dim, cfg.dim)) * cfg.init_std).astype(dt),
                requires_grad=trainable,
            )
        layers.append(LayerWeights(**mats))
    g = stream(cfg.seed, "pretrain", "init", "input_embed")
    embed = Tensor(
        (g.standard_normal((cfg.d_feat, cfg.dim)) / np.sqrt(cfg.d_feat)).astype(dt),
        requires_grad=trainable,
    )
    return BackboneCheckpoint(layers, embed, cfg.heads)


def pretrain(pretext: LabeledSet, cfg: PretrainConfig) -> BackboneCheckpoint:
    """Manufacture a frozen checkpoint by supervised training on held-out
    pretext classes (disjoint from every downstream class id).

    Trains backbone plus a throwaway head by cross-entropy until the pretext
    train accuracy reaches `target_acc` or the epoch budget runs out, then
    freezes everything. `max_epochs=0` yields a random frozen checkpoint.
    """
    if int(pretext.y.max(initial=-1)) >= cfg.downstream_class_base:
        raise ConfigError(
            "pretext class ids overlap the downstream range "
            f"(max id {int(pretext.y.max())} >= base {cfg.downstream_class_base})"
        )
    ckpt = init_backbone(cfg, trainable=True)
    dt = np.dtype(cfg.dtype)
    classes = list(int(c) for c in pretext.class_ids)
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.asarray([remap[int(c)] for c in pretext.y], dtype=np.int64)

    g_head = stream(cfg.seed, "pretrain", "init", "head")
    head_w = Tensor((g_head.standard_normal((cfg.dim, len(classes))) * cfg.init_std).astype(dt), requires_grad=True)
    head_b = Tensor(np.zeros(len(classes), dtype=dt), requires_grad=True)

    opt = nc.Adam(ckpt.parameters() + [head_w, head_b], lr=cfg.lr)
    n = len(pretext)
    acc = float("nan")
    epochs_run = 0
    for epoch in range(cfg.max_epochs):
        order = stream(cfg.seed, "pretrain", "epoch", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            feats = encode(pretext.x[sel].astype(dt), ckpt)
            loss = nc.cross_entropy(nc.affine(feats, head_w, head_b), labels[sel])
            opt.zero_grad()
            nc.backward(loss)
            opt.step()
        epochs_run = epoch + 1
        acc = _probe_accuracy(pretext.x.astype(dt), labels, ckpt, head_w, head_b)
        if acc >= cfg.target_acc:
            break

    ckpt.set_trainable(False)
    # meta rides in the float32 wire format; canonicalize now so save/load
    # round-trips compare equal
    ckpt.meta = {
        "seed": float(cfg.seed),
        "version": float(CHECKPOINT_VERSION),
        "pretrain_task_count": 1.0,
        "pretrain_classes": float(len(classes)),
        "epochs_run": float(epochs_run),
        "train_accuracy": -1.0 if np.isnan(acc) else float(np.float32(acc)),
    }
    return ckpt


def _probe_accuracy(x, labels, ckpt, head_w, head_b, batch=512):
    hits = 0
    for start in range(0, len(labels), batch):
        feats = encode(x[start : start + batch], ckpt)
        logits = feats.data @ head_w.data + head_b.data
        hits += int((logits.argmax(axis=1) == labels[start : start + batch]).sum())
    return hits / len(labels)


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(ckpt: BackboneCheckpoint, path) -> None:
    named = {k: v.data for k, v in ckpt.tensors().items()}
    named["meta.heads"] = np.asarray([ckpt.heads], dtype=np.float32)
    for k, v in ckpt.meta.items():
        named[f"meta.{k}"] = np.asarray([v], dtype=np.float32)
    io.write_tensors(path, named)


def load_checkpoint(path) -> BackboneCheckpoint:
    named = io.read_tensors(path)
    try:
        heads = int(named.pop("meta.heads")[0])
        embed = named.pop("input_embed")
    except KeyError as e:
        raise FormatError(f"checkpoint is missing required tensor {e}") from e
    meta = {}
    for k in list(named):
        if k.startswith("meta."):
            meta[k[5:]] = float(named.pop(k)[0])
    layers = []
    i = 0
    while f"layer{i}.wq" in named:
        layers.append(
            LayerWeights(
                *(Tensor(named.pop(f"layer{i}.{w}")) for w in ("wq", "wk", "wv", "wo"))
            )
        )
        i += 1
    if named:
        raise FormatError(f"unexpected tensors in checkpoint: {sorted(named)[:4]}")
    if not layers:
        raise FormatError("checkpoint has no attention layers")
    return BackboneCheckpoint(layers, Tensor(embed), heads, meta)
