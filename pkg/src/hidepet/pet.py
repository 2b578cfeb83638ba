"""Parameter-efficient tuning techniques as attachment plans over backbone
states: whole-prompt and key/value-prefix prompts, bottleneck adapters
(sequential and parallel), and low-rank projection updates with exact merge.

A `PetParams` is a variant record: one technique, a set of target layers, and
the per-layer trainable tensors. The backbone only sees the per-layer hook
dict produced by `layer_hooks`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .backbone import attention_block
from .errors import ConfigError, ShapeError
from .numcore import Tensor

TECHNIQUES = ("prot", "pret", "adapter_seq", "adapter_par", "adapter", "lora")
PROMPT_INIT_STD = 0.02


@dataclass
class PetParams:
    """One tuning technique's trainable tensors plus its attachment plan.

    Tensor keys are "layer{l}.<piece>"; pieces depend on the technique:
    prot: p; pret: p_k, p_v; adapter_seq/adapter_par: down, up;
    adapter (both modes): seq_down, seq_up, par_down, par_up;
    lora: {target}_down, {target}_up for each target projection.
    """

    technique: str
    layers: tuple
    tensors: dict
    prompt_len: int = 0
    bottleneck: int = 0
    lora_scale: float = 1.0
    lora_targets: tuple = ("wk", "wv")

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise ConfigError(f"unknown technique {self.technique!r}")
        if self.technique in ("prot", "pret") and self.prompt_len % 2 and self.technique == "pret":
            raise ConfigError(f"prefix prompt length must be even, got {self.prompt_len}")
        if self.technique == "lora" and self.lora_scale < 1.0:
            raise ConfigError(f"low-rank scale must be >= 1, got {self.lora_scale}")
        self.layers = tuple(sorted(self.layers))

    def layer_hooks(self, layer_index: int, n_layers: int):
        if layer_index not in self.layers:
            return None
        pre = f"layer{layer_index}"
        t = self.tensors
        if self.technique == "prot":
            return {"prot": t[f"{pre}.p"]}
        if self.technique == "pret":
            return {"pret": (t[f"{pre}.p_k"], t[f"{pre}.p_v"])}
        if self.technique == "adapter_seq":
            return {"adapter_seq": (t[f"{pre}.down"], t[f"{pre}.up"])}
        if self.technique == "adapter_par":
            return {"adapter_par": (t[f"{pre}.down"], t[f"{pre}.up"])}
        if self.technique == "adapter":
            return {
                "adapter_seq": (t[f"{pre}.seq_down"], t[f"{pre}.seq_up"]),
                "adapter_par": (t[f"{pre}.par_down"], t[f"{pre}.par_up"]),
            }
        return {
            "lora": {
                tgt: (t[f"{pre}.{tgt}_down"], t[f"{pre}.{tgt}_up"], self.lora_scale)
                for tgt in self.lora_targets
            }
        }

    def parameters(self) -> list:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def set_trainable(self, flag: bool):
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None

    def freeze(self):
        self.set_trainable(False)

    def copy(self) -> "PetParams":
        return PetParams(
            self.technique,
            self.layers,
            {k: v.copy() for k, v in self.tensors.items()},
            self.prompt_len,
            self.bottleneck,
            self.lora_scale,
            self.lora_targets,
        )

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": v.data for k, v in self.tensors.items()}

    def content_hash(self) -> str:
        from . import io

        return io.content_hash({k: v.data for k, v in self.tensors.items()})


def init_pet(
    technique: str,
    *,
    layers,
    dim: int,
    rng,
    prompt_len: int = 20,
    bottleneck: int = 10,
    lora_scale: float = 1.0,
    lora_targets=("wk", "wv"),
    dtype="float32",
    init_std: float = PROMPT_INIT_STD,
) -> PetParams:
    """Fresh tuning parameters: prompts and down-projections are Gaussian
    (std 0.02), up-projections start at zero so attachment is neutral.

    For the two-piece techniques (adapter with both modes, low-rank on two
    targets) the bottleneck budget is split evenly across pieces, which makes
    the per-layer trainable count identical across techniques at the defaults
    (prompt_len=20, bottleneck=10): prompt_len * dim per layer each.
    """
    dt = np.dtype(dtype)
    layers = tuple(sorted(layers))
    tensors = {}
    gauss = lambda g, shape: Tensor((g.standard_normal(shape) * init_std).astype(dt))
    zeros = lambda shape: Tensor(np.zeros(shape, dtype=dt))
    if technique == "pret" and prompt_len % 2:
        raise ConfigError(f"prefix prompt length must be even, got {prompt_len}")
    if technique in ("adapter_seq", "adapter_par", "adapter", "lora") and bottleneck < 1:
        raise ConfigError("bottleneck must be >= 1")
    for l in layers:
        g = rng if hasattr(rng, "standard_normal") else None
        if g is None:
            raise ConfigError("init_pet needs a Generator")
        pre = f"layer{l}"
        if technique == "prot":
            tensors[f"{pre}.p"] = gauss(rng, (prompt_len, dim))
        elif technique == "pret":
            half = prompt_len // 2
            tensors[f"{pre}.p_k"] = gauss(rng, (half, dim))
            tensors[f"{pre}.p_v"] = gauss(rng, (half, dim))
        elif technique in ("adapter_seq", "adapter_par"):
            tensors[f"{pre}.down"] = gauss(rng, (dim, bottleneck))
            tensors[f"{pre}.up"] = zeros((bottleneck, dim))
        elif technique == "adapter":
            r_seq = bottleneck // 2
            r_par = bottleneck - r_seq
            tensors[f"{pre}.seq_down"] = gauss(rng, (dim, r_seq))
            tensors[f"{pre}.seq_up"] = zeros((r_seq, dim))
            tensors[f"{pre}.par_down"] = gauss(rng, (dim, r_par))
            tensors[f"{pre}.par_up"] = zeros((r_par, dim))
        elif technique == "lora":
            r_t = max(1, bottleneck // len(lora_targets))
            for tgt in lora_targets:
                tensors[f"{pre}.{tgt}_down"] = gauss(rng, (dim, r_t))
                tensors[f"{pre}.{tgt}_up"] = zeros((r_t, dim))
        else:
            raise ConfigError(f"unknown technique {technique!r}")
    return PetParams(technique, layers, tensors, prompt_len, bottleneck, lora_scale, tuple(lora_targets))


def param_budget(pet: PetParams) -> int:
    """Exact count of trainable scalars in the attachment plan."""
    return int(sum(t.data.size for t in pet.tensors.values()))


# ---------------------------------------------------------------------------
# functional forms of the four techniques


def prot_apply(p: Tensor, h: Tensor, layer, heads: int, layer_index=None, n_layers=None) -> Tensor:
    """Whole-prompt attention: the same prompt rows are prepended to query,
    key and value inputs, so the output gains prompt_len rows."""
    if layer_index is not None and n_layers is not None and layer_index != n_layers - 1:
        raise ConfigError("whole-prompt hook is only permitted at the last layer")
    h3 = nc.reshape(h, (1,) + tuple(h.shape))
    out, _ = attention_block(h3, layer, heads, {"prot": p}, pure=True)
    return nc.reshape(out, tuple(out.shape[1:]))


def pret_apply(p_k: Tensor, p_v: Tensor, h: Tensor, layer, heads: int) -> Tensor:
    """Prefix attention: p_k extends keys, p_v extends values; output shape
    equals input shape."""
    if p_k.shape != p_v.shape:
        raise ShapeError(f"prefix halves differ: {p_k.shape} vs {p_v.shape}")
    h3 = nc.reshape(h, (1,) + tuple(h.shape))
    out, _ = attention_block(h3, layer, heads, {"pret": (p_k, p_v)}, pure=True)
    return nc.reshape(out, tuple(out.shape[1:]))


def pret_reframe(p_k: Tensor, p_v: Tensor, h: Tensor, layer):
    """Single-head rewrite of prefix attention as a per-position convex blend:
    out = (1 - lam) * plain_attention + lam * prefix_branch, where lam is the
    softmax mass landing on prefix positions. Returns (output, lam).

    Agrees with `pret_apply` at heads=1 to float64 roundoff; used as the
    cross-form oracle and to inspect how strongly the prefix intervenes.
    """
    x = h.data
    d = x.shape[-1]
    q = x @ layer.wq.data
    kc = x @ layer.wk.data
    vc = x @ layer.wv.data
    scale = 1.0 / np.sqrt(d)
    s_c = q @ kc.T * scale
    n_pre = p_k.data.shape[0]
    if n_pre == 0:
        lam = np.zeros(x.shape[0], dtype=x.dtype)
        plain = _softmax(s_c) @ vc
        return Tensor(plain @ layer.wo.data), lam
    kp = p_k.data @ layer.wk.data
    vp = p_v.data @ layer.wv.data
    s_p = q @ kp.T * scale
    full = _softmax(np.concatenate([s_p, s_c], axis=1))
    lam = full[:, :n_pre].sum(axis=1)
    plain = _softmax(s_c) @ vc
    branch = _softmax(s_p) @ vp
    comb = (1.0 - lam)[:, None] * plain + lam[:, None] * branch
    return Tensor(comb @ layer.wo.data), lam


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def adapter_apply(mode: str, h: Tensor, h_prime: Tensor, w_down: Tensor, w_up: Tensor) -> Tensor:
    """Bottleneck residual branch on the attention output: sequential mode
    reads the output itself, parallel mode reads the layer input."""
    if w_down.shape[1] < 1:
        raise ConfigError("adapter bottleneck must be >= 1")
    if mode not in ("seq", "par"):
        raise ConfigError(f"adapter mode must be 'seq' or 'par', got {mode!r}")
    branch_in = h_prime if mode == "seq" else h
    return nc.add(h_prime, nc.matmul(nc.gelu(nc.matmul(branch_in, w_down)), w_up))


def lora_apply(h: Tensor, h_prime: Tensor, w_down: Tensor, w_up: Tensor, s: float) -> Tensor:
    """Low-rank side branch on a linear projection: h_prime + s * h @ down @ up."""
    if s < 1.0:
        raise ConfigError(f"low-rank scale must be >= 1, got {s}")
    return nc.add(h_prime, nc.scale(nc.matmul(nc.matmul(h, w_down), w_up), s))


def lora_merge(w: Tensor, w_down: Tensor, w_up: Tensor, s: float) -> Tensor:
    """Fold the low-rank update into the frozen matrix: w + s * down @ up.
    The merged forward equals the side-branch forward."""
    if s < 1.0:
        raise ConfigError(f"low-rank scale must be >= 1, got {s}")
    return Tensor(w.data + s * (w_down.data @ w_up.data))


# ---------------------------------------------------------------------------
# task-to-task initialization


def ensemble_init(previous, alpha: float, fresh: PetParams) -> PetParams:
    """Construct the next task's parameters from the frozen earlier ones.

    With no history, returns `fresh`. Otherwise the new set starts from the
    most recent one blended with the sum of all earlier sets:
    alpha * sum(previous) + (1 - alpha) * previous[-1], applied once here.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    previous = list(previous)
    if not previous:
        return fresh
    ref = previous[-1]
    for p in previous:
        if p.technique != ref.technique or set(p.tensors) != set(ref.tensors):
            raise ConfigError("ensemble init requires matching techniques and shapes")
    tensors = {}
    for key in ref.tensors:
        total = sum(p.tensors[key].data for p in previous)
        blended = alpha * total + (1.0 - alpha) * ref.tensors[key].data
        tensors[key] = Tensor(blended.astype(ref.tensors[key].dtype), requires_grad=True)
    return PetParams(
        ref.technique, ref.layers, tensors,
        ref.prompt_len, ref.bottleneck, ref.lora_scale, ref.lora_targets,
    )
