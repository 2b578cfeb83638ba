"""Run configuration: a flat human-readable key=value file, resolved against
package defaults into the typed sub-configs, and hashed canonically.

File format: one `key = value` per line, `#` comments, blank lines ignored.
Values parse as int, float, bool (true/false), comma-separated lists, or
bare strings. Dotted keys select the section, e.g. `train.epochs = 12`,
`stream.n_classes = 24`, `pretrain.dim = 32`, `aka.lambda_ood = 0.7`.
Unknown keys are rejected. `seed` and a handful of top-level keys apply
across sections. See the schema table in the README.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, fields, replace
from pathlib import Path

from .backbone import PretrainConfig
from .bench import MixedStreamConfig, StreamConfig
from .errors import ConfigError
from .hide import TrainConfig

SECTIONS = {
    "train": TrainConfig,
    "stream": StreamConfig,
    "mixed": MixedStreamConfig,
    "pretrain": PretrainConfig,
}

TOP_LEVEL = {
    "seed": 1,            # applied to every section unless overridden
    "checkpoint": "",     # path to a frozen backbone; empty = pretrain inline
    "lambda_ood": 0.7,    # pool gate threshold (aka runs)
    "save_state": True,
}


def _parse_value(raw: str):
    raw = raw.strip()
    if "," in raw:
        return tuple(_parse_value(v) for v in raw.split(",") if v.strip())
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def parse_config_file(path) -> dict:
    """Parse the key=value document into {section: {key: value}} plus the
    top-level keys."""
    out: dict = {name: {} for name in SECTIONS}
    out["top"] = dict(TOP_LEVEL)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        value = _parse_value(raw)
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"{path}:{lineno}: unknown section {section!r}")
            valid = {f.name for f in fields(SECTIONS[section])}
            if name not in valid:
                raise ConfigError(f"{path}:{lineno}: unknown key {name!r} in [{section}]")
            out[section][name] = value
        elif key in TOP_LEVEL:
            out["top"][key] = value
        else:
            raise ConfigError(f"{path}:{lineno}: unknown top-level key {key!r}")
    return out


def resolve(parsed: dict | None = None, seed: int | None = None, overrides: dict | None = None):
    """Materialize typed configs from the parsed document (or pure defaults).

    The top-level seed flows into every section; dimensions are cross-checked
    so a mismatched stream/backbone pair fails here, not mid-run.
    """
    parsed = parsed or {name: {} for name in (*SECTIONS, )} | {"top": dict(TOP_LEVEL)}
    top = dict(parsed.get("top", TOP_LEVEL))
    if seed is not None:
        top["seed"] = seed
    if overrides:
        top.update({k: v for k, v in overrides.items() if k in TOP_LEVEL})

    def build(section, cls):
        kw = dict(parsed.get(section, {}))
        kw.setdefault("seed", top["seed"])
        return cls(**kw)

    cfgs = {
        "train": build("train", TrainConfig),
        "stream": build("stream", StreamConfig),
        "mixed": build("mixed", MixedStreamConfig),
        "pretrain": build("pretrain", PretrainConfig),
        "top": top,
    }
    # normalize scalars the parser left unlisted
    t = cfgs["train"]
    if isinstance(t.pet_layers, int):
        cfgs["train"] = replace(t, pet_layers=(t.pet_layers,))
    if isinstance(cfgs["train"].lora_targets, str):
        cfgs["train"] = replace(cfgs["train"], lora_targets=(cfgs["train"].lora_targets,))
    p, s = cfgs["pretrain"], cfgs["stream"]
    if p.d_feat != s.d_feat:
        raise ConfigError(f"pretrain.d_feat {p.d_feat} != stream.d_feat {s.d_feat}")
    if s.class_id_base < s.pretext_classes:
        raise ConfigError("stream class ids overlap the pretext range")
    return cfgs


def config_hash(cfgs: dict) -> str:
    """sha256 of the canonical JSON of every resolved value."""
    payload = {}
    for name in SECTIONS:
        payload[name] = asdict(cfgs[name])
    payload["top"] = cfgs["top"]
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dump_schema() -> str:
    """The accepted keys with their defaults, for --help and the README."""
    lines = ["# top-level"]
    for k, v in TOP_LEVEL.items():
        lines.append(f"{k} = {v}")
    for name, cls in SECTIONS.items():
        lines.append(f"# [{name}]")
        for f in fields(cls):
            default = getattr(cls(), f.name)
            if isinstance(default, tuple):
                default = ",".join(str(x) for x in default)
            lines.append(f"{name}.{f.name} = {default}")
    return "\n".join(lines)
