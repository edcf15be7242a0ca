"""Run configuration: INI-style text with sections mirroring the dataclasses.

Sections are [model], [train], [data], [infer].  Unknown sections or keys
are hard errors, and parse -> serialize produces one canonical form.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from typing import Optional

from .model import CairConfig
from .tensor import ContractViolation
from .training import TrainConfig


@dataclass
class DataConfig:
    root: str = "corpus"
    index: str = "index.tsv"
    train_split: str = "train"
    eval_split: str = "val"


@dataclass
class InferConfig:
    tta: bool = False
    tlsc_window: Optional[int] = None


@dataclass
class RunConfig:
    model: CairConfig = field(default_factory=CairConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    infer: InferConfig = field(default_factory=InferConfig)


def _parse_value(section, key, raw, target_type):
    raw = raw.strip()
    try:
        if target_type == "int":
            return int(raw)
        if target_type == "float":
            return float(raw)
        if target_type == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if target_type == "opt_int":
            return None if raw.lower() == "none" else int(raw)
        if target_type == "int_tuple":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ContractViolation(
            f"config [{section}] {key}: cannot parse {raw!r} as {target_type}"
        )


# (key, type) per section; order here is the canonical serialization order.
_MODEL_KEYS = [
    ("levels", "int"), ("width", "int"), ("block_counts", "int_tuple"),
    ("variant", "str"), ("tlsc_window", "opt_int"), ("ca_width", "opt_int"),
]
_TRAIN_KEYS = [
    ("lr_init", "float"), ("lr_final", "float"), ("total_iters", "int"),
    ("adam_beta1", "float"), ("adam_beta2", "float"),
    ("weight_decay", "float"), ("batch_size", "int"), ("patch_size", "int"),
    ("aug_prob", "float"), ("seed", "int"), ("log_interval", "int"),
    ("checkpoint_interval", "int"),
]
_DATA_KEYS = [
    ("root", "str"), ("index", "str"), ("train_split", "str"),
    ("eval_split", "str"),
]
_INFER_KEYS = [("tta", "bool"), ("tlsc_window", "opt_int")]

_SECTIONS = {
    "model": (_MODEL_KEYS, CairConfig),
    "train": (_TRAIN_KEYS, TrainConfig),
    "data": (_DATA_KEYS, DataConfig),
    "infer": (_INFER_KEYS, InferConfig),
}


def parse_run_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ContractViolation(f"config: {e}")

    built = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ContractViolation(f"config: unknown section [{section}]")
        keys, cls = _SECTIONS[section]
        known = dict(keys)
        kwargs = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ContractViolation(
                    f"config [{section}]: unknown key {key!r}"
                )
            kwargs[key] = _parse_value(section, key, raw, known[key])
        built[section] = cls(**kwargs)
    return RunConfig(
        model=built.get("model", CairConfig()),
        train=built.get("train", TrainConfig()),
        data=built.get("data", DataConfig()),
        infer=built.get("infer", InferConfig()),
    )


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_run_config(cfg: RunConfig) -> str:
    out = io.StringIO()
    for section, obj in (("model", cfg.model), ("train", cfg.train),
                         ("data", cfg.data), ("infer", cfg.infer)):
        keys, _ = _SECTIONS[section]
        out.write(f"[{section}]\n")
        for key, _type in keys:
            out.write(f"{key} = {_format_value(getattr(obj, key))}\n")
        out.write("\n")
    return out.getvalue()


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_run_config(f.read())
    except FileNotFoundError:
        raise IOError(f"config: cannot read {path}")


def save_run_config(path: str, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_run_config(cfg))
