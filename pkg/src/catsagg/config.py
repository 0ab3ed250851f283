"""Plain ``key = value`` run configuration with ``[model]``, ``[train]``, ``[data]``, ``[eval]`` sections.

Every key has a default; unknown sections or keys are errors. The effective
configuration (defaults filled in) can be written back out with
:meth:`RunConfig.to_ini`.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from catsagg.aggregator import AggregatorConfig
from catsagg.errors import ConfigurationError
from catsagg.synthetic import SynthConfig
from catsagg.trainer import TrainConfig


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v: str) -> list[float]:
    return [float(x) for x in v.split(",") if x.strip()]


def _ints(v: str) -> list[int]:
    return [int(x) for x in v.split(",") if x.strip()]


def _milestones(v: str) -> list[tuple[int, float]] | None:
    v = v.strip()
    if v == "auto":
        return None
    out = []
    for item in v.split(","):
        if item.strip():
            step, mult = item.split(":")
            out.append((int(step), float(mult)))
    return out


# section -> key -> (parser, default text, description)
SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "embed_dim": (int, "16", "appearance embedding width p"),
        "heads": (int, "4", "attention heads; hw + p must be divisible by it"),
        "depth": (int, "1", "aggregator blocks"),
        "mlp_ratio": (float, "4", "MLP hidden width as a multiple of hw + p"),
        "appearance": (_bool, "true", "concatenate projected features"),
        "multi_level": (_bool, "true", "keep levels separate (false: level-mean first)"),
        "swap": (_bool, "true", "second pass on the transposed map"),
        "residual": (_bool, "true", "add the raw correlation back"),
        "init_std": (float, "0.02", "std of normal weight init"),
        "pos_embed_init_std": (float, "0.02", "std of positional embedding init"),
    },
    "data": {
        "h": (int, "8", "grid height"),
        "w": (int, "8", "grid width"),
        "channels": (_ints, "2,2,2", "channels per level; count sets L"),
        "lattice_spacing": (_floats, "4,6,8", "random-field lattice spacing per level, in cells"),
        "rotation_deg": (float, "30", "max absolute rotation"),
        "scale_min": (float, "0.75", "min isotropic scale"),
        "scale_max": (float, "1.33", "max isotropic scale"),
        "translation_frac": (float, "0.15", "max translation as a fraction of the extent"),
        "noise_sigma": (float, "0.1", "target feature noise std"),
        "num_keypoints": (int, "20", "keypoints per pair"),
        "seed": (int, "0", "seed of the first training pair"),
        "train_pairs": (int, "200", "pairs generated for training"),
    },
    "train": {
        "lr": (float, "3e-4", "aggregator learning rate"),
        "lr_feature_path": (float, "3e-6", "reserved backbone learning rate (unused)"),
        "weight_decay": (float, "0.05", "decoupled weight decay"),
        "beta1": (float, "0.9", "Adam beta1"),
        "beta2": (float, "0.999", "Adam beta2"),
        "eps": (float, "1e-8", "Adam epsilon"),
        "batch_size": (int, "8", "pairs per step"),
        "max_steps": (int, "500", "optimizer steps"),
        "milestones": (_milestones, "auto", "step:multiplier list, or auto for 0.5 at 50% and 75%"),
        "seed": (int, "0", "init and batch-sampling seed"),
        "eval_every": (int, "100", "steps between held-out evaluations (0: never)"),
        "tau": (float, "0.02", "soft-argmax temperature"),
        "dtype": (str, "float64", "float64 or float32"),
    },
    "eval": {
        "pairs": (int, "50", "held-out pairs generated for evaluation"),
        "seed": (int, "100000", "seed of the first held-out pair"),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    @classmethod
    def from_string(cls, text: str, source: str = "<string>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigurationError(f"{source}: {exc}") from None
        raw = {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}
        for sec in parser.sections():
            if sec not in SCHEMA:
                raise ConfigurationError(f"{source}: unknown section [{sec}]")
            for key, val in parser.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigurationError(f"{source}: unknown key '{key}' in [{sec}]")
                raw[sec][key] = val
        values = {}
        for sec, keys in SCHEMA.items():
            values[sec] = {}
            for key, (conv, _, _) in keys.items():
                try:
                    values[sec][key] = conv(raw[sec][key])
                except ValueError as exc:
                    raise ConfigurationError(f"{source}: [{sec}] {key} = {raw[sec][key]!r}: {exc}") from None
        return cls(values, raw)

    @classmethod
    def from_file(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls.from_string("")
        return cls.from_string(Path(path).read_text(), source=str(path))

    def to_ini(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for key, (_, _, doc) in keys.items():
                lines.append(f"# {doc}")
                lines.append(f"{key} = {self.raw[sec][key]}")
            lines.append("")
        return "\n".join(lines)

    def synth_config(self) -> SynthConfig:
        d = self.values["data"]
        return SynthConfig(
            h=d["h"],
            w=d["w"],
            channels=d["channels"],
            lattice_spacing=d["lattice_spacing"],
            rotation_deg=d["rotation_deg"],
            scale_range=(d["scale_min"], d["scale_max"]),
            translation_frac=d["translation_frac"],
            noise_sigma=d["noise_sigma"],
            num_keypoints=d["num_keypoints"],
            seed=d["seed"],
        )

    def model_config(self) -> AggregatorConfig:
        m, d = self.values["model"], self.values["data"]
        return AggregatorConfig(
            h=d["h"],
            w=d["w"],
            p=m["embed_dim"],
            channels=d["channels"],
            heads=m["heads"],
            depth=m["depth"],
            mlp_ratio=m["mlp_ratio"],
            appearance_on=m["appearance"],
            multi_level_on=m["multi_level"],
            swap_on=m["swap"],
            residual_on=m["residual"],
            init_std=m["init_std"],
            pos_embed_init_std=m["pos_embed_init_std"],
        )

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            lr_aggregator=t["lr"],
            lr_feature_path=t["lr_feature_path"],
            weight_decay=t["weight_decay"],
            betas=(t["beta1"], t["beta2"]),
            eps=t["eps"],
            batch_size=t["batch_size"],
            max_steps=t["max_steps"],
            lr_milestones=t["milestones"],
            seed=t["seed"],
            eval_every=t["eval_every"],
            tau=t["tau"],
            dtype=t["dtype"],
        )
