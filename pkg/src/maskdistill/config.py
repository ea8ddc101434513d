"""Run configuration: a sectioned key-value file validated against a schema.

Every field is typed and validated before any compute; unknown sections or
keys are rejected by name. The seed is mandatory (no wall-clock default).
A RunConfig renders back to canonical text (`to_text`) that reproduces the
fully-resolved run byte-exactly, and that text is embedded in checkpoints.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass

from .data import AugmentationConfig, SyntheticSpec
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .masking import MaskConfig
from .objectives import LossWeights
from .trainer import ScheduleConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = -1
    dtype: str = "float32"
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | folder
    path: str = ""
    layout: str = "class-folders"


@dataclass
class SynthSection:
    classes: tuple[str, ...] = ("red-square", "blue-circle")
    size: int = 32
    count: int = 200
    test_count: int = 100
    noise: float = 0.06

    def spec(self) -> SyntheticSpec:
        return SyntheticSpec(classes=self.classes, size=self.size, noise=self.noise)


@dataclass
class EvalSection:
    k: int = 10
    temp: float = 0.07
    concat_blocks: bool = False  # concatenate the last 4 blocks' class tokens
    probe_lr: float = 0.01
    probe_epochs: int = 100
    probe_batch: int = 0  # 0 = full batch


# -- schema ------------------------------------------------------------------------

_REQUIRED = object()


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_pair(s: str) -> tuple[float, float]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated floats, got {s!r}")
    return float(parts[0]), float(parts[1])


def _parse_csv(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _parse_csv_int(s: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in s.split(",") if p.strip())


def _choice(*options):
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"must be one of {options}, got {s!r}")
        return s
    return parse


SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, _REQUIRED),
        "dtype": (_choice("float32", "float64"), "float32"),
        "checkpoint_every": (int, 0),
    },
    "data": {
        "source": (_choice("synthetic", "folder"), "synthetic"),
        "path": (str, ""),
        "layout": (_choice("class-folders", "flat"), "class-folders"),
    },
    "synth": {
        "classes": (_parse_csv, ("red-square", "blue-circle")),
        "size": (int, 32),
        "count": (int, 200),
        "test_count": (int, 100),
        "noise": (float, 0.06),
    },
    "augment": {
        "global_size": (int, 32),
        "local_size": (int, 16),
        "n_local": (int, 8),
        "global_scale": (_parse_pair, (0.4, 1.0)),
        "local_scale": (_parse_pair, (0.05, 0.4)),
        "flip_prob": (float, 0.5),
        "jitter_prob": (float, 0.8),
        "grayscale_prob": (float, 0.2),
        "blur_prob1": (float, 1.0),
        "blur_prob2": (float, 0.1),
        "blur_prob_local": (float, 0.5),
        "solarize_prob1": (float, 0.0),
        "solarize_prob2": (float, 0.2),
        "solarize_threshold": (float, 0.5),
    },
    "encoder": {
        "patch_size": (int, 4),
        "embed_dim": (int, 64),
        "depth": (int, 4),
        "heads": (int, 4),
        "head_output_dim": (int, 256),
        "mlp_hidden": (int, 128),
        "use_bn_in_head": (_parse_bool, True),
    },
    "mask": {
        "strategy": (_choice("none", "random", "attention_guided"),
                     "attention_guided"),
        "p": (float, 0.15),
        "num": (int, 8),
    },
    "decoder": {
        "stages": (int, 0),  # 0 = log2(patch_size)
        "channels": (_parse_csv_int, ()),
    },
    "loss": {
        "lambda1": (float, 1.0),
        "lambda2": (float, 0.6),
        "teacher_temp": (float, 0.04),
        "student_temp": (float, 0.1),
        "centering": (_parse_bool, False),
        "center_momentum": (float, 0.9),
    },
    "schedule": {
        "base_lr": (float, 2e-3),
        "warmup_epochs": (int, 10),
        "total_epochs": (int, 100),
        "weight_decay": (float, 0.04),
        "momentum_base": (float, 0.996),
        "momentum_final": (float, 1.0),
        "batch_size": (int, 50),
        "clip_norm": (float, 3.0),
    },
    "eval": {
        "k": (int, 10),
        "temp": (float, 0.07),
        "concat_blocks": (_parse_bool, False),
        "probe_lr": (float, 0.01),
        "probe_epochs": (int, 100),
        "probe_batch": (int, 0),
    },
}

# bare-key shorthands accepted by --set
_ALIASES = {
    "epochs": ("schedule", "total_epochs"),
    "seed": ("run", "seed"),
    "batch_size": ("schedule", "batch_size"),
}


def _resolve_key(dotted: str) -> tuple[str, str]:
    if "." in dotted:
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key: {dotted}")
        return section, key
    if dotted in _ALIASES:
        return _ALIASES[dotted]
    hits = [(s, dotted) for s in SCHEMA if dotted in SCHEMA[s]]
    if len(hits) == 1:
        return hits[0]
    raise ConfigError(
        f"unknown config key: {dotted}" if not hits
        else f"ambiguous config key: {dotted} (use section.key)")


class RunConfig:
    """Fully-resolved, validated view of one run's configuration."""

    def __init__(self, values: dict[str, dict]):
        v = values
        self.run = RunSection(**v["run"])
        self.data = DataSection(**v["data"])
        self.synth = SynthSection(**v["synth"])
        a = v["augment"]
        self.augment = AugmentationConfig(
            global_size=a["global_size"], local_size=a["local_size"],
            global_scale_range=a["global_scale"], local_scale_range=a["local_scale"],
            n_local=a["n_local"], flip_prob=a["flip_prob"],
            jitter_prob=a["jitter_prob"], grayscale_prob=a["grayscale_prob"],
            blur_probs=(a["blur_prob1"], a["blur_prob2"]),
            blur_prob_local=a["blur_prob_local"],
            solarize_probs=(a["solarize_prob1"], a["solarize_prob2"]),
            solarize_threshold=a["solarize_threshold"], seed=v["run"]["seed"])
        self.encoder = EncoderConfig(**v["encoder"])
        self.mask = MaskConfig(**v["mask"])
        stages = v["decoder"]["stages"]
        if stages == 0:
            stages = int(round(math.log2(self.encoder.patch_size)))
        self.decoder = DecoderConfig(stages=stages, in_dim=self.encoder.embed_dim,
                                     channels=tuple(v["decoder"]["channels"]))
        self.loss = LossWeights(**v["loss"])
        self.schedule = ScheduleConfig(**v["schedule"])
        self.eval = EvalSection(**v["eval"])
        self.validate()

    # -- derived --------------------------------------------------------------

    @property
    def global_grid(self) -> tuple[int, int]:
        side = self.augment.global_size // self.encoder.patch_size
        return (side, side)

    def validate(self) -> None:
        if self.run.seed < 0:
            raise ConfigError("run.seed is required and must be >= 0")
        if self.run.checkpoint_every < 0:
            raise ConfigError("run.checkpoint_every must be >= 0")
        if self.data.source == "folder" and not self.data.path:
            raise ConfigError("data.path is required when data.source = folder")
        try:
            self.encoder.validate()
            self.mask.validate()
            self.decoder.validate()
            self.loss.validate()
            self.schedule.validate()
            self.augment.validate()
            self.synth.spec().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        ps = self.encoder.patch_size
        if self.augment.global_size % ps or self.augment.local_size % ps:
            raise ConfigError("view sizes must be divisible by encoder.patch_size")
        if 2 ** self.decoder.stages != ps:
            raise ConfigError(
                f"decoder.stages={self.decoder.stages} cannot rebuild full "
                f"resolution: need 2^stages == patch_size ({ps})")
        if self.eval.k < 1:
            raise ConfigError("eval.k must be >= 1")

    # -- serialization ----------------------------------------------------------

    def _resolved_values(self) -> dict[str, dict[str, str]]:
        def fmt(x) -> str:
            if isinstance(x, bool):
                return "true" if x else "false"
            if isinstance(x, float):
                return repr(x)
            if isinstance(x, (tuple, list)):
                return ",".join(fmt(i) for i in x)
            return str(x)

        a = self.augment
        return {
            "run": {"seed": fmt(self.run.seed), "dtype": self.run.dtype,
                    "checkpoint_every": fmt(self.run.checkpoint_every)},
            "data": {"source": self.data.source, "path": self.data.path,
                     "layout": self.data.layout},
            "synth": {"classes": fmt(self.synth.classes), "size": fmt(self.synth.size),
                      "count": fmt(self.synth.count),
                      "test_count": fmt(self.synth.test_count),
                      "noise": fmt(self.synth.noise)},
            "augment": {
                "global_size": fmt(a.global_size), "local_size": fmt(a.local_size),
                "n_local": fmt(a.n_local), "global_scale": fmt(a.global_scale_range),
                "local_scale": fmt(a.local_scale_range),
                "flip_prob": fmt(a.flip_prob), "jitter_prob": fmt(a.jitter_prob),
                "grayscale_prob": fmt(a.grayscale_prob),
                "blur_prob1": fmt(a.blur_probs[0]), "blur_prob2": fmt(a.blur_probs[1]),
                "blur_prob_local": fmt(a.blur_prob_local),
                "solarize_prob1": fmt(a.solarize_probs[0]),
                "solarize_prob2": fmt(a.solarize_probs[1]),
                "solarize_threshold": fmt(a.solarize_threshold)},
            "encoder": {k: fmt(getattr(self.encoder, k)) for k in
                        ("patch_size", "embed_dim", "depth", "heads",
                         "head_output_dim", "mlp_hidden", "use_bn_in_head")},
            "mask": {"strategy": self.mask.strategy, "p": fmt(self.mask.p),
                     "num": fmt(self.mask.num)},
            "decoder": {"stages": fmt(self.decoder.stages),
                        "channels": fmt(self.decoder.channels)},
            "loss": {k: fmt(getattr(self.loss, k)) for k in
                     ("lambda1", "lambda2", "teacher_temp", "student_temp",
                      "centering", "center_momentum")},
            "schedule": {k: fmt(getattr(self.schedule, k)) for k in
                         ("base_lr", "warmup_epochs", "total_epochs", "weight_decay",
                          "momentum_base", "momentum_final", "batch_size",
                          "clip_norm")},
            "eval": {k: fmt(getattr(self.eval, k)) for k in
                     ("k", "temp", "concat_blocks", "probe_lr", "probe_epochs",
                      "probe_batch")},
        }

    def to_text(self) -> str:
        chunks = []
        for section, kv in self._resolved_values().items():
            chunks.append(f"[{section}]")
            chunks.extend(f"{k} = {val}" for k, val in kv.items())
            chunks.append("")
        return "\n".join(chunks)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    # -- construction -------------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, overrides: list[str] | None = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_file(io.StringIO(text))
        except configparser.Error as exc:
            raise ConfigError(f"config parse error: {exc}") from exc

        raw: dict[str, dict[str, str]] = {}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section: [{section}]")
            for key, val in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(
                        f"unknown config key: {key} (in section [{section}])")
                raw.setdefault(section, {})[key] = val

        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value: {item!r}")
            dotted, _, val = item.partition("=")
            section, key = _resolve_key(dotted.strip())
            raw.setdefault(section, {})[key] = val.strip()

        values: dict[str, dict] = {}
        for section, keys in SCHEMA.items():
            values[section] = {}
            for key, (parse, default) in keys.items():
                if key in raw.get(section, {}):
                    try:
                        values[section][key] = parse(raw[section][key])
                    except (ValueError, TypeError) as exc:
                        raise ConfigError(
                            f"bad value for {section}.{key}: {exc}") from exc
                elif default is _REQUIRED:
                    raise ConfigError(f"missing required config key: {section}.{key}")
                else:
                    values[section][key] = default
        return cls(values)

    @classmethod
    def from_file(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        return cls.from_text(text, overrides)
