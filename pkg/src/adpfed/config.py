"""Experiment configuration: a flat ``key=value`` text format with dotted
namespaces (``privacy.p=95``). The same names are accepted as ``--key value``
flags on the command line.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from . import data, model, privacy


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if value is None:
        return "auto"
    return str(value)


@dataclass
class ExperimentConfig:
    # attribute names map to dotted keys by the first underscore after a
    # namespace prefix, see KEYS below
    seed: int = 1
    rounds: int = 100
    repeats: int = 3
    output_dir: str = "adpfed_out"

    data_seed: int = 0
    data_sizes: tuple[int, ...] = data.DEFAULT_SIZES
    data_test_size: int = data.DEFAULT_TEST_SIZE
    data_heterogeneity: float = 0.5
    data_image_size: int = 32

    model_hidden: int = 16
    model_init_scale: float = 1.0

    optim_lr: float = 1e-4
    optim_weight_decay: float = 1e-5
    optim_beta1: float = 0.9
    optim_beta2: float = 0.999
    optim_eps: float = 1e-8
    optim_batch_size: int = 1
    optim_local_epochs: int = 1
    optim_reset_state: bool = False

    privacy_mode: str = "adaptive"
    privacy_q: float = 0.9
    privacy_p: float = 95.0
    privacy_C: float | None = None
    privacy_epsilon: float = 0.001
    privacy_sigma: float = 1.0
    privacy_warmup_rounds: int = 5
    privacy_percentile_include_zeros: bool = False
    privacy_noise_on_support_only: bool = False

    report_sample_std: bool = False

    sweep_percentiles: tuple[float, ...] = (70.0, 75.0, 80.0, 85.0, 90.0, 95.0)

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.rounds >= 0, f"rounds must be >= 0, got {self.rounds}")
        need(self.repeats >= 1, f"repeats must be >= 1, got {self.repeats}")
        need(len(self.data_sizes) >= 1, "data.sizes needs at least one site")
        need(all(s >= 1 for s in self.data_sizes), f"data.sizes must be positive: {self.data_sizes}")
        need(self.data_test_size >= 1, "data.test_size must be >= 1")
        need(0.0 <= self.data_heterogeneity <= 1.0, "data.heterogeneity must lie in [0, 1]")
        need(self.data_image_size >= 4, "data.image_size must be >= 4")
        need(self.model_hidden >= 1, "model.hidden must be >= 1")
        need(self.model_init_scale >= 0.0, "model.init_scale must be >= 0")
        need(self.optim_lr >= 0.0 and math.isfinite(self.optim_lr), "optim.lr must be finite and >= 0")
        need(self.optim_weight_decay >= 0.0, "optim.weight_decay must be >= 0")
        need(0.0 <= self.optim_beta1 < 1.0 and 0.0 <= self.optim_beta2 < 1.0, "betas must lie in [0, 1)")
        need(self.optim_eps > 0.0, "optim.eps must be positive")
        need(self.optim_batch_size >= 1, "optim.batch_size must be >= 1")
        need(self.optim_local_epochs >= 1, "optim.local_epochs must be >= 1")
        need(self.privacy_warmup_rounds >= 1, "privacy.warmup_rounds must be >= 1")
        need(len(self.sweep_percentiles) >= 1, "sweep.percentiles is empty")
        need(
            all(0.0 < p <= 100.0 for p in self.sweep_percentiles),
            f"sweep.percentiles must lie in (0, 100]: {self.sweep_percentiles}",
        )
        need(
            len(set(self.sweep_percentiles)) == len(self.sweep_percentiles),
            f"duplicate sweep percentiles: {self.sweep_percentiles}",
        )
        try:
            self.privacy_config()
        except privacy.PrivacyConfigError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def privacy_config(self, **overrides) -> privacy.PrivacyConfig:
        kw = dict(
            mode=self.privacy_mode,
            q=self.privacy_q,
            p=self.privacy_p,
            fixed_threshold=self.privacy_C,
            epsilon=self.privacy_epsilon,
            sigma=self.privacy_sigma,
            rng_seed=self.seed,
            percentile_include_zeros=self.privacy_percentile_include_zeros,
            noise_on_support_only=self.privacy_noise_on_support_only,
        )
        kw.update(overrides)
        return privacy.PrivacyConfig(**kw)

    def local_config(self) -> model.LocalTrainConfig:
        return model.LocalTrainConfig(
            epochs=self.optim_local_epochs,
            batch_size=self.optim_batch_size,
            hidden=self.model_hidden,
            adam=model.AdamConfig(
                lr=self.optim_lr,
                weight_decay=self.optim_weight_decay,
                beta1=self.optim_beta1,
                beta2=self.optim_beta2,
                eps=self.optim_eps,
            ),
        )

    def set(self, key: str, text: str) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, parse = KEYS[key]
        try:
            setattr(self, attr, parse(text))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc

    def to_text(self) -> str:
        lines = [f"{key}={_fmt(getattr(self, attr))}" for key, (attr, _) in KEYS.items()]
        return "\n".join(lines) + "\n"


_NAMESPACES = ("data", "model", "optim", "privacy", "report", "sweep")


def _parser_for(f: dataclasses.Field):
    t = f.type
    if t == "bool":
        return _bool
    if t == "int":
        return int
    if t == "float":
        return float
    if t == "str":
        return str
    if t == "float | None":
        return _opt_float
    if t == "tuple[int, ...]":
        return _ints
    if t == "tuple[float, ...]":
        return _floats
    raise TypeError(f"no parser for field type {t}")


def _key_for(attr: str) -> str:
    head, _, rest = attr.partition("_")
    return f"{head}.{rest}" if head in _NAMESPACES and rest else attr


KEYS: dict[str, tuple[str, object]] = {
    _key_for(f.name): (f.name, _parser_for(f)) for f in dataclasses.fields(ExperimentConfig)
}


def parse_text(text: str, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = cfg if cfg is not None else ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value)
    return cfg


def load(path: str, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), cfg)
