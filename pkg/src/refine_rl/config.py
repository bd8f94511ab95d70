"""Flat ``key=value`` run configuration.

Blank lines and ``#`` comments are ignored; unknown keys are an error. Every
key has a default, so an empty file is a complete config. ``dump_config`` and
``parse_config`` round-trip exactly (floats are written with ``repr``).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from refine_rl.agent import Hyperparams
from refine_rl.training import ABLATION_MODES, FinetuneSchedule, OfflineSchedule


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env: str = "pointmass"
    dataset: str = ""
    refs: str = ""
    checkpoint: str = ""
    out: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # hyperparameters
    gamma: float = 0.99
    tau: float = 0.005
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    critic_to_actor_ratio: int = 2
    alpha: float = 0.4
    batch_size: int = 256
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    exploration_sigma: float = 0.1
    hidden: int = 256
    bc_only: bool = False
    # offline schedule
    J: int = 100_000
    K: int = 25_000
    lam: float = 5.0
    eval_every: int = 5_000
    eval_episodes: int = 10
    # fine-tuning schedule
    M: int = 5_000
    N: int = 24_500
    alpha_start: float = 0.4
    alpha_end: float = 0.2
    buffer_capacity: int = 0
    ablation: str = "none"
    # dataset suite generation
    data_seed: int = 0
    expert_n: int = 50_000
    medium_n: int = 50_000
    behavior_steps: int = 20_000
    behavior_prefill: int = 5_000
    behavior_eval_every: int = 100
    ref_episodes: int = 100

    def __post_init__(self):
        if self.ablation not in ABLATION_MODES:
            raise ConfigError(f"ablation must be one of {ABLATION_MODES}, got {self.ablation!r}")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        # construct once so invalid values fail at load time
        self.hyperparams()
        self.offline_schedule()
        self.finetune_schedule()

    def hyperparams(self) -> Hyperparams:
        names = {f.name for f in fields(Hyperparams)}
        return Hyperparams(**{k: v for k, v in asdict(self).items() if k in names})

    def offline_schedule(self) -> OfflineSchedule:
        return OfflineSchedule(self.J, self.K, self.lam, self.eval_every, self.eval_episodes,
                               list(self.seeds))

    def finetune_schedule(self) -> FinetuneSchedule:
        return FinetuneSchedule(self.M, self.N, self.alpha_start, self.alpha_end,
                                self.buffer_capacity, self.eval_every, self.eval_episodes)

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:12]


# text keys that differ from attribute names
_ALIASES = {"lambda": "lam"}
_TEXT_KEYS = {attr: text for text, attr in _ALIASES.items()}


def _text_key(attr: str) -> str:
    return _TEXT_KEYS.get(attr, attr)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(attr: str, default, text: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, list):
            return [int(x) for x in text.split(",") if x.strip()]
        if isinstance(default, int):
            return int(text.replace("_", ""))
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {_text_key(attr)}: {text!r}") from None
    return text


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    defaults = RunConfig()
    attrs = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        attr = _ALIASES.get(key, key)
        if attr not in attrs:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[attr] = _parse(attr, getattr(defaults, attr), val)
    values.update(overrides or {})
    return RunConfig(**values)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{_text_key(f.name)}={_format(getattr(cfg, f.name))}\n"
                   for f in fields(RunConfig))
