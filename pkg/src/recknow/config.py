"""Declarative run configuration read from TOML."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class DatasetConfig:
    name: str = "ml1m"
    format: str = "ml1m"
    interactions: str = ""
    catalog: str = ""
    catalog_format: str = "ml1m"  # ml1m | amazon | retail | jsonl | none
    date_format: str = "%d/%m/%Y %H:%M"
    min_rating: Optional[float] = None
    core: int = 0
    lexicon: str = ""


@dataclass
class SamplingConfig:
    strategy: str = "random"
    n_neg: int = 19
    seed: int = 0
    sample_cap: int = 1000
    max_history: int = 50


@dataclass
class CFConfig:
    dim: int = 32
    epochs: int = 20
    lr: float = 0.05
    reg: float = 1e-4
    neg_per_pos: int = 1
    init_std: float = 0.1
    embedding_items: str = ""
    embedding_users: str = ""


@dataclass
class KGConfig:
    enabled: bool = True
    triples: str = ""
    labels: str = ""
    theta: float = 0.2
    link_threshold: float = 0.7
    hops: int = 2
    max_len: int = 3
    max_paths: int = 64
    dim: int = 16
    n_buckets: int = 256
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    neg_ratio: int = 1
    max_positive_pairs: int = 2000


@dataclass
class KnowledgeConfig:
    variant: str = "his_cand_u2i"
    history_window: int = 10
    i2i_k: int = 3
    u2i_n: int = 20
    global_m: int = 20
    his_i2i_source: str = "cooccurrence"
    with_attributes: bool = False


@dataclass
class PromptConfig:
    template: str = ""
    max_tokens: int = 0


@dataclass
class GatewayConfig:
    backend: str = "mock_oracle"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    max_attempts: int = 5
    backoff: float = 1.0
    concurrency: int = 4
    api_key_env: str = "OPENAI_API_KEY"
    cache_dir: str = ""


@dataclass
class EvalConfig:
    ks: list[int] = field(default_factory=lambda: [1, 5, 10])
    baselines: list[str] = field(default_factory=lambda: ["pop", "item_cf", "bm25", "mf"])
    group_axes: list[str] = field(default_factory=list)


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    cf: CFConfig = field(default_factory=CFConfig)
    kg: KGConfig = field(default_factory=KGConfig)
    knowledge: KnowledgeConfig = field(default_factory=KnowledgeConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: str = "run"
    base_dir: str = field(default=".", metadata={"hash": False})

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.output)

    @property
    def template_id(self) -> str:
        return self.prompt.template or self.knowledge.variant

    @property
    def run_key(self) -> str:
        v, t = self.knowledge.variant, self.template_id
        return v if t == v else f"{v}.{t}"

    def section_hash(self, *names: str) -> str:
        blob = json.dumps({n: _plain(getattr(self, n)) for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _plain(obj):
    return asdict(obj) if is_dataclass(obj) else obj


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"[{name}] must be a table")
            kwargs[name] = _build(type(default), value, name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict, base_dir: Union[str, Path] = ".") -> PipelineConfig:
    data = dict(data)
    data.pop("base_dir", None)
    cfg = _build(PipelineConfig, data, "top level")
    cfg.base_dir = str(base_dir)
    validate(cfg)
    return cfg


def load_config(path: Union[str, Path], overrides: Optional[dict[str, Any]] = None) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        data.setdefault(section, {})[key] = value
    return config_from_dict(data, path.parent)


def validate(cfg: PipelineConfig) -> None:
    from .corpus import FORMATS, STRATEGIES
    from .knowledge import VARIANTS
    from .prompts import LEXICONS, TEMPLATE_IDS
    from .llm import BACKENDS
    from .evaluate import AXES, BASELINES

    checks = [
        (cfg.dataset.format in FORMATS, f"dataset.format must be one of {FORMATS}"),
        (cfg.dataset.catalog_format in ("ml1m", "amazon", "retail", "jsonl", "none"), "bad dataset.catalog_format"),
        (not cfg.dataset.lexicon or cfg.dataset.lexicon in LEXICONS, f"dataset.lexicon must be one of {tuple(LEXICONS)}"),
        (cfg.sampling.strategy in STRATEGIES, f"sampling.strategy must be one of {STRATEGIES}"),
        (cfg.sampling.n_neg >= 0, "sampling.n_neg must be >= 0"),
        (isinstance(cfg.sampling.seed, int), "sampling.seed must be an integer"),
        (0 < cfg.kg.theta < 1, "kg.theta must lie in (0, 1)"),
        (0 < cfg.kg.link_threshold <= 1, "kg.link_threshold must lie in (0, 1]"),
        (cfg.knowledge.variant in VARIANTS, f"knowledge.variant must be one of {VARIANTS}"),
        (cfg.knowledge.his_i2i_source in ("cooccurrence", "embedding"), "bad knowledge.his_i2i_source"),
        (cfg.template_id in TEMPLATE_IDS, f"prompt.template must be one of {TEMPLATE_IDS}"),
        (cfg.gateway.backend in BACKENDS, f"gateway.backend must be one of {BACKENDS}"),
        (cfg.gateway.temperature >= 0, "gateway.temperature must be >= 0"),
        (cfg.gateway.max_attempts >= 1, "gateway.max_attempts must be >= 1"),
        (all(m in BASELINES for m in cfg.eval.baselines), f"eval.baselines must be drawn from {BASELINES}"),
        (all(a in AXES for a in cfg.eval.group_axes), f"eval.group_axes must be drawn from {AXES}"),
        (all(isinstance(k, int) and k > 0 for k in cfg.eval.ks), "eval.ks must be positive integers"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
