"""Run configuration: flat key=value or JSON files, overridable from the command line."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .datamodel import SyntheticConfig

SEED_ENV = "SESSIONRANK_SEED"


@dataclass
class RunConfig:
    events: str = "events.jsonl"
    model_dir: str = "models"
    report_dir: str = "reports"
    embedding_dim: int = 200
    mlp_widths: tuple = (800, 200, 100)
    proj_widths: tuple = (100, 100)
    eta: float = 0.001
    rank_eta: float = 0.001
    neg_ratio: int = 5
    purchase_copies: int = 3
    k: int = 10
    epochs: int = 10
    T: int = 10
    batch_size: int = 1
    seed: int = 0
    pooling: str = "average"
    enumeration_cap: int = 5000
    label_temperature: float = 1.0
    gain: str = "linear"
    features: str = "both"
    repr_item: str = "zero"
    use_user_embedding: bool = False
    separate_view_table: bool = False
    purchases_as_clicks: bool = False
    gap_ms: int = 3_600_000
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def validate(self) -> "RunConfig":
        for name in ("eta", "rank_eta", "embedding_dim", "k", "batch_size",
                     "enumeration_cap", "label_temperature", "gap_ms"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if min(self.epochs, self.T, self.neg_ratio, self.purchase_copies) < 0:
            raise ValueError("epochs, T, neg_ratio and purchase_copies must be >= 0")
        if self.proj_widths[-1] != self.mlp_widths[-1]:
            raise ValueError("last proj_widths entry must equal last mlp_widths entry")
        self.synthetic.validate()
        return self

    def sie_params(self) -> dict:
        return dict(
            embedding_dim=self.embedding_dim, mlp_widths=tuple(self.mlp_widths),
            pooling=self.pooling, features=self.features, eta=self.eta, epochs=self.epochs,
            batch_size=self.batch_size, neg_ratio=self.neg_ratio,
            purchase_copies=self.purchase_copies, seed=self.seed,
            use_user_embedding=self.use_user_embedding,
            separate_view_table=self.separate_view_table,
            purchases_as_clicks=self.purchases_as_clicks, repr_item=self.repr_item,
        )

    def rank_params(self) -> dict:
        return dict(
            proj_widths=tuple(self.proj_widths), eta=self.rank_eta, epochs=self.T, k=self.k,
            seed=self.seed, enumeration_cap=self.enumeration_cap,
            label_temperature=self.label_temperature,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_widths"] = list(self.mlp_widths)
        d["proj_widths"] = list(self.proj_widths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for key, value in d.items():
            cfg.set(key, value)
        return cfg

    def set(self, key: str, value):
        """Set a (possibly ``synthetic.``-prefixed) key, coercing strings to the field type."""
        if key == "synthetic" and isinstance(value, dict):
            for k, v in value.items():
                self.set(f"synthetic.{k}", v)
            return
        target, name = self, key
        if key.startswith("synthetic."):
            target, name = self.synthetic, key.split(".", 1)[1]
        types = {f.name: f.default for f in fields(target)}
        if name not in types:
            raise KeyError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(types[name], value))


def _coerce(default, value):
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(int(v) for v in value)
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(f"not a boolean: {value!r}")
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def parse_config_text(text: str) -> dict:
    """Parse a JSON object or flat ``key = value`` lines (``#`` comments allowed)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        return json.loads(stripped)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None,
                env=os.environ) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        for key, value in parse_config_text(Path(path).read_text(encoding="utf-8")).items():
            cfg.set(key, value)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    if env.get(SEED_ENV):
        cfg.seed = int(env[SEED_ENV])
    return cfg.validate()


def config_keys() -> list[tuple[str, object]]:
    """Every settable key with its default value."""
    base = RunConfig()
    keys = [(f.name, getattr(base, f.name)) for f in fields(base) if f.name != "synthetic"]
    keys += [(f"synthetic.{f.name}", getattr(base.synthetic, f.name)) for f in fields(base.synthetic)]
    return keys
