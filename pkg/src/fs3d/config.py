"""Run configuration: a plain-text file of ``key = value`` lines."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .loss import TaskLossConfig
from .model import ModelConfig
from .runtime.lifecycle import RuntimeOptions


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model (toy-scale mirror of the size table)
    layers: int = 2
    node_dim: int = 16
    edge_dim: int = 16
    hidden_dim: int = 16
    experts: int = 4
    top_k: int = 2
    heads: int = 2
    attention_dim: int = 16
    attention: str = "multihead"
    rcut: float = 4.5
    elements: int = 10
    tasks: int = 2
    residual_scale: float = 0.0
    # numerics and world
    precision: str = "float32"
    deterministic: bool = True
    compression: bool = False
    fs: int = 1
    gp: int = 1
    dp: int = 1
    rack_size: int = 2
    restore_policy: str = "per_phase"
    buckets: int = 4
    pipelined: bool = True
    # optimization
    batch_size: int = 8
    minibatches: int = 2
    base_lr: float = 0.01
    reference_batch: int = 8
    lr_schedule: str = "constant"
    momentum: float = 0.0
    epochs: int = 1
    max_steps: int = 0
    seed: int = 0
    # loss
    w_energy: float = 1.0
    w_force: float = 10.0
    w_stress: float = 0.1
    w_magmom: float = 1.0
    base_loss: str = "l1"
    huber_delta: float = 1.0
    tau: float = 2.0
    kappa: float = 4.0
    timeout: float = 120.0

    def __post_init__(self):
        for k in ("layers", "node_dim", "edge_dim", "hidden_dim", "experts", "top_k", "heads",
                  "attention_dim", "elements", "tasks", "fs", "gp", "dp", "rack_size", "buckets",
                  "batch_size", "minibatches", "reference_batch", "epochs"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.minibatches % self.dp:
            raise ConfigError("dp must divide minibatches")
        if self.batch_size < self.minibatches:
            raise ConfigError("batch_size must be >= minibatches")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigError("lr_schedule must be constant or linear")
        if not self.base_lr > 0 or not self.timeout > 0:
            raise ConfigError("base_lr and timeout must be positive")
        try:
            self.model_config()
            self.loss_config()
            self.runtime_options()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_blocks=self.layers, d_node=self.node_dim, d_edge=self.edge_dim,
                           d_hidden=self.hidden_dim, n_experts=self.experts, top_k=self.top_k,
                           n_heads=self.heads, d_attn=self.attention_dim, r_cut=self.rcut,
                           n_elements=self.elements, n_tasks=self.tasks, attention_mode=self.attention)

    def loss_config(self) -> TaskLossConfig:
        return TaskLossConfig(w_energy=self.w_energy, w_force=self.w_force, w_stress=self.w_stress,
                              w_magmom=self.w_magmom, kind=self.base_loss, delta=self.huber_delta,
                              tau=self.tau, kappa=self.kappa)

    def runtime_options(self) -> RuntimeOptions:
        return RuntimeOptions(precision=self.precision, deterministic=self.deterministic,
                              compress=self.compression, restore_policy=self.restore_policy,
                              n_buckets=self.buckets, pipelined=self.pipelined, momentum=self.momentum)

    # ------------------------------------------------------------------
    # text form

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        vals = {}
        for k, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {k}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {k}: unknown key {key!r}")
            if key in vals:
                raise ConfigError(f"line {k}: duplicate key {key!r}")
            vals[key] = _parse(val, types[key], key)
        return cls(**vals)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    def override(self, pairs) -> "RunConfig":
        """Apply ``key=value`` strings on top of this config."""
        types = {f.name: f.type for f in fields(self)}
        kw = {}
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"expected key=value, got {item!r}")
            key, val = (x.strip() for x in item.split("=", 1))
            if key not in types:
                raise ConfigError(f"unknown key {key!r}")
            kw[key] = _parse(val, types[key], key)
        return self.replace(**kw)

    def replace(self, **kw) -> "RunConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        unknown = set(kw) - set(d)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        d.update(kw)
        return RunConfig(**d)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(val: str, typ: str, key: str):
    try:
        if typ == "bool":
            if val.lower() not in ("true", "false"):
                raise ValueError(val)
            return val.lower() == "true"
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"bad value for {key}: {val!r}") from None
