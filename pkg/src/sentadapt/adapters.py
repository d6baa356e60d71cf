"""Houlsby, Pfeiffer and K-Adapter modules over a frozen encoder, with parameter accounting.

Bottleneck adapters (Houlsby, Pfeiffer) compute ``h + up(act(down(h)))`` on a
sublayer output before the base residual + layernorm. Houlsby sits after both
the attention and the feed-forward sublayer of every layer, Pfeiffer after the
feed-forward sublayer only. ``up`` starts at exactly zero, so a fresh adapter
is the identity.

The K-Adapter runs beside the base: adapter layer ``j`` reads the base hidden
state at ``injection_points[j]`` plus the previous adapter layer's output and
applies ``x + up(transformer^N(down(x)))``. The final token representation is
``dense(concat(base_last, adapter_last))``; the dense layer starts as
``[I; 0]`` so the base output passes through unchanged.
"""

from __future__ import annotations

import hashlib
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .encoder import (
    BaseParameters,
    ConfigError,
    EncoderConfig,
    attention_bias,
    init_array,
    linear,
    transformer_layer,
    transformer_layer_shapes,
)
from .tensor import Tensor


class AdapterKind(str, Enum):
    HOULSBY = "houlsby"
    PFEIFFER = "pfeiffer"
    K_ADAPTER = "k_adapter"


AFTER_ATTENTION_AND_FF = "after_attention_and_ff"
AFTER_FF_ONLY = "after_ff_only"

_INSERTION_FOR = {
    AdapterKind.HOULSBY: AFTER_ATTENTION_AND_FF,
    AdapterKind.PFEIFFER: AFTER_FF_ONLY,
}

# Published trainable-parameter counts at full scale (BERT-base / RoBERTa-large).
# Bottleneck sizes behind them are not known, so they serve as documentation
# and for the ordering check only.
REFERENCE_PARAMETER_COUNTS = {
    "bert-base": {"base": 110_000_000, "houlsby": 4_000_000, "pfeiffer": 10_000_000, "k_adapter": 47_000_000},
    "roberta-large": {"base": 355_000_000, "houlsby": 6_000_000, "pfeiffer": 12_000_000, "k_adapter": 47_000_000},
}


@dataclass(frozen=True)
class BottleneckConfig:
    bottleneck_dim: int
    nonlinearity: str = "gelu"
    insertion: str = AFTER_ATTENTION_AND_FF

    def __post_init__(self):
        if not isinstance(self.bottleneck_dim, int) or self.bottleneck_dim < 1:
            raise ConfigError(f"bottleneck_dim must be a positive int, got {self.bottleneck_dim!r}")
        if self.nonlinearity not in ("relu", "gelu"):
            raise ConfigError(f"nonlinearity must be 'relu' or 'gelu', got {self.nonlinearity!r}")
        if self.insertion not in (AFTER_ATTENTION_AND_FF, AFTER_FF_ONLY):
            raise ConfigError(f"unknown insertion {self.insertion!r}")

    @classmethod
    def for_kind(cls, kind, encoder_config: EncoderConfig, bottleneck_dim: int | None = None,
                 nonlinearity: str = "gelu") -> BottleneckConfig:
        kind = AdapterKind(kind)
        if bottleneck_dim is None:
            bottleneck_dim = max(1, encoder_config.d_model // 8)
        return cls(bottleneck_dim, nonlinearity, _INSERTION_FOR[kind])

    @property
    def sites(self) -> tuple[str, ...]:
        return ("attention", "ff") if self.insertion == AFTER_ATTENTION_AND_FF else ("ff",)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class KAdapterConfig:
    k: int
    injection_points: tuple[int, ...]
    adapter_d_model: int
    n_transformer_layers: int = 2
    n_heads: int = 1
    d_ff: int = 0

    def __post_init__(self):
        object.__setattr__(self, "injection_points", tuple(int(p) for p in self.injection_points))
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 2 * self.adapter_d_model)
        for name in ("k", "adapter_d_model", "n_transformer_layers", "n_heads", "d_ff"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if len(self.injection_points) != self.k:
            raise ConfigError(f"expected {self.k} injection points, got {len(self.injection_points)}")
        if any(b <= a for a, b in zip(self.injection_points, self.injection_points[1:])):
            raise ConfigError(f"injection points must be strictly increasing: {self.injection_points}")
        if self.adapter_d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide adapter_d_model={self.adapter_d_model}")

    @classmethod
    def default(cls, encoder_config: EncoderConfig, adapter_d_model: int | None = None) -> KAdapterConfig:
        n = encoder_config.n_layers
        k = min(3, n)
        points = tuple(int(p) for p in np.round(np.linspace(0, n - 1, k)))
        if adapter_d_model is None:
            adapter_d_model = max(1, encoder_config.d_model // 2)
        heads = encoder_config.n_heads if adapter_d_model % encoder_config.n_heads == 0 else 1
        return cls(k=k, injection_points=points, adapter_d_model=adapter_d_model, n_heads=heads)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["injection_points"] = list(self.injection_points)
        return d


def _config_from_dict(kind: AdapterKind, d: Mapping):
    if kind is AdapterKind.K_ADAPTER:
        return KAdapterConfig(**d)
    return BottleneckConfig(**d)


def validate_config(kind, encoder_config: EncoderConfig, config) -> None:
    kind = AdapterKind(kind)
    if kind is AdapterKind.K_ADAPTER:
        if not isinstance(config, KAdapterConfig):
            raise ConfigError("k_adapter requires a KAdapterConfig")
        bad = [p for p in config.injection_points if not 0 <= p < encoder_config.n_layers]
        if bad:
            raise ConfigError(f"injection points {bad} out of range for n_layers={encoder_config.n_layers}")
        return
    if not isinstance(config, BottleneckConfig):
        raise ConfigError(f"{kind.value} requires a BottleneckConfig")
    if config.bottleneck_dim >= encoder_config.d_model:
        raise ConfigError(f"bottleneck_dim={config.bottleneck_dim} must be < d_model={encoder_config.d_model}")
    if config.insertion != _INSERTION_FOR[kind]:
        raise ConfigError(f"{kind.value} adapters use insertion {_INSERTION_FOR[kind]!r}, got {config.insertion!r}")


def adapter_parameter_shapes(kind, encoder_config: EncoderConfig, config) -> dict[str, tuple[int, ...]]:
    kind = AdapterKind(kind)
    d = encoder_config.d_model
    shapes: dict[str, tuple[int, ...]] = {}
    if kind is AdapterKind.K_ADAPTER:
        da = config.adapter_d_model
        for j in range(config.k):
            prefix = f"adapters.k.{j}."
            shapes[prefix + "down.weight"] = (d, da)
            shapes[prefix + "down.bias"] = (da,)
            for n in range(config.n_transformer_layers):
                shapes.update(transformer_layer_shapes(f"{prefix}layers.{n}.", da, config.d_ff))
            shapes[prefix + "up.weight"] = (da, d)
            shapes[prefix + "up.bias"] = (d,)
        shapes["adapters.fusion.weight"] = (2 * d, d)
        shapes["adapters.fusion.bias"] = (d,)
        return shapes
    b = config.bottleneck_dim
    for i in range(encoder_config.n_layers):
        for site in config.sites:
            prefix = f"adapters.layers.{i}.{site}."
            shapes[prefix + "down.weight"] = (d, b)
            shapes[prefix + "down.bias"] = (b,)
            shapes[prefix + "up.weight"] = (b, d)
            shapes[prefix + "up.bias"] = (d,)
    return shapes


@dataclass
class AdapterParameters:
    """One domain's trainable adapter weights."""

    kind: AdapterKind
    config: BottleneckConfig | KAdapterConfig
    encoder_config: EncoderConfig
    tensors: dict[str, Tensor]
    domain_label: str = "default"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = AdapterKind(self.kind)
        validate_config(self.kind, self.encoder_config, self.config)
        expected = adapter_parameter_shapes(self.kind, self.encoder_config, self.config)
        if set(expected) != set(self.tensors):
            raise ConfigError("adapter tensors do not match the configured architecture")
        for path, shape in expected.items():
            t = self.tensors[path]
            if t.shape != shape:
                raise ConfigError(f"{path}: shape {t.shape} does not match expected {shape}")
            t.requires_grad = True
        self.tensors = {p: self.tensors[p] for p in expected}

    def __getitem__(self, path: str) -> Tensor:
        return self.tensors[path]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self.tensors.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for path, t in self.tensors.items():
            h.update(path.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def replace(self, path: str, tensor: Tensor) -> AdapterParameters:
        """Copy with one tensor swapped (used by gradient checks)."""
        tensors = dict(self.tensors)
        tensors[path] = tensor
        return AdapterParameters(self.kind, self.config, self.encoder_config, tensors, self.domain_label, self.meta)

    def header_config(self) -> dict:
        return {
            "adapter_kind": self.kind.value,
            "adapter_config": self.config.to_dict(),
            "domain_label": self.domain_label,
            "encoder": self.encoder_config.to_dict(),
        }

    def save(self, path, meta: Mapping | None = None):
        return save_checkpoint(path, "adapter", self.header_config(),
                               {p: t.data for p, t in self.tensors.items()}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> AdapterParameters:
        if ckpt.kind != "adapter":
            raise ConfigError(f"expected an adapter checkpoint, got kind {ckpt.kind!r}")
        cfg = ckpt.config
        kind = AdapterKind(cfg["adapter_kind"])
        return cls(
            kind=kind,
            config=_config_from_dict(kind, cfg["adapter_config"]),
            encoder_config=EncoderConfig.from_dict(cfg["encoder"]),
            tensors={p: Tensor(a) for p, a in ckpt.tensors.items()},
            domain_label=cfg["domain_label"],
            meta=dict(ckpt.meta),
        )

    @classmethod
    def load(cls, path) -> AdapterParameters:
        return cls.from_checkpoint(load_checkpoint(path))


def default_config(kind, encoder_config: EncoderConfig, bottleneck_dim: int | None = None):
    kind = AdapterKind(kind)
    if kind is AdapterKind.K_ADAPTER:
        return KAdapterConfig.default(encoder_config)
    return BottleneckConfig.for_kind(kind, encoder_config, bottleneck_dim)


def build_adapter(kind, encoder_config: EncoderConfig, config=None, seed: int = 0,
                  domain_label: str = "default") -> AdapterParameters:
    kind = AdapterKind(kind)
    if config is None:
        config = default_config(kind, encoder_config)
    validate_config(kind, encoder_config, config)
    rng = np.random.default_rng(seed)
    d = encoder_config.d_model
    tensors = {}
    for path, shape in adapter_parameter_shapes(kind, encoder_config, config).items():
        if path == "adapters.fusion.weight":
            arr = np.vstack([np.eye(d), np.zeros((d, d))])
        elif kind is not AdapterKind.K_ADAPTER and ".up." in path:
            arr = np.zeros(shape)
        else:
            arr = init_array(path, shape, rng)
        tensors[path] = Tensor(arr, requires_grad=True)
    return AdapterParameters(kind, config, encoder_config, tensors, domain_label)


class AdapterStack:
    """A base model with one adapter composed into its forward pass."""

    def __init__(self, params: BaseParameters, adapters: AdapterParameters):
        base, mine = params.config, adapters.encoder_config
        if (base.d_model, base.n_layers) != (mine.d_model, mine.n_layers):
            raise ConfigError(
                f"adapter built for d_model={mine.d_model}, n_layers={mine.n_layers} "
                f"cannot attach to base with d_model={base.d_model}, n_layers={base.n_layers}"
            )
        overlap = set(params.tensors) & set(adapters.tensors)
        if overlap:
            raise ConfigError(f"adapter paths collide with base paths: {sorted(overlap)[:3]}")
        self.params = params
        self.adapters = adapters
        self.kind = adapters.kind
        self._act = T.gelu if getattr(adapters.config, "nonlinearity", "gelu") == "gelu" else T.relu
        self._sites = set(adapters.config.sites) if self.kind is not AdapterKind.K_ADAPTER else set()

    def parameters(self) -> dict[str, Tensor]:
        """Every tensor the composed forward pass reads, base and adapter."""
        return {**self.params.tensors, **self.adapters.tensors}

    def trainable_paths(self) -> set[str]:
        return {p for p, t in self.parameters().items() if t.requires_grad}

    def frozen_paths(self) -> set[str]:
        return {p for p, t in self.parameters().items() if not t.requires_grad}

    def hook(self, site: str, layer_index: int, h: Tensor) -> Tensor:
        if site not in self._sites:
            return h
        w = self.adapters.tensors
        prefix = f"adapters.layers.{layer_index}.{site}"
        with T.scope(f"adapter:{self.kind.value}:{layer_index}:{site}"):
            return h + linear(self._act(linear(h, w, prefix + ".down")), w, prefix + ".up")

    def fuse(self, hidden: list[Tensor], mask: np.ndarray | None) -> Tensor:
        base_last = hidden[-1]
        if self.kind is not AdapterKind.K_ADAPTER:
            return base_last
        cfg = self.adapters.config
        w = self.adapters.tensors
        bias = attention_bias(mask, cfg.n_heads)
        prev = None
        for j, point in enumerate(cfg.injection_points):
            prefix = f"adapters.k.{j}."
            with T.scope(f"adapter:k_adapter:{j}"):
                x = hidden[point + 1] if prev is None else hidden[point + 1] + prev
                z = linear(x, w, prefix + "down")
                for n in range(cfg.n_transformer_layers):
                    z = transformer_layer(z, w, f"{prefix}layers.{n}.", cfg.n_heads, bias)
                prev = x + linear(z, w, prefix + "up")
        with T.scope("adapter:k_adapter:fusion"):
            return linear(T.concat_lastdim([base_last, prev]), w, "adapters.fusion")


def inject(params: BaseParameters, adapters: AdapterParameters) -> AdapterStack:
    return AdapterStack(params, adapters)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterCount:
    total: int
    breakdown: dict[str, int]


def count_parameters(params) -> ParameterCount:
    """Exact scalar count of a parameter map (base, adapter or plain mapping)."""
    tensors = params.tensors if hasattr(params, "tensors") else params
    breakdown = {}
    for path, t in tensors.items():
        shape = t.shape if hasattr(t, "shape") else np.shape(t)
        breakdown[path] = int(np.prod(shape, dtype=np.int64))
    return ParameterCount(total=sum(breakdown.values()), breakdown=breakdown)


def trainable_ratio(adapter_count: int, base_count: int) -> float:
    if base_count <= 0:
        raise ValueError("base count must be positive")
    return adapter_count / base_count


def bottleneck_parameter_count(kind, d_model: int, n_layers: int, bottleneck_dim: int) -> int:
    """Closed form: per adapter ``(d*b + b) + (b*d + d)``, one or two adapters per layer."""
    per_adapter = (d_model * bottleneck_dim + bottleneck_dim) + (bottleneck_dim * d_model + d_model)
    per_layer = 2 if AdapterKind(kind) is AdapterKind.HOULSBY else 1
    return n_layers * per_layer * per_adapter


def k_adapter_parameter_count(encoder_config: EncoderConfig, config: KAdapterConfig) -> int:
    d, da, f = encoder_config.d_model, config.adapter_d_model, config.d_ff
    transformer = 4 * da * da + 3 * da + 2 * da + (da * f + f) + (f * da + da) + 2 * da
    per_layer = (d * da + da) + config.n_transformer_layers * transformer + (da * d + d)
    return config.k * per_layer + (2 * d * d + d)
