"""Base sentence encoder: hashing tokenizer, post-LN transformer stack, pooling."""

from __future__ import annotations

import hashlib
import math
import re
import zlib
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .tensor import Tensor

PAD_ID = 0
SEP_ID = 1
SEP_TOKEN = "[SEP]"
INIT_STD = 0.02
_MASK_VALUE = -1e9
_TOKEN_RE = re.compile(r"\[sep\]|\w+")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 4096
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    max_len: int = 512
    pooling: str = "cls"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must leave room for padding, separator and at least one word id")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.pooling not in ("cls", "mean"):
            raise ConfigError(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> EncoderConfig:
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass(frozen=True)
class SentenceEmbedding:
    vector: np.ndarray
    source_id: str | int


def tokenize(text: str, config: EncoderConfig) -> list[int]:
    """Lowercase, split on whitespace/punctuation and hash words into ``[2, vocab_size)``.

    ``[SEP]`` maps to the separator id; text with no words yields ``[SEP_ID]``.
    """
    buckets = config.vocab_size - 2
    ids = []
    for tok in _TOKEN_RE.findall(text.lower()):
        if tok == "[sep]":
            ids.append(SEP_ID)
        else:
            ids.append(2 + zlib.crc32(tok.encode("utf-8")) % buckets)
        if len(ids) == config.max_len:
            break
    return ids or [SEP_ID]


def base_parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes = {
        "embeddings.token": (config.vocab_size, d),
        "embeddings.position": (config.max_len, d),
        "embeddings.norm.gamma": (d,),
        "embeddings.norm.beta": (d,),
    }
    for i in range(config.n_layers):
        shapes.update(transformer_layer_shapes(f"layers.{i}.", d, f))
    return shapes


def transformer_layer_shapes(prefix: str, d: int, f: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for proj in ("query", "key", "value", "output"):
        shapes[f"{prefix}attention.{proj}.weight"] = (d, d)
        # a key bias shifts every logit of a softmax row equally, so it is omitted
        if proj != "key":
            shapes[f"{prefix}attention.{proj}.bias"] = (d,)
    shapes[f"{prefix}attention_norm.gamma"] = (d,)
    shapes[f"{prefix}attention_norm.beta"] = (d,)
    shapes[f"{prefix}ff.in.weight"] = (d, f)
    shapes[f"{prefix}ff.in.bias"] = (f,)
    shapes[f"{prefix}ff.out.weight"] = (f, d)
    shapes[f"{prefix}ff.out.bias"] = (d,)
    shapes[f"{prefix}ff_norm.gamma"] = (d,)
    shapes[f"{prefix}ff_norm.beta"] = (d,)
    return shapes


def init_array(path: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Weights ~ N(0, 0.02); biases and norm shifts zero; norm scales one."""
    if path.endswith(".gamma"):
        return np.ones(shape)
    if path.endswith((".bias", ".beta")):
        return np.zeros(shape)
    return rng.normal(0.0, INIT_STD, size=shape)


class BaseParameters:
    """The frozen-or-trainable weight set of the base encoder, keyed by path."""

    def __init__(self, config: EncoderConfig, tensors: Mapping[str, Tensor], frozen: bool = False):
        expected = base_parameter_shapes(config)
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise ConfigError(f"parameter set does not match config: missing={missing[:3]} extra={extra[:3]}")
        for path, shape in expected.items():
            if tensors[path].shape != shape:
                raise ConfigError(f"{path}: shape {tensors[path].shape} does not match config shape {shape}")
        self.config = config
        self.tensors = {path: tensors[path] for path in expected}
        self._frozen = False
        self.set_frozen(frozen)

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int, frozen: bool = False) -> BaseParameters:
        rng = np.random.default_rng(seed)
        tensors = {p: Tensor(init_array(p, s, rng)) for p, s in base_parameter_shapes(config).items()}
        return cls(config, tensors, frozen=frozen)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def set_frozen(self, frozen: bool) -> None:
        self._frozen = bool(frozen)
        for t in self.tensors.values():
            t.requires_grad = not self._frozen
            t.grad = None

    def freeze(self) -> BaseParameters:
        self.set_frozen(True)
        return self

    def unfreeze(self) -> BaseParameters:
        self.set_frozen(False)
        return self

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

    def copy(self) -> BaseParameters:
        return BaseParameters(self.config, {p: Tensor(t.data) for p, t in self.tensors.items()}, self.frozen)

    def save(self, path, meta: Mapping | None = None):
        return save_checkpoint(path, "base", self.config.to_dict(),
                               {p: t.data for p, t in self.tensors.items()}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, frozen: bool = True) -> BaseParameters:
        if ckpt.kind != "base":
            raise ConfigError(f"expected a base checkpoint, got kind {ckpt.kind!r}")
        config = EncoderConfig.from_dict(ckpt.config)
        return cls(config, {p: Tensor(a) for p, a in ckpt.tensors.items()}, frozen=frozen)

    @classmethod
    def load(cls, path, frozen: bool = True) -> BaseParameters:
        return cls.from_checkpoint(load_checkpoint(path), frozen=frozen)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def attention_bias(mask: np.ndarray | None, n_heads: int) -> Tensor | None:
    """Additive ``(B, H, L, L)`` bias hiding padded keys; None when nothing is padded."""
    if mask is None:
        return None
    b, length = mask.shape
    bias = np.where(mask, 0.0, _MASK_VALUE)[:, None, None, :]
    return Tensor(np.broadcast_to(bias, (b, n_heads, length, length)))


def linear(x: Tensor, weights: Mapping[str, Tensor], prefix: str) -> Tensor:
    out = x @ weights[prefix + ".weight"]
    bias = weights.get(prefix + ".bias")
    return out if bias is None else out + bias


def self_attention(x: Tensor, weights: Mapping[str, Tensor], prefix: str, n_heads: int,
                   bias: Tensor | None) -> Tensor:
    b, length, d = x.shape
    dh = d // n_heads

    def heads(t):
        return T.transpose(T.reshape(t, (b, length, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(x, weights, prefix + ".query"))
    k = heads(linear(x, weights, prefix + ".key"))
    v = heads(linear(x, weights, prefix + ".value"))
    scores = T.scale(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    if bias is not None:
        scores = scores + bias
    ctx = T.softmax_lastdim(scores) @ v
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, length, d))
    return linear(ctx, weights, prefix + ".output")


def transformer_layer(x: Tensor, weights: Mapping[str, Tensor], prefix: str, n_heads: int,
                      bias: Tensor | None, hook=None, layer_index: int | None = None) -> Tensor:
    """Post-LN block. ``hook(site, layer_index, h)`` may rewrite each sublayer output before its residual."""
    a = self_attention(x, weights, prefix + "attention", n_heads, bias)
    if hook is not None:
        a = hook("attention", layer_index, a)
    x = T.layernorm_lastdim(x + a, weights[prefix + "attention_norm.gamma"], weights[prefix + "attention_norm.beta"])
    h = T.gelu(linear(x, weights, prefix + "ff.in"))
    f = linear(h, weights, prefix + "ff.out")
    if hook is not None:
        f = hook("ff", layer_index, f)
    return T.layernorm_lastdim(x + f, weights[prefix + "ff_norm.gamma"], weights[prefix + "ff_norm.beta"])


def pad_batch(token_lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray | None]:
    """Right-pad with ``PAD_ID``; the mask is None when all sequences share a length."""
    length = max(len(t) for t in token_lists)
    ids = np.full((len(token_lists), length), PAD_ID, dtype=np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    for i, toks in enumerate(token_lists):
        ids[i, :len(toks)] = toks
        mask[i, :len(toks)] = True
    return ids, (None if mask.all() else mask)


def forward_hidden(params: BaseParameters, ids: np.ndarray, mask: np.ndarray | None,
                   stack=None) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder; returns (final hidden ``(B, L, D)``, base hidden states per layer).

    ``hidden_states[0]`` is the embedding output and ``hidden_states[i + 1]``
    the output of layer ``i``. With a K-Adapter stack the final hidden is the
    fused representation; the hidden-state list is always the untouched base path.
    """
    cfg = params.config
    w = params.tensors
    length = ids.shape[1]
    if length > cfg.max_len:
        raise ConfigError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    x = T.embedding(w["embeddings.token"], ids) + w["embeddings.position"][:length]
    x = T.layernorm_lastdim(x, w["embeddings.norm.gamma"], w["embeddings.norm.beta"])
    bias = attention_bias(mask, cfg.n_heads)
    hook = stack.hook if stack is not None else None
    hidden = [x]
    for i in range(cfg.n_layers):
        x = transformer_layer(x, w, f"layers.{i}.", cfg.n_heads, bias, hook, i)
        hidden.append(x)
    if stack is not None:
        x = stack.fuse(hidden, mask)
    return x, hidden


def pool(hidden: Tensor, mask: np.ndarray | None, pooling: str) -> Tensor:
    if pooling == "cls":
        return hidden[:, 0, :]
    if mask is None:
        return T.mean(hidden, axis=1)
    b, length, d = hidden.shape
    weights = mask / mask.sum(axis=1, keepdims=True)
    w = Tensor(np.broadcast_to(weights[:, :, None], (b, length, d)))
    return T.sum(hidden * w, axis=1)


def embed_tokens(params: BaseParameters, token_lists: Sequence[Sequence[int]], stack=None) -> Tensor:
    """Differentiable sentence vectors ``(B, D)`` for pre-tokenized inputs."""
    ids, mask = pad_batch(token_lists)
    hidden, _ = forward_hidden(params, ids, mask, stack)
    return pool(hidden, mask, params.config.pooling)


def embed_texts(params: BaseParameters, texts: Sequence[str], stack=None, batch_size: int = 64) -> np.ndarray:
    """Inference path: no graph, equal-length sequences batched together (no padding)."""
    cfg = params.config
    tokens = [tokenize(t, cfg) for t in texts]
    out = np.zeros((len(texts), cfg.d_model))
    by_len: dict[int, list[int]] = {}
    for i, toks in enumerate(tokens):
        by_len.setdefault(len(toks), []).append(i)
    with T.no_grad():
        for length in sorted(by_len):
            idx = by_len[length]
            for start in range(0, len(idx), batch_size):
                chunk = idx[start:start + batch_size]
                out[chunk] = embed_tokens(params, [tokens[i] for i in chunk], stack).data
    return out


def encode(texts: Sequence[str], params: BaseParameters, adapters=None,
           config: EncoderConfig | None = None, ids: Sequence | None = None) -> list[SentenceEmbedding]:
    if config is not None and config != params.config:
        raise ConfigError(f"config {config} does not match parameters built for {params.config}")
    vectors = embed_texts(params, texts, adapters)
    ids = list(range(len(texts))) if ids is None else list(ids)
    return [SentenceEmbedding(vector=v, source_id=i) for v, i in zip(vectors, ids)]


class SentenceEncoder:
    """A base model plus an optional injected adapter stack, ready for inference."""

    def __init__(self, params: BaseParameters, stack=None, label: str | None = None):
        self.params = params
        self.stack = stack
        self.label = label

    @property
    def config(self) -> EncoderConfig:
        return self.params.config

    @property
    def dim(self) -> int:
        return self.params.config.d_model

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return embed_texts(self.params, texts, self.stack)
