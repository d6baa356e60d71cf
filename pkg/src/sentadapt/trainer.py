"""Training loop: adapter-only (frozen base), full fine-tuning, or frozen evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapters import AdapterParameters, count_parameters, inject
from .data import Triplet, TripletDataset
from .encoder import BaseParameters, embed_tokens, tokenize
from .objectives import LossConfig, TripletBatch, get_loss
from .optim import Adam, check_frozen_untouched

log = logging.getLogger(__name__)

ADAPTER_ONLY = "adapter_only"
FULL_FINETUNE = "full_finetune"
FROZEN_EVAL = "frozen_eval"
MODES = (ADAPTER_ONLY, FULL_FINETUNE, FROZEN_EVAL)


class TrainingError(RuntimeError):
    pass


class ModeError(ValueError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, epoch: int, batch_index: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 1e-5
    batch_size: int = 16
    loss: str = "l2"
    mode: str = ADAPTER_ONLY
    seed: int = 0
    domain_label: str = "default"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"loss must be 'l1' or 'l2', got {self.loss!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class TrainReport:
    epoch_losses: list[float]
    trainable_parameters: int
    base_parameters: int
    trainable_ratio: float
    wall_clock_seconds: float
    checkpoint_path: str | None
    config: dict = field(default_factory=dict)
    loss_config: dict = field(default_factory=dict)
    adapter_kind: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


@dataclass
class TrainResult:
    report: TrainReport
    base: BaseParameters
    adapters: AdapterParameters | None


def _check_mode(base: BaseParameters, adapters: AdapterParameters | None, mode: str) -> None:
    if mode == ADAPTER_ONLY:
        if adapters is None:
            raise ModeError("adapter_only training needs adapter parameters")
        if not base.frozen:
            raise ModeError("adapter_only training needs a frozen base")
    elif mode == FULL_FINETUNE:
        if adapters is not None:
            raise ModeError("full_finetune trains the base alone; detach the adapter")
        if base.frozen:
            raise ModeError("full_finetune needs an unfrozen base")


def batch_loss(base: BaseParameters, stack, token_cache: dict[str, list[int]], triplets: list[Triplet],
               loss_fn, loss_config: LossConfig) -> T.Tensor:
    texts = [t.anchor for t in triplets] + [t.positive for t in triplets] + [t.negative for t in triplets]
    emb = embed_tokens(base, [token_cache[x] for x in texts], stack)
    return loss_fn(TripletBatch.from_stacked(emb), loss_config)


def train(base: BaseParameters, adapters: AdapterParameters | None, data: TripletDataset | list[Triplet],
          config: TrainConfig, loss_config: LossConfig | None = None,
          checkpoint_path=None) -> TrainResult:
    """Minimize the configured loss over the training triplets.

    In ``adapter_only`` mode only the adapter tensors are handed to the
    optimizer and the base is asserted gradient-free after every step.
    ``frozen_eval`` computes the mean training loss once and writes nothing.
    """
    _check_mode(base, adapters, config.mode)
    loss_config = loss_config or LossConfig()
    triplets = data.train if isinstance(data, TripletDataset) else list(data)
    if not triplets:
        raise ValueError("no training triplets")
    started = time.perf_counter()
    loss_fn = get_loss(config.loss)
    stack = inject(base, adapters) if adapters is not None else None
    cache = {}
    for t in triplets:
        for text in (t.anchor, t.positive, t.negative):
            if text not in cache:
                cache[text] = tokenize(text, base.config)

    base_count = count_parameters(base).total
    if config.mode == ADAPTER_ONLY:
        trainable = list(adapters.tensors.values())
        trainable_count = count_parameters(adapters).total
    elif config.mode == FULL_FINETUNE:
        trainable = list(base.tensors.values())
        trainable_count = base_count
    else:
        trainable = []
        trainable_count = 0
    frozen = [t for t in base.tensors.values() if not t.requires_grad]

    rng = np.random.default_rng(config.seed)
    epoch_losses = []
    if config.mode == FROZEN_EVAL:
        with T.no_grad():
            total = 0.0
            for start in range(0, len(triplets), config.batch_size):
                chunk = triplets[start:start + config.batch_size]
                total += batch_loss(base, stack, cache, chunk, loss_fn, loss_config).item() * len(chunk)
        epoch_losses.append(total / len(triplets))
    else:
        opt = Adam(trainable, config.learning_rate)
        for epoch in range(config.epochs):
            order = rng.permutation(len(triplets))
            total = 0.0
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                chunk = [triplets[i] for i in order[start:start + config.batch_size]]
                loss = batch_loss(base, stack, cache, chunk, loss_fn, loss_config)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(epoch, b, value)
                opt.zero_grad()
                loss.backward()
                check_frozen_untouched(frozen)
                opt.step()
                total += value * len(chunk)
            epoch_losses.append(total / len(triplets))
            log.info("epoch %d/%d mean loss %.6f", epoch + 1, config.epochs, epoch_losses[-1])
        opt.zero_grad()

    saved = None
    if checkpoint_path is not None and config.mode != FROZEN_EVAL:
        meta = {"domain_label": config.domain_label, "train_config": asdict(config)}
        if config.mode == ADAPTER_ONLY:
            adapters.domain_label = config.domain_label
            saved = str(adapters.save(checkpoint_path, meta))
        else:
            saved = str(base.save(checkpoint_path, meta))

    report = TrainReport(
        epoch_losses=epoch_losses,
        trainable_parameters=trainable_count,
        base_parameters=base_count,
        trainable_ratio=trainable_count / base_count,
        wall_clock_seconds=time.perf_counter() - started,
        checkpoint_path=saved,
        config=asdict(config),
        loss_config=asdict(loss_config),
        adapter_kind=adapters.kind.value if adapters is not None else None,
    )
    return TrainResult(report, base, adapters)


class DomainRegistry:
    """Domain label -> adapter checkpoint path, persisted as JSON."""

    def __init__(self, entries: dict[str, str] | None = None):
        self.entries: dict[str, str] = dict(entries or {})

    def register(self, label: str, path, overwrite: bool = False) -> None:
        path = str(path)
        if label in self.entries and self.entries[label] != path and not overwrite:
            raise KeyError(f"domain {label!r} already registered to {self.entries[label]}")
        self.entries[label] = path

    def path_for(self, label: str) -> str:
        try:
            return self.entries[label]
        except KeyError:
            raise KeyError(f"no adapter registered for domain {label!r}") from None

    def load_adapter(self, label: str) -> AdapterParameters:
        return AdapterParameters.load(self.path_for(label))

    def __contains__(self, label: str) -> bool:
        return label in self.entries

    def __len__(self):
        return len(self.entries)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"domains": self.entries}, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> DomainRegistry:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(raw.get("domains", {}))
