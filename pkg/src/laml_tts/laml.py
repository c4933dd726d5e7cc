"""Language-agnostic meta learning: one batch per language per step, losses summed.

Each language is a task. A step draws one batch from every registered task,
adds the task losses and applies a single optimizer update, which refines a
shared initialization that adapts quickly to unseen languages. Fine-tuning on
a small new-language corpus keeps the pretraining tasks in the same loop.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import random
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
CHECKPOINT_FORMAT = "laml-tts-train/1"

LossFn = Callable[[torch.nn.Module, Sequence[Any]], "tuple[torch.Tensor, dict[str, float]]"]


class TaskError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    def __init__(self, message: str, state: "TrainState", fallback_path: Path | None):
        super().__init__(message)
        self.state = state
        self.fallback_path = fallback_path


@dataclass
class TrainConfig:
    steps: int = 60_000
    batch_size: int = 8
    learning_rate: float = 1e-3
    warmup_steps: int = 4000
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    grad_clip: float = 1.0
    checkpoint_every: int = 1000
    log_every: int = 100
    finetune_steps: int = 5000
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return {"schema_version": CONFIG_SCHEMA_VERSION, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported training config schema {version}")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# task sampling


class BatchSource:
    """Endless sampler over a fixed item list, reshuffled at every pass."""

    def __init__(self, items: Sequence[Any], seed: int = 0):
        self.items = list(items)
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(self.items)) if self.items else np.array([], dtype=np.int64)
        self.position = 0
        self.consumed = 0

    def next_batch(self, size: int) -> list[Any]:
        if not self.items:
            raise TaskError("empty sampler")
        batch = []
        while len(batch) < size:
            if self.position >= len(self.order):
                self.order = self.rng.permutation(len(self.items))
                self.position = 0
            batch.append(self.items[self.order[self.position]])
            self.position += 1
        self.consumed += size
        return batch

    def state_dict(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "order": self.order.tolist(),
            "position": self.position,
            "consumed": self.consumed,
        }

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.position = state["position"]
        self.consumed = state["consumed"]


class TaskRegistry:
    """One batch source per language id, with a common per-task batch size."""

    def __init__(self, batch_size: int):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.batch_size = batch_size
        self.tasks: dict[int, BatchSource] = {}

    def register(self, language_id: int, items: Sequence[Any], seed: int = 0) -> None:
        if language_id in self.tasks:
            raise TaskError(f"language {language_id} is already registered")
        self.tasks[language_id] = BatchSource(items, seed=seed * 1_000_003 + language_id)

    def __contains__(self, language_id: int) -> bool:
        return language_id in self.tasks

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def language_ids(self) -> list[int]:
        return sorted(self.tasks)

    def draw(self) -> dict[int, list[Any]]:
        """One batch from every task, in language-id order."""
        out = {}
        for lang in self.language_ids:
            source = self.tasks[lang]
            if not source.items:
                raise TaskError(f"task for language {lang} has no samples")
            out[lang] = source.next_batch(self.batch_size)
        return out

    @property
    def consumed(self) -> int:
        return sum(s.consumed for s in self.tasks.values())

    def state_dict(self) -> dict:
        return {"batch_size": self.batch_size, "tasks": {str(k): v.state_dict() for k, v in self.tasks.items()}}

    def load_state_dict(self, state: dict) -> None:
        for k, s in state["tasks"].items():
            if int(k) in self.tasks:
                self.tasks[int(k)].load_state_dict(s)


# ---------------------------------------------------------------------------
# optimization state


def _inverse_sqrt(warmup: int) -> Callable[[int], float]:
    warmup = max(1, warmup)

    def factor(step: int) -> float:
        step = step + 1
        return min(step / warmup, math.sqrt(warmup / step))

    return factor


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    config: TrainConfig
    step: int = 0
    extra: dict = field(default_factory=dict)

    def apply_update(self) -> None:
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.scheduler.step()
        self.step += 1


def new_train_state(model: torch.nn.Module, config: TrainConfig, step: int = 0) -> TrainState:
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.eps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _inverse_sqrt(config.warmup_steps))
    return TrainState(model, opt, sched, config, step)


def laml_loss(model: torch.nn.Module, batches: dict[int, Sequence[Any]], loss_fn: LossFn):
    """Sum of per-language losses; returns the summed tensor and each language's components."""
    total = None
    per_language: dict[int, dict[str, float]] = {}
    for lang, batch in batches.items():
        loss, parts = loss_fn(model, batch)
        per_language[lang] = parts
        total = loss if total is None else total + loss
    if total is None:
        raise TaskError("no registered tasks")
    return total, per_language


def laml_step(registry: TaskRegistry, state: TrainState, loss_fn: LossFn) -> tuple[TrainState, dict[int, dict[str, float]]]:
    if len(registry) == 0:
        raise TaskError("no registered tasks")
    batches = registry.draw()
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    total, per_language = laml_loss(state.model, batches, loss_fn)
    total.backward()
    state.apply_update()
    return state, per_language


@torch.no_grad()
def probe_loss(model: torch.nn.Module, items: Sequence[Any], loss_fn: LossFn, key: str = "total") -> float:
    """Loss on a fixed batch with the model in eval mode."""
    was_training = model.training
    model.eval()
    try:
        _, parts = loss_fn(model, items)
    finally:
        model.train(was_training)
    return parts[key]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, state: TrainState, registry: TaskRegistry | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "model_state": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "scheduler": state.scheduler.state_dict(),
        "config": state.config.to_dict(),
        "step": state.step,
        "torch_rng": torch.get_rng_state(),
        "registry": registry.state_dict() if registry is not None else None,
        "meta": {**state.extra, **(meta or {})},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(blob, tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def read_checkpoint(path: str | Path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a training checkpoint ({blob.get('format')!r})")
    return blob


def restore_state(blob: dict, model: torch.nn.Module, registry: TaskRegistry | None = None) -> TrainState:
    """Rebuild a train state around ``model`` (constructed to match ``blob``)."""
    model.load_state_dict(blob["model_state"])
    config = TrainConfig.from_dict(blob["config"])
    state = new_train_state(model, config, blob["step"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.scheduler.load_state_dict(blob["scheduler"])
    state.extra = dict(blob.get("meta") or {})
    torch.set_rng_state(blob["torch_rng"])
    if registry is not None and blob.get("registry") is not None:
        registry.load_state_dict(blob["registry"])
    return state


def _checkpoint_with_fallback(path: Path, state: TrainState, registry: TaskRegistry) -> Path:
    try:
        return save_checkpoint(path, state, registry)
    except OSError as exc:
        fallback = Path(tempfile.gettempdir()) / f"laml-tts-rescue-step{state.step}.pt"
        try:
            save_checkpoint(fallback, state, registry)
        except OSError:
            fallback = None
        raise CheckpointError(f"checkpoint write to {path} failed: {exc}; rescue copy: {fallback}", state, fallback) from exc


class LossLog:
    """Append-only CSV: step, language_id, then loss components."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []

    def write(self, step: int, per_language: dict[int, dict[str, float]]) -> None:
        for lang, parts in per_language.items():
            row = {"step": step, "language_id": lang, **parts}
            self.rows.append(row)
            if self.path is None:
                continue
            new = not self.path.exists()
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(row))
                if new:
                    writer.writeheader()
                writer.writerow(row)


# ---------------------------------------------------------------------------
# procedures


def pretrain(
    registry: TaskRegistry,
    state: TrainState,
    loss_fn: LossFn,
    *,
    steps: int | None = None,
    checkpoint_dir: str | Path | None = None,
    loss_log: LossLog | None = None,
    callback: Callable[[TrainState, dict], None] | None = None,
) -> TrainState:
    """Run LAML steps until ``state.step`` reaches ``steps`` (defaults to the config)."""
    target = state.config.steps if steps is None else steps
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    every = max(1, state.config.checkpoint_every)
    while state.step < target:
        state, per_language = laml_step(registry, state, loss_fn)
        if loss_log is not None:
            loss_log.write(state.step, per_language)
        if callback is not None:
            callback(state, per_language)
        if state.step % max(1, state.config.log_every) == 0:
            summary = ", ".join(f"{k}: {v['total']:.4f}" for k, v in per_language.items())
            log.info("step %d | %s", state.step, summary)
        if ckpt_dir is not None and (state.step % every == 0 or state.step == target):
            _checkpoint_with_fallback(ckpt_dir / f"step{state.step:07d}.pt", state, registry)
            _checkpoint_with_fallback(ckpt_dir / "latest.pt", state, registry)
    return state


def finetune_lowresource(
    state: TrainState,
    new_items: Sequence[Any],
    new_language_id: int,
    registry: TaskRegistry,
    loss_fn: LossFn,
    *,
    steps: int | None = None,
    add_language: Callable[[], int] | None = None,
    checkpoint_dir: str | Path | None = None,
    loss_log: LossLog | None = None,
    callback: Callable[[TrainState, dict], None] | None = None,
) -> TrainState:
    """Add the small corpus as one more task and keep training on all tasks jointly.

    ``add_language`` grows the model's language table (defaults to the
    model's own ``add_language``) and must return ``new_language_id``. The
    optimizer is rebuilt around the grown parameter set, with a fresh warmup.
    """
    if new_language_id in registry:
        raise TaskError(f"language id {new_language_id} collides with a pretraining language")
    if not new_items:
        raise TaskError(f"task for language {new_language_id} has no samples")
    grow = add_language or getattr(state.model, "add_language", None)
    if grow is not None:
        got = grow()
        if got != new_language_id:
            raise TaskError(f"model assigned language id {got}, expected {new_language_id}")
    registry.register(new_language_id, new_items, seed=state.config.seed)
    n = state.config.finetune_steps if steps is None else steps
    fresh = new_train_state(state.model, state.config, 0)
    fresh.extra = dict(state.extra)
    return pretrain(registry, fresh, loss_fn, steps=n, checkpoint_dir=checkpoint_dir, loss_log=loss_log, callback=callback)


def iterate_losses(rows: Iterable[dict], language_id: int, key: str = "total") -> list[float]:
    return [r[key] for r in rows if r["language_id"] == language_id]
