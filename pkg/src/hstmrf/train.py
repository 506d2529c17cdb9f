"""Deterministic training loop with checkpointing and structured run logs."""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SegSample, augment, batch_arrays
from .losses import total_loss
from .metrics import EvalResult, evaluate
from .model import HSTMRF
from .optim import AdamW, Schedule, lr_at
from .rng import DROPOUT, SHUFFLE, make_rng
from .tensor import NonFiniteError, Tensor

logger = logging.getLogger(__name__)


def _plain(obj) -> dict:
    return json.loads(json.dumps(asdict(obj)))


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int, last_checkpoint: Optional[Path]):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainResult:
    model: HSTMRF
    history: list[dict] = field(default_factory=list)
    final: Optional[EvalResult] = None
    step: int = 0


def evaluate_model(model: HSTMRF, samples: Sequence[SegSample], batch_size: int = 8) -> EvalResult:
    preds, gts = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images, masks = batch_arrays(chunk)
        logits = model.predict(images)
        preds.extend(logits)
        gts.extend(masks)
    return evaluate(preds, gts)


class Trainer:
    """Owns model, optimizer and schedule for one run.

    Batch composition and dropout masks for step ``k`` are derived from
    (seed, k) alone, so a run resumed from a checkpoint replays exactly.
    """

    def __init__(self, cfg: RunConfig, train_set: Sequence[SegSample],
                 eval_set: Optional[Sequence[SegSample]] = None, out_dir: Union[str, Path, None] = None,
                 steps: Optional[int] = None, augment_data: bool = False):
        if not train_set:
            raise ValueError("training set is empty")
        self.cfg = cfg
        self.train_set = list(train_set)
        self.eval_set = list(eval_set) if eval_set is not None else self.train_set
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.total_steps = steps if steps is not None else cfg.train.steps
        self.augment = augment_data
        self.model = HSTMRF(cfg.resolved_model(), cfg.seed)
        tc = cfg.train
        self.optim = AdamW(self.model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
        warmup = min(int(round(tc.warmup_frac * self.total_steps)), self.total_steps - 1)
        self.schedule = Schedule(warmup, self.total_steps, tc.lr, tc.lr_min)
        self.step = 0
        self.history: list[dict] = []
        self.last_checkpoint: Optional[Path] = None

    # ------------------------------------------------------------ batching
    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.train_set) / self.cfg.train.batch_size)

    def batch_for(self, step: int) -> list[SegSample]:
        epoch, k = divmod(step, self.batches_per_epoch)
        order = make_rng(self.cfg.seed, SHUFFLE, epoch).permutation(len(self.train_set))
        bs = self.cfg.train.batch_size
        picked = [self.train_set[i] for i in order[k * bs:(k + 1) * bs]]
        if self.augment:
            rng = make_rng(self.cfg.seed, SHUFFLE, epoch, k + 1)
            picked = [augment(s, rng) for s in picked]
        return picked

    # ---------------------------------------------------------------- step
    def train_step(self) -> dict:
        model = self.model
        model.train()
        images, masks = batch_arrays(self.batch_for(self.step), dtype=model.parameters()[0].dtype)
        lr = lr_at(self.step + 1, self.schedule)
        details: dict = {}
        self.optim.zero_grad()
        logits, aux1, aux3 = model(Tensor(images), make_rng(self.cfg.seed, DROPOUT, self.step))
        loss = total_loss(logits, aux1, aux3, masks, self.cfg.loss, details)
        if not math.isfinite(loss.item()):
            raise NonFiniteError("total_loss")
        T.backward(loss)
        if self.cfg.train.grad_clip is not None:
            details["grad_norm"] = self.optim.clip_grad_norm(self.cfg.train.grad_clip)
        self.optim.step(lr)
        self.step += 1
        record = {"step": self.step, "lr": lr, "loss": loss.item()}
        record.update(details)
        return record

    def run(self, until: Optional[int] = None, log_path: Optional[Path] = None) -> TrainResult:
        until = self.total_steps if until is None else min(until, self.total_steps)
        tc = self.cfg.train
        log = None
        if log_path is None and self.out_dir is not None:
            log_path = self.out_dir / "log.txt"
        if log_path is not None:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            log = open(log_path, "a", encoding="utf-8")
        if self.step == 0:
            self._emit(log, {"config": self.cfg.to_dict(),
                             "resolved_model": _plain(self.model.cfg)})
        try:
            while self.step < until:
                try:
                    record = self.train_step()
                except NonFiniteError as exc:
                    err = {"step": self.step + 1, "error": str(exc)}
                    self._emit(log, err)
                    raise TrainingAborted(f"step {self.step + 1}: {exc}; last good checkpoint: "
                                          f"{self.last_checkpoint}", self.step, self.last_checkpoint) from exc
                if tc.eval_every and self.step % tc.eval_every == 0 or self.step == self.total_steps:
                    record["eval"] = evaluate_model(self.model, self.eval_set).as_dict()
                self.history.append(record)
                self._emit(log, record)
                if self.out_dir is not None and (
                        (tc.checkpoint_every and self.step % tc.checkpoint_every == 0)
                        or self.step == self.total_steps):
                    self.save(self.out_dir / "checkpoints" / f"step_{self.step:06d}.hstm")
        finally:
            if log is not None:
                log.close()
        result = TrainResult(self.model, self.history, step=self.step)
        if self.step == self.total_steps:
            result.final = evaluate_model(self.model, self.eval_set)
            if self.out_dir is not None:
                (self.out_dir / "metrics.txt").write_text(
                    json.dumps({"step": self.step, **result.final.as_dict()}, sort_keys=True) + "\n")
        return result

    @staticmethod
    def _emit(log, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        logger.info(line)
        if log is not None:
            log.write(line + "\n")
            log.flush()

    # -------------------------------------------------------- checkpoints
    def checkpoint(self) -> Checkpoint:
        names = [n for n, _ in self.model.named_parameters()]
        return Checkpoint(
            config=self.cfg.to_dict(), step=self.step, seed=self.cfg.seed,
            params=OrderedDict((n, p.data) for n, p in self.model.named_parameters()),
            buffers=OrderedDict(self.model.named_buffers()),
            adam_m=OrderedDict(zip(names, self.optim.m)),
            adam_v=OrderedDict(zip(names, self.optim.v)),
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        save_checkpoint(self.checkpoint(), path)
        self.last_checkpoint = path
        return path

    def restore(self, ckpt: Union[Checkpoint, str, Path]) -> None:
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        if ckpt.config.get("model") != self.cfg.to_dict()["model"] or \
                ckpt.config.get("ablation") != self.cfg.ablation:
            raise CheckpointError("checkpoint was written for a different model configuration")
        if ckpt.seed != self.cfg.seed:
            raise CheckpointError(f"checkpoint seed {ckpt.seed} differs from config seed {self.cfg.seed}")
        self.model.load_state_dict(ckpt.model_state())
        names = [n for n, _ in self.model.named_parameters()]
        for i, n in enumerate(names):
            self.optim.m[i] = np.array(ckpt.adam_m[n], dtype=self.optim.m[i].dtype)
            self.optim.v[i] = np.array(ckpt.adam_v[n], dtype=self.optim.v[i].dtype)
        self.optim.step_count = ckpt.step
        self.step = ckpt.step


def train(cfg: RunConfig, dataset: Sequence[SegSample], epochs: Optional[int] = None,
          out_dir: Union[str, Path, None] = None, eval_set: Optional[Sequence[SegSample]] = None,
          resume: Union[str, Path, None] = None) -> TrainResult:
    """Train for ``epochs`` passes over ``dataset`` (or ``cfg.train.steps`` steps)."""
    if not dataset:
        raise ValueError("training set is empty")
    steps = None
    if epochs is not None:
        steps = epochs * math.ceil(len(dataset) / cfg.train.batch_size)
    trainer = Trainer(cfg, dataset, eval_set, out_dir, steps)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run()
