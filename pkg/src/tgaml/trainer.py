"""Two-phase training loop with early stopping.

Each epoch first trains only the LSTM over node batches, with node encoder
outputs held constant, then freezes the LSTM and takes one full-graph step on
the node encoders and the classifier.
"""

from __future__ import annotations

import json
import logging
import math
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ConfigError, TgamlError
from . import autodiff as ad
from .autodiff import Adam, Tensor
from .graph import rng
from .losses import LossFn, make_loss
from .metrics import evaluate
from .model import GraphInputs, Model

log = logging.getLogger(__name__)

LSTM = "lstm"
NON_LSTM = ("encoder", "classifier")
SELECTION_METRICS = ("f1", "mcc", "auc")


class TrainingError(TgamlError):
    pass


class IsolationError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 1024
    patience: int = 20
    max_epochs: int = 200
    selection_metric: str = "f1"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threshold: float = 0.5
    debug: bool = False
    track_memory: bool = False

    def __post_init__(self):
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("patience, batch_size and max_epochs must be >= 1")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(f"selection_metric must be one of {SELECTION_METRICS}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class EpochReport:
    epoch: int
    phase1_loss: float
    phase2_loss: float
    validation: dict
    wall_time: float
    phase1_batches: int = 0
    phase1_peak_bytes: int | None = None
    digests: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class FitResult:
    best_epoch: int
    best_score: float
    best_state: dict[str, np.ndarray]
    history: list[EpochReport]
    stopped_early: bool


def node_batches(node_ids: Sequence[int], batch_size: int, seed: int) -> list[np.ndarray]:
    """Shuffled partition of ``node_ids`` into batches of at most ``batch_size``."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    ids = np.asarray(node_ids, dtype=np.int64)
    ids = ids[rng(seed, 11).permutation(len(ids))]
    return [ids[i:i + batch_size] for i in range(0, len(ids), batch_size)]


def _finite(loss: Tensor, where: str, model: Model) -> float:
    value = float(loss.value)
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss in {where}; parameter digest {model.params.digest()[:16]}"
        )
    return value


class Trainer:
    def __init__(self, model: Model, train: GraphInputs, validation: GraphInputs | None,
                 config: TrainConfig, loss_fn: LossFn | None = None):
        self.model = model
        self.train = train
        self.validation = validation
        self.config = config
        self.loss_fn = loss_fn or make_loss("mcc")
        self.optimizer = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.eps)

    def _digests(self) -> dict[str, str]:
        return {g: self.model.params.digest(g) for g in self.model.params.groups}

    def phase1(self, epoch: int) -> tuple[float, int, int | None]:
        """LSTM-only updates over node batches; returns mean loss, batch count and peak bytes."""
        params, cfg = self.model.params, self.config
        encoded = [Tensor(e.value) for e in self.model.encode(self.train)]
        batches = node_batches(np.arange(self.train.num_nodes), cfg.batch_size, cfg.seed * 1000003 + epoch)
        tracing = cfg.track_memory
        if tracing:
            started = not tracemalloc.is_tracing()
            if started:
                tracemalloc.start()
            base = tracemalloc.get_traced_memory()[0]
            tracemalloc.reset_peak()
        losses = []
        for batch in batches:
            params.zero_grad()
            probs = self.model.head(self.train, encoded, nodes=batch)
            loss = self.loss_fn(probs, self.train.labels[batch])
            losses.append(_finite(loss, f"epoch {epoch} phase 1", self.model))
            ad.backward(loss)
            self.optimizer.step([LSTM])
            del probs, loss
        peak = None
        if tracing:
            peak = tracemalloc.get_traced_memory()[1] - base
            if started:
                tracemalloc.stop()
        params.zero_grad()
        return float(np.mean(losses)), len(batches), peak

    def phase2(self, epoch: int) -> float:
        params = self.model.params
        frozen = [params[n] for n in params.names(LSTM)]
        for p in frozen:
            p.requires_grad = False
        try:
            params.zero_grad()
            gen = rng(self.config.seed, 12, epoch) if self.model.config.dropout > 0 else None
            probs = self.model.forward(self.train, gen)
            loss = self.loss_fn(probs, self.train.labels)
            value = _finite(loss, f"epoch {epoch} phase 2", self.model)
            ad.backward(loss)
            self.optimizer.step(NON_LSTM)
        finally:
            for p in frozen:
                p.requires_grad = True
            params.zero_grad()
        return value

    def validate(self) -> dict:
        if self.validation is None:
            return {}
        probs = self.model.forward(self.validation)
        loss = float(self.loss_fn(probs, self.validation.labels).value)
        rep = evaluate(probs.value, self.validation.labels, self.config.threshold, tune_threshold=False)
        return {"loss": loss, "f1": rep.f1, "mcc": rep.mcc, "auc": rep.auc,
                "precision": rep.precision, "recall": rep.recall, "accuracy": rep.accuracy}

    def train_epoch(self, epoch: int) -> EpochReport:
        t0 = time.perf_counter()
        before = self._digests()
        p1_loss, nbatches, peak = self.phase1(epoch)
        mid = self._digests()
        p2_loss = self.phase2(epoch)
        after = self._digests()
        if self.config.debug:
            for g in NON_LSTM:
                if before[g] != mid[g]:
                    raise IsolationError(f"phase 1 modified group {g!r}")
            if mid[LSTM] != after[LSTM]:
                raise IsolationError("phase 2 modified the LSTM group")
        val = self.validate()
        digests = {"before": before, "after_phase1": mid, "after_phase2": after}
        return EpochReport(epoch, p1_loss, p2_loss, val, time.perf_counter() - t0,
                           nbatches, peak, digests)

    def fit(self, run_dir: str | Path | None = None) -> FitResult:
        if self.validation is None or self.validation.num_nodes == 0:
            raise ConfigError("fit needs a non-empty validation split")
        cfg = self.config
        history: list[EpochReport] = []
        best_score, best_epoch, best_state = -math.inf, 0, self.model.params.state()
        stale = 0
        run = Path(run_dir) if run_dir else None
        if run:
            run.mkdir(parents=True, exist_ok=True)
            (run / "history.jsonl").write_text("")
        for epoch in range(1, cfg.max_epochs + 1):
            report = self.train_epoch(epoch)
            history.append(report)
            score = report.validation.get(cfg.selection_metric, math.nan)
            usable = math.isfinite(report.validation.get("loss", math.nan)) and math.isfinite(score)
            if usable and score > best_score:
                best_score, best_epoch, stale = score, epoch, 0
                best_state = self.model.params.state()
                if run:
                    ad.save_checkpoint(run / "best.ckpt", best_state)
            else:
                stale += 1
            log.info("epoch %d: phase1 %.4f phase2 %.4f val %s=%.4f%s", epoch, report.phase1_loss,
                     report.phase2_loss, cfg.selection_metric, score, " *" if stale == 0 else "")
            if run:
                with (run / "history.jsonl").open("a") as fh:
                    fh.write(report.to_json() + "\n")
                ad.save_checkpoint(run / "last.ckpt", {**self.model.params.state(), **self.optimizer.state()})
            if stale >= cfg.patience:
                return FitResult(best_epoch, best_score, best_state, history, True)
        return FitResult(best_epoch, best_score, best_state, history, False)
