"""Joint spoof/domain training with gradient reversal and Adam.

The objective per batch is ``L_s + alpha * L_d`` where ``L_d`` is computed
on the domain head's logits behind a reversal layer of strength ``lambda``.
``lambda`` follows ``2 / (1 + exp(-gamma * p)) - 1`` over training
progress ``p`` (optimizer steps done / total steps).

With ``alpha == 0`` the domain head still learns, from a detached copy of
the embedding, so it reports how decodable the domain is without pushing
anything back into the feature extractor.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .audio import crop_or_wrap
from .checkpoint import save_checkpoint
from .corpus import CorpusSet, make_batches
from .errors import ConfigError, ParameterError, TrainingDivergedError
from .model import HeadConfig, IdfeModel, MhfaConfig, ModelConfig
from .optim import Adam

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    lambda_gamma: float = 10.0
    class_weight_mode: str = "ratio"
    seed: int = 0
    segment_seconds: float = 4.0
    frame_rate: float = 50.0
    precision: str = "float32"

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (batch norm), got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.class_weight_mode not in ("ratio", "none"):
            raise ConfigError(f"class_weight_mode must be 'ratio' or 'none', got {self.class_weight_mode!r}")
        if self.segment_seconds <= 0 or self.frame_rate <= 0:
            raise ConfigError("segment_seconds and frame_rate must be positive")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    @property
    def segment_frames(self):
        return max(1, int(round(self.segment_seconds * self.frame_rate)))

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def lambda_at(progress, gamma=10.0):
    """Reversal strength at training progress ``progress`` in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise ParameterError(f"training progress must be in [0, 1], got {progress}")
    return 2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0


def class_weights(n_bonafide, n_spoof):
    """Inverse-frequency weights ``[w_bonafide, w_spoof]``; balanced data gives ``[1, 1]``."""
    if n_bonafide <= 0 or n_spoof <= 0:
        raise ConfigError(f"both classes need samples, got bona fide={n_bonafide}, spoof={n_spoof}")
    total = n_bonafide + n_spoof
    return np.array([total / (2.0 * n_bonafide), total / (2.0 * n_spoof)])


def losses(model: IdfeModel, stacks, y_s, y_d, lam, rng, tape, class_weights=None,
           training=True, reverse_gradient=True, detach_domain=False):
    """Forward pass returning ``(L_s, L_d, outputs)`` as tape tensors."""
    out = model.forward(stacks, lam=lam, training=training, rng=rng, tape=tape,
                        reverse_gradient=reverse_gradient, detach_domain=detach_domain)
    loss_s = ad.cross_entropy(out.spoof_logits, y_s, class_weights)
    loss_d = ad.cross_entropy(out.domain_logits, y_d)
    return loss_s, loss_d, out


def objective(loss_s, loss_d, alpha):
    """``L_s + alpha * L_d``; at ``alpha == 0`` the (detached) domain loss is added unscaled."""
    return ad.add(loss_s, ad.scale(loss_d, alpha if alpha > 0 else 1.0))


@dataclass
class StepResult:
    loss_s: float
    loss_d: float
    spoof_acc: float
    domain_acc: float


def train_step(model: IdfeModel, opt: Adam, stacks, y_s, y_d, alpha, lam, rng,
               class_weights=None, step=None):
    """One forward/backward pass and one Adam update of every parameter."""
    tape = ad.Tape()
    loss_s, loss_d, out = losses(model, stacks, y_s, y_d, lam, rng, tape, class_weights,
                                 detach_domain=alpha == 0)
    total = objective(loss_s, loss_d, alpha)
    if not np.isfinite(total.data):
        raise TrainingDivergedError(step, f"loss_s={float(loss_s.data)}, loss_d={float(loss_d.data)}")
    grads = tape.backward(total)
    opt.step(model.params.tensors, grads)
    return StepResult(
        float(loss_s.data), float(loss_d.data),
        float(np.mean(out.spoof_logits.data.argmax(axis=1) == y_s)),
        float(np.mean(out.domain_logits.data.argmax(axis=1) == y_d)),
    )


@dataclass
class StepContext:
    """What a training callback sees just before an update."""

    step: int
    total_steps: int
    epoch: int
    stacks: np.ndarray
    y_s: np.ndarray
    y_d: np.ndarray
    lam: float
    dropout_seed: tuple
    class_weights: np.ndarray
    model: IdfeModel


@dataclass
class EpochLog:
    epoch: int
    loss_s: float
    loss_d: float
    lam: float
    domain_acc: float
    spoof_acc: float


@dataclass
class TrainResult:
    model: IdfeModel
    epochs: list = field(default_factory=list)


def model_config_for(dataset: CorpusSet, frame_dim, num_layers, num_heads=4, value_dim=16,
                     embedding_dim=64, hidden_dim=128, dropout=0.2, use_encoder=True):
    n_dom = max(2, dataset.num_domains)
    return ModelConfig(
        mhfa=MhfaConfig(num_layers, frame_dim, num_heads, value_dim, embedding_dim),
        spoof_head=HeadConfig(hidden_dim, dropout, 2),
        domain_head=HeadConfig(hidden_dim, dropout, n_dom),
        use_encoder=use_encoder,
    )


def require_domains(num_domains, alpha):
    if alpha > 0 and num_domains < 2:
        raise ConfigError(
            f"domain adversarial objective requires D >= 2 training domains, got {num_domains}")


def train(dataset: CorpusSet, config: TrainConfig, model: IdfeModel, out_dir=None,
          callback: Optional[Callable[[StepContext], None]] = None):
    """Train ``model`` in place for ``config.epochs`` epochs.

    With ``out_dir``, writes ``checkpoints/epochNNN.idfc`` after each
    epoch, ``model.idfc`` at the end, and the TSV epoch log ``epochs.tsv``.
    """
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    require_domains(dataset.num_domains, config.alpha)
    if model.num_domains < dataset.num_domains:
        raise ConfigError(
            f"domain head has {model.num_domains} outputs but the data has {dataset.num_domains} domains")
    dataset = dataset.loaded()
    if config.class_weight_mode == "ratio":
        weights = class_weights(*dataset.class_counts())
    else:
        weights = np.ones(2)
    steps_per_epoch = len(dataset) // config.batch_size
    if steps_per_epoch == 0:
        raise ConfigError(f"{len(dataset)} utterances do not fill one batch of {config.batch_size}")
    total = steps_per_epoch * config.epochs
    n_frames = config.segment_frames
    model.params = model.params.astype(config.dtype)
    opt = Adam(model.params.tensors, lr=config.lr)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        (out_path / "checkpoints").mkdir(parents=True, exist_ok=True)

    result = TrainResult(model)
    for epoch in range(config.epochs):
        rows = []
        lam = 0.0
        for k, batch in enumerate(make_batches(dataset, config.batch_size, config.seed, epoch)):
            step = epoch * steps_per_epoch + k
            lam = lambda_at(step / total, config.lambda_gamma)
            crop_rng = np.random.default_rng([config.seed, epoch, k, 0])
            stacks = np.stack([crop_or_wrap(s, n_frames, crop_rng, axis=1)
                               for s in batch.stacks()]).astype(config.dtype)
            dropout_seed = (config.seed, epoch, k, 1)
            if callback is not None:
                callback(StepContext(step, total, epoch, stacks, batch.y_s, batch.y_d, lam,
                                     dropout_seed, weights, model))
            rows.append(train_step(model, opt, stacks, batch.y_s, batch.y_d, config.alpha, lam,
                                   np.random.default_rng(dropout_seed), weights, step))
        entry = EpochLog(epoch + 1,
                         float(np.mean([r.loss_s for r in rows])),
                         float(np.mean([r.loss_d for r in rows])),
                         lam,
                         float(np.mean([r.domain_acc for r in rows])),
                         float(np.mean([r.spoof_acc for r in rows])))
        result.epochs.append(entry)
        log.info("epoch %d loss_s=%.4f loss_d=%.4f lambda=%.4f domain_acc=%.3f",
                 entry.epoch, entry.loss_s, entry.loss_d, entry.lam, entry.domain_acc)
        if out_path is not None:
            save_checkpoint(out_path / "checkpoints" / f"epoch{entry.epoch:03d}.idfc", model.params)
            write_epoch_log(out_path / "epochs.tsv", result.epochs)
    if out_path is not None:
        save_checkpoint(out_path / "model.idfc", model.params)
    return result


def write_epoch_log(path, entries):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["epoch", "loss_s", "loss_d", "lambda", "domain_acc"])
        for e in entries:
            w.writerow([e.epoch, f"{e.loss_s:.9g}", f"{e.loss_d:.9g}", f"{e.lam:.9g}",
                        f"{e.domain_acc:.9g}"])


def read_epoch_log(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return [EpochLog(int(r["epoch"]), float(r["loss_s"]), float(r["loss_d"]), float(r["lambda"]),
                     float(r["domain_acc"]), float("nan")) for r in rows]
