"""Desk-scale phenomenon experiment: baseline (alpha = 0) vs IDFE training
on synthetic biased corpora, measured by a linear domain probe on seen
domains and EER on an unseen-bias domain.

Geometry: short utterances (1-2 frames over 3 layers) and no frame
encoder, so that per-utterance noise is large enough relative to the
bias for removal to register in 10 epochs.
"""

from dataclasses import dataclass, replace

import numpy as np

from .corpus import UNSEEN_NAME, SynthSpec, synth_generate
from .metrics import EmbeddingDump, domain_probe, eer_table
from .model import IdfeModel
from .pipeline import embed_corpus, score_corpus
from .training import TrainConfig, model_config_for, train

PHENOMENON_SPEC = SynthSpec(num_domains=3, bias_magnitude=2.0, class_separation=1.0,
                            noise_std=1.0, min_frames=1, max_frames=2)
SEGMENT_FRAMES = 2
FRAME_RATE = 50.0


@dataclass(frozen=True)
class PhenomenonSettings:
    spec: SynthSpec = PHENOMENON_SPEC
    train_per_class: int = 300
    eval_per_class: int = 100
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    segment_frames: int = SEGMENT_FRAMES
    use_encoder: bool = False


@dataclass(frozen=True)
class PhenomenonRun:
    seed: int
    alpha: float
    probe_accuracy: float
    eers: dict  # domain name -> EER

    @property
    def unseen_eer(self):
        return self.eers[UNSEEN_NAME]

    @property
    def seen_pooled_eer(self):
        return float(np.mean([v for k, v in self.eers.items() if k != UNSEEN_NAME]))


def _seen_only(dump: EmbeddingDump, num_seen):
    keep = dump.y_d < num_seen
    return EmbeddingDump([u for u, k in zip(dump.utt_ids, keep) if k],
                         dump.y_s[keep], dump.y_d[keep], dump.vectors[keep])


def run_phenomenon(seed, alpha, settings: PhenomenonSettings = PhenomenonSettings()):
    """Train one model and measure it. Data, init and batching all derive from ``seed``."""
    spec = settings.spec
    train_set = synth_generate(spec, settings.train_per_class, seed=1000 + seed, split="train")
    eval_set = synth_generate(spec, settings.eval_per_class, seed=2000 + seed, split="eval")
    config = TrainConfig(alpha=alpha, lr=settings.lr, batch_size=settings.batch_size,
                         epochs=settings.epochs, seed=seed,
                         segment_seconds=settings.segment_frames / FRAME_RATE, frame_rate=FRAME_RATE)
    model = IdfeModel.create(
        model_config_for(train_set, spec.frame_dim, spec.num_layers, use_encoder=settings.use_encoder),
        seed)
    train(train_set, config, model)
    eers = eer_table(score_corpus(model, eval_set))
    probe = domain_probe(_seen_only(embed_corpus(model, eval_set), spec.num_domains), seed=seed)
    return PhenomenonRun(seed, alpha, probe.accuracy, eers)


def run_sweep(seeds, alphas, settings: PhenomenonSettings = PhenomenonSettings()):
    """``{alpha: [PhenomenonRun per seed]}``."""
    return {a: [run_phenomenon(s, a, settings) for s in seeds] for a in alphas}


def relative_reduction(baseline, treated):
    """Per-seed ``(baseline - treated) / baseline``; 0 where the baseline is 0."""
    b = np.asarray(baseline, dtype=np.float64)
    t = np.asarray(treated, dtype=np.float64)
    return np.where(b > 0, (b - t) / np.where(b > 0, b, 1.0), 0.0)


def with_overrides(settings: PhenomenonSettings, **spec_overrides):
    return replace(settings, spec=replace(settings.spec, **spec_overrides))
