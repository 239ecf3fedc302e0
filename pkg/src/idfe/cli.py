"""``idfe`` command line: synth, prep, train, eval, probe, export-emb.

Every run creates ``<out>/<command>-<config hash>-<timestamp>/`` holding
its outputs and ``config.resolved`` (the full resolved configuration).
The run directory is printed as the last line of stdout.

Exit codes: 0 success, 2 configuration or validation error, 3 training
diverged, 1 anything else. ``IDFE_THREADS`` caps BLAS worker threads.
"""

import argparse
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .audio import AudioAssets, augment, read_wav, segment, trim_edges, write_wav
from .checkpoint import load_checkpoint
from .config import Config, schema_text
from .corpus import (Corpus, CorpusSet, SynthSpec, UtteranceRecord, compose_case, load_manifest,
                     synth_generate, write_embedding, write_manifest)
from .errors import EmptyAudioError, IdfeError, TrainingDivergedError
from .metrics import domain_probe, eer_table, export_embeddings, export_scores, pooled_eer
from .model import IdfeModel
from .pipeline import embed_corpus, score_corpus
from .training import TrainConfig, model_config_for, require_domains, train

log = logging.getLogger("idfe")

EXIT_OK, EXIT_UNEXPECTED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(IdfeError, ValueError):
    pass


def _run_dir(out, command, config):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{command}-{config.digest()}-{stamp}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


def _require(config, name):
    value = getattr(config, name)
    if not value:
        raise UsageError(f"{name} is required for this command (set it in the config or with --set {name}=...)")
    return value


def _synth_spec(config):
    return SynthSpec(num_domains=config.num_domains, frame_dim=config.frame_dim,
                     num_layers=config.num_layers, bias_magnitude=config.bias_magnitude,
                     class_separation=config.class_separation, noise_std=config.noise_std,
                     min_frames=config.min_frames, max_frames=config.max_frames,
                     direction_seed=config.direction_seed, unseen_domain=config.unseen_domain)


def _print_counts(corpus_set):
    counts = corpus_set.counts()
    print("domain\tbonafide\tspoof")
    for name in corpus_set.names:
        print(f"{name}\t{counts[(name, 'bonafide')]}\t{counts[(name, 'spoof')]}")


def cmd_synth(config, run_dir):
    data = synth_generate(_synth_spec(config), config.per_class, config.seed, config.split)
    stack_dir = run_dir / "stacks"
    stack_dir.mkdir()
    corpora = []
    for c in data.corpora:
        records = []
        for r in c.records:
            path = stack_dir / f"{r.utt_id}.idf1"
            write_embedding(path, r.stack)
            records.append(UtteranceRecord(r.utt_id, r.y_s, r.y_d, str(path)))
        corpora.append(Corpus(c.name, tuple(records)))
    out = CorpusSet(corpora)
    write_manifest(run_dir / "manifest.tsv", out)
    _print_counts(out)


def cmd_prep(config, run_dir):
    data = load_manifest(_require(config, "manifest"))
    assets = AudioAssets.from_manifest(config.assets) if config.assets else AudioAssets()
    policy = None if config.augment == "random" else config.augment
    wav_dir = run_dir / "wav"
    wav_dir.mkdir()
    corpora = []
    for c in data.corpora:
        records = []
        for r in c.records:
            rng = np.random.default_rng([config.seed, r.y_d, len(records)])
            w = read_wav(r.path)
            steps = ["trim", "augment"] if config.prep_order == "trim_first" else ["augment", "trim"]
            for step in steps:
                if step == "trim":
                    try:
                        w = trim_edges(w, config.top_db, config.trim_frame, config.trim_hop)
                    except EmptyAudioError:
                        log.warning("%s: every frame is silent; kept untrimmed", r.utt_id)
                elif config.augment != "none":
                    w = augment(w, policy, assets, rng).waveform
            if config.prep_segment_seconds > 0:
                w = segment(w, config.prep_segment_seconds, rng)
            path = wav_dir / f"{r.utt_id}.wav"
            write_wav(path, w)
            records.append(UtteranceRecord(r.utt_id, r.y_s, r.y_d, str(path)))
        corpora.append(Corpus(c.name, tuple(records)))
    out = CorpusSet(corpora)
    write_manifest(run_dir / "manifest.tsv", out)
    _print_counts(out)


def _training_data(config):
    data = load_manifest(_require(config, "manifest"))
    if config.case:
        names = [n.strip() for n in config.corpora.split(",")] if config.corpora else None
        data = compose_case(config.case, data, names)
    return data


def cmd_train(config, run_dir):
    data = _training_data(config)
    tc = TrainConfig(alpha=config.alpha, lr=config.lr, batch_size=config.batch_size,
                     epochs=config.epochs, lambda_gamma=config.lambda_gamma,
                     class_weight_mode=config.class_weight_mode, seed=config.seed,
                     segment_seconds=config.segment_seconds, frame_rate=config.frame_rate,
                     precision=config.precision)
    require_domains(data.num_domains, tc.alpha)
    first = data.records[0].load()
    num_layers, _, frame_dim = first.shape
    model = IdfeModel.create(
        model_config_for(data, frame_dim, num_layers, config.num_heads, config.value_dim,
                         config.embedding_dim, config.hidden_dim, config.dropout, config.use_encoder),
        config.seed, tc.dtype)
    result = train(data, tc, model, out_dir=run_dir)
    print("epoch\tloss_s\tloss_d\tlambda\tdomain_acc")
    for e in result.epochs:
        print(f"{e.epoch}\t{e.loss_s:.4f}\t{e.loss_d:.4f}\t{e.lam:.4f}\t{e.domain_acc:.3f}")


def _model_and_data(config):
    params = load_checkpoint(_require(config, "checkpoint"))
    model = IdfeModel.from_params(params, config.dropout, config.dropout)
    data = load_manifest(_require(config, "manifest")).loaded()
    mhfa = model.config.mhfa
    for r in data.records:
        layers, frames, dim = r.stack.shape
        if layers != mhfa.num_layers or dim != mhfa.frame_dim:
            raise UsageError(
                f"{r.utt_id}: stack is [L={layers}, D={dim}] but the checkpoint expects "
                f"[L={mhfa.num_layers}, D={mhfa.frame_dim}]")
        if frames == 0:
            raise UsageError(f"{r.utt_id}: empty utterance")
    return model, data


def cmd_eval(config, run_dir):
    model, data = _model_and_data(config)
    scores = score_corpus(model, data)
    export_scores(scores, run_dir / "scores.tsv")
    table = eer_table(scores)
    rows = [(name, 100.0 * value) for name, value in table.items()]
    rows.append(("pooled", 100.0 * pooled_eer(table)))
    report = "domain\teer_percent\n" + "".join(f"{name}\t{value:.2f}\n" for name, value in rows)
    (run_dir / "report.tsv").write_text(report, encoding="utf-8")
    sys.stdout.write(report)


def cmd_probe(config, run_dir):
    model, data = _model_and_data(config)
    result = domain_probe(embed_corpus(model, data), config.probe_train_frac, config.seed,
                          config.probe_steps, config.probe_lr)
    report = ("accuracy\tchance\tn_train\tn_test\n"
              f"{result.accuracy:.4f}\t{result.chance:.4f}\t{result.n_train}\t{result.n_test}\n")
    (run_dir / "probe.tsv").write_text(report, encoding="utf-8")
    sys.stdout.write(report)


def cmd_export_emb(config, run_dir):
    model, data = _model_and_data(config)
    dump = embed_corpus(model, data)
    export_embeddings(dump, run_dir / "embeddings.tsv")
    print(f"{len(dump)} embeddings of dimension {model.config.mhfa.embedding_dim}")


COMMANDS = {
    "synth": (cmd_synth, "generate synthetic biased corpora (IDF1 stacks + manifest)"),
    "prep": (cmd_prep, "trim, augment and segment a wav manifest"),
    "train": (cmd_train, "train a model; writes checkpoints and epochs.tsv"),
    "eval": (cmd_eval, "score a manifest; writes scores.tsv and per-domain EERs"),
    "probe": (cmd_probe, "linear domain probe on frozen embeddings"),
    "export-emb": (cmd_export_emb, "write utterance embeddings as TSV"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="idfe", description=__doc__.split("\n\n")[0])
    parser.add_argument("--print-config", action="store_true",
                        help="print every config key with its default and exit")
    sub = parser.add_subparsers(dest="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                       help="override one config key (repeatable)")
        p.add_argument("--out", metavar="DIR", default="runs", help="parent of the run directory")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    return parser


def _thread_limit():
    raw = os.environ.get("IDFE_THREADS")
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"IDFE_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        sys.stdout.write(schema_text())
        return EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            config = Config.load(args.config, args.overrides, args.seed)
            run_dir = _run_dir(args.out, args.command, config)
            config.write_snapshot(run_dir / "config.resolved")
            COMMANDS[args.command][0](config, run_dir)
            print(f"run_dir\t{run_dir}")
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IdfeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("unexpected failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
