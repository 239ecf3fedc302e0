"""Multi-corpus datasets: manifests, ``IDF1`` layer-stack files, the
synthetic biased-corpus generator, training-case composition and batching.

A layer stack is a float array ``[L, T, D]`` (layers x frames x dims).
Spoof labels are integers: 0 = bona fide, 1 = spoof.
"""

import csv
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError, ValidationError

LABELS = ("bonafide", "spoof")
EMBEDDING_MAGIC = b"IDF1"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<4sIIII")  # magic, version, L, T, D

UNSEEN_NAME = "unseen"


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    y_s: int
    y_d: int
    path: Optional[str] = None
    stack: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def label(self):
        return LABELS[self.y_s]

    def load(self):
        if self.stack is not None:
            return self.stack
        if self.path is None:
            raise ValidationError(f"{self.utt_id}: no stack and no path")
        return read_embedding(self.path)


@dataclass(frozen=True)
class Corpus:
    name: str
    records: tuple


class CorpusSet:
    """Ordered corpora; the domain index of a record is its corpus position."""

    def __init__(self, corpora):
        self.corpora = tuple(corpora)
        for d, corpus in enumerate(self.corpora):
            seen = set()
            dupes = []
            for r in corpus.records:
                if r.y_d != d:
                    raise ValidationError(
                        f"corpus {corpus.name!r} at position {d} holds {r.utt_id} with domain {r.y_d}")
                if r.utt_id in seen:
                    dupes.append(r.utt_id)
                seen.add(r.utt_id)
            if dupes:
                raise ValidationError(f"duplicate utt_ids in corpus {corpus.name!r}: {sorted(dupes)}")

    @property
    def num_domains(self):
        return len(self.corpora)

    @property
    def names(self):
        return [c.name for c in self.corpora]

    @property
    def records(self):
        return [r for c in self.corpora for r in c.records]

    def __len__(self):
        return sum(len(c.records) for c in self.corpora)

    def __getitem__(self, name):
        for c in self.corpora:
            if c.name == name:
                return c
        raise KeyError(name)

    def counts(self):
        """``{(domain name, label): count}``."""
        tally = Counter((self.corpora[r.y_d].name, r.label) for r in self.records)
        return {(c.name, lab): tally.get((c.name, lab), 0) for c in self.corpora for lab in LABELS}

    def class_counts(self):
        tally = Counter(r.y_s for r in self.records)
        return tally.get(0, 0), tally.get(1, 0)

    def loaded(self):
        """Copy with every stack read into memory."""
        return CorpusSet(Corpus(c.name, tuple(replace(r, stack=r.load()) for r in c.records))
                         for c in self.corpora)

    def subset(self, names):
        """Corpora selected by name, re-indexed densely in the given order."""
        out = []
        for d, name in enumerate(names):
            try:
                corpus = self[name]
            except KeyError:
                raise ConfigError(f"source corpus {name!r} is not available; have {self.names}") from None
            out.append(Corpus(name, tuple(replace(r, y_d=d) for r in corpus.records)))
        return CorpusSet(out)


def load_manifest(path):
    """Read a TSV manifest with header ``utt_id label domain path [corpus]``.

    Relative paths resolve against the manifest's directory. The optional
    ``corpus`` column names each domain; otherwise domains are named
    ``domain0``, ``domain1``, ...
    """
    path = Path(path)
    problems = []
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader((line for line in fh if not line.startswith("#")), delimiter="\t")
        header = next(reader, None)
        if header is None or header[:4] != ["utt_id", "label", "domain", "path"]:
            raise ValidationError(f"{path}: header must start with utt_id, label, domain, path")
        has_name = len(header) > 4 and header[4] == "corpus"
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                problems.append(f"line {lineno}: expected {len(header)} columns, got {len(row)}")
                continue
            utt_id, label, domain, rel = row[:4]
            if label not in LABELS:
                problems.append(f"line {lineno}: unknown label {label!r} (accepted: {', '.join(LABELS)})")
                continue
            try:
                d = int(domain)
                if d < 0:
                    raise ValueError
            except ValueError:
                problems.append(f"line {lineno}: domain {domain!r} is not a non-negative integer")
                continue
            p = Path(rel)
            p = p if p.is_absolute() else path.parent / p
            rows.append((utt_id, LABELS.index(label), d, str(p), row[4] if has_name else None))

    domains = sorted({r[2] for r in rows})
    if domains != list(range(len(domains))):
        problems.append(f"domain indices must be dense 0..D-1, got {domains}")
    seen = {}
    for utt_id, _, d, _, _ in rows:
        seen.setdefault((d, utt_id), 0)
        seen[(d, utt_id)] += 1
    dupes = sorted(f"{u} (domain {d})" for (d, u), n in seen.items() if n > 1)
    if dupes:
        problems.append(f"duplicate utt_ids: {', '.join(dupes)}")
    if problems:
        raise ValidationError(f"{path}: invalid manifest:\n  " + "\n  ".join(problems))

    corpora = []
    for d in domains:
        recs = tuple(UtteranceRecord(u, y, dd, p) for u, y, dd, p, _ in rows if dd == d)
        names = {n for _, _, dd, _, n in rows if dd == d and n}
        if len(names) > 1:
            raise ValidationError(f"{path}: domain {d} carries several corpus names {sorted(names)}")
        corpora.append(Corpus(names.pop() if names else f"domain{d}", recs))
    return CorpusSet(corpora)


def write_manifest(path, corpus_set: CorpusSet, relative_to=None):
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["utt_id", "label", "domain", "path", "corpus"])
        for c in corpus_set.corpora:
            for r in c.records:
                p = Path(r.path)
                try:
                    p = p.relative_to(base)
                except ValueError:
                    pass
                w.writerow([r.utt_id, r.label, r.y_d, p.as_posix(), c.name])


def write_embedding(path, stack):
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise ValidationError(f"layer stack must be [L, T, D], got shape {stack.shape}")
    if not np.all(np.isfinite(stack)):
        raise ValidationError("layer stack contains non-finite values")
    header = _HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, *stack.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(stack, dtype="<f4").tobytes())


def read_embedding(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_embedding(blob)


def decode_embedding(blob):
    if len(blob) < 4 or blob[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {EMBEDDING_MAGIC!r}", 0)
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} of {_HEADER.size} bytes", len(blob))
    _, version, n_layers, n_frames, dim = _HEADER.unpack_from(blob)
    if version != EMBEDDING_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    need = _HEADER.size + 4 * n_layers * n_frames * dim
    if len(blob) < need:
        raise FormatError(f"truncated payload: need {need} bytes, file has {len(blob)}", len(blob))
    if len(blob) > need:
        raise FormatError(f"{len(blob) - need} trailing bytes after payload", need)
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    return data.reshape(n_layers, n_frames, dim).astype(np.float32)


@dataclass(frozen=True)
class SynthSpec:
    """Generative recipe for biased synthetic corpora.

    Frames are ``s * u_class + beta * b_domain + N(0, sigma^2)``; the bias
    is shared by both classes within a domain. The optional unseen domain
    uses a bias from the same family as the training biases (same
    component along their mean, new direction within their spread) that
    matches none of them.
    """

    num_domains: int = 3
    frame_dim: int = 32
    num_layers: int = 3
    bias_magnitude: float = 2.0
    class_separation: float = 1.0
    noise_std: float = 1.0
    min_frames: int = 4
    max_frames: int = 12
    direction_seed: int = 1234
    unseen_domain: bool = True

    def __post_init__(self):
        if self.num_domains < 1 or self.frame_dim < 2 or self.num_layers < 1:
            raise ConfigError("num_domains, num_layers >= 1 and frame_dim >= 2 required")
        for name in ("bias_magnitude", "class_separation", "noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError(f"need 1 <= min_frames <= max_frames, got {self.min_frames}, {self.max_frames}")

    @property
    def domain_names(self):
        names = [chr(ord("A") + d) if d < 26 else f"D{d}" for d in range(self.num_domains)]
        return names + ([UNSEEN_NAME] if self.unseen_domain else [])


def _unit(v):
    return v / np.linalg.norm(v)


def synth_directions(spec: SynthSpec):
    """Unit class directions ``(u_bona, u_spoof)`` and bias directions (one row per domain).

    When ``spec.unseen_domain`` is set, the last bias row is the unseen domain's.
    """
    rng = np.random.default_rng(spec.direction_seed)
    dim = spec.frame_dim
    u_bona = _unit(rng.standard_normal(dim))
    u_spoof = _unit(rng.standard_normal(dim))
    biases = np.array([_unit(rng.standard_normal(dim)) for _ in range(spec.num_domains)])
    if spec.unseen_domain:
        centre = biases.mean(axis=0)
        spread = biases - centre
        radius = np.linalg.norm(spread, axis=1).mean()
        if spec.num_domains > 1:
            coef = rng.standard_normal(spec.num_domains)
            offset = _unit(coef @ spread) * radius
        else:
            offset = _unit(rng.standard_normal(dim)) * max(radius, 1.0)
        biases = np.vstack([biases, _unit(centre + offset)])
    return u_bona, u_spoof, biases


def synth_generate(spec: SynthSpec, n_per_domain_per_class, seed, split="train"):
    """Materialize balanced corpora (one per domain) with in-memory stacks.

    ``split="eval"`` appends the unseen-bias domain when ``spec.unseen_domain`` is set.
    Record ids are ``{split}-{domain}-{label}-{index}``.
    """
    if n_per_domain_per_class < 1:
        raise ConfigError("need at least one utterance per domain and class")
    u_bona, u_spoof, biases = synth_directions(spec)
    names = spec.domain_names
    n_dom = spec.num_domains + (1 if split == "eval" and spec.unseen_domain else 0)
    corpora = []
    for d in range(n_dom):
        records = []
        for y_s, u in ((0, u_bona), (1, u_spoof)):
            mu = spec.class_separation * u + spec.bias_magnitude * biases[d]
            for i in range(n_per_domain_per_class):
                rng = np.random.default_rng([seed, d, y_s, i])
                t = int(rng.integers(spec.min_frames, spec.max_frames + 1))
                eps = rng.standard_normal((spec.num_layers, t, spec.frame_dim))
                stack = (mu + spec.noise_std * eps).astype(np.float32)
                uid = f"{split}-{names[d]}-{LABELS[y_s]}-{i:05d}"
                records.append(UtteranceRecord(uid, y_s, d, None, stack))
        corpora.append(Corpus(names[d], tuple(records)))
    return CorpusSet(corpora)


CASE_SOURCES = {1: ("A",), 2: ("B",), 3: ("A", "B"), 4: ("A", "B", "C")}


def compose_case(case, sources, names=None):
    """Training set of one of the four cases from source corpora.

    ``sources`` is a :class:`CorpusSet` (or a sequence of corpora). Source
    roles A, B, C are, in order, ``names`` if given, else the first three
    corpora. Case 1: A; case 2: B; case 3: A+B; case 4: A+B+C.
    """
    if case not in CASE_SOURCES:
        raise ConfigError(f"training case must be 1, 2, 3 or 4, got {case}")
    if not isinstance(sources, CorpusSet):
        sources = CorpusSet(Corpus(c.name, tuple(replace(r, y_d=i) for r in c.records))
                            for i, c in enumerate(sources))
    roles = list(names) if names is not None else sources.names[:3]
    wanted = []
    for role in CASE_SOURCES[case]:
        idx = "ABC".index(role)
        if idx >= len(roles):
            raise ConfigError(f"case {case} needs source corpus {role}, only {len(roles)} available")
        wanted.append(roles[idx])
    return sources.subset(wanted)


@dataclass
class Batch:
    records: list
    y_s: np.ndarray
    y_d: np.ndarray

    def stacks(self):
        return [r.load() for r in self.records]


def make_batches(corpus_set: CorpusSet, batch_size, seed, epoch):
    """Shuffled full batches over the union of corpora; the short tail is dropped."""
    if batch_size < 2:
        raise ConfigError(f"batch_size must be at least 2, got {batch_size}")
    records = corpus_set.records
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    for k in range(len(records) // batch_size):
        idx = order[k * batch_size:(k + 1) * batch_size]
        chosen = [records[i] for i in idx]
        yield Batch(chosen,
                    np.array([r.y_s for r in chosen], dtype=np.int64),
                    np.array([r.y_d for r in chosen], dtype=np.int64))
