"""Detection metrics, the linear domain probe, and TSV exports.

Scores are oriented so that higher means more bona fide. At threshold
``tau`` an utterance is accepted as bona fide when ``score >= tau``:

    APCER(tau) = fraction of spoof utterances with score >= tau
    BPCER(tau) = fraction of bona fide utterances with score < tau
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import LABELS
from .errors import MetricError
from .optim import Adam

SCORES_TAG = "# idfe-scores v1"
EMBEDDINGS_TAG = "# idfe-emb v1"


@dataclass(frozen=True)
class ScoreEntry:
    utt_id: str
    domain: str
    y_s: int
    score: float


@dataclass
class ScoreSet:
    entries: list = field(default_factory=list)

    def add(self, utt_id, domain, y_s, score):
        self.entries.append(ScoreEntry(utt_id, domain, int(y_s), float(score)))

    def domains(self):
        """Domain names in order of first appearance."""
        return list(dict.fromkeys(e.domain for e in self.entries))

    def group(self, domain=None):
        """``(bona fide scores, spoof scores)`` for one domain, or for all entries."""
        sel = [e for e in self.entries if domain is None or e.domain == domain]
        bona = np.array([e.score for e in sel if e.y_s == 0], dtype=np.float64)
        spoof = np.array([e.score for e in sel if e.y_s == 1], dtype=np.float64)
        return bona, spoof


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float


def _check_classes(bona, spoof):
    bona = np.asarray(bona, dtype=np.float64).ravel()
    spoof = np.asarray(spoof, dtype=np.float64).ravel()
    if len(bona) == 0 or len(spoof) == 0:
        raise MetricError(f"need both classes; got {len(bona)} bona fide and {len(spoof)} spoof scores")
    if not (np.all(np.isfinite(bona)) and np.all(np.isfinite(spoof))):
        raise MetricError("scores must be finite")
    return bona, spoof


def operating_points(bona, spoof):
    """Thresholds (every distinct score, then one just above the maximum)
    with their APCER and BPCER."""
    bona, spoof = _check_classes(bona, spoof)
    thr = np.unique(np.concatenate([bona, spoof]))
    thr = np.append(thr, np.nextafter(thr[-1], np.inf))
    apcer = 1.0 - np.searchsorted(np.sort(spoof), thr, side="left") / len(spoof)
    bpcer = np.searchsorted(np.sort(bona), thr, side="left") / len(bona)
    return thr, apcer, bpcer


def det_points(bona, spoof):
    """``[(APCER, BPCER), ...]`` for increasing thresholds."""
    _, apcer, bpcer = operating_points(bona, spoof)
    return list(zip(apcer.tolist(), bpcer.tolist()))


def eer(bona, spoof):
    """Equal error rate, linearly interpolated between the two operating
    points that straddle APCER == BPCER."""
    thr, apcer, bpcer = operating_points(bona, spoof)
    diff = apcer - bpcer
    k = int(np.argmax(diff <= 0))  # diff[0] == 1 and diff[-1] == -1
    if diff[k] == 0:
        return EerResult(float(apcer[k]), float(thr[k]))
    t = diff[k - 1] / (diff[k - 1] - diff[k])
    return EerResult(float(apcer[k - 1] + t * (apcer[k] - apcer[k - 1])),
                     float(thr[k - 1] + t * (thr[k] - thr[k - 1])))


def pooled_eer(per_domain):
    """Unweighted mean of per-domain EERs."""
    values = list(per_domain.values()) if isinstance(per_domain, dict) else list(per_domain)
    if not values:
        raise MetricError("pooled EER of no domains")
    return float(np.mean(values))


def eer_table(scores: ScoreSet):
    """``{domain: EER}`` for every domain in ``scores``."""
    return {d: eer(*scores.group(d)).eer for d in scores.domains()}


@dataclass
class EmbeddingDump:
    utt_ids: list
    y_s: np.ndarray
    y_d: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.y_s = np.asarray(self.y_s, dtype=np.int64)
        self.y_d = np.asarray(self.y_d, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        n = len(self.utt_ids)
        if self.vectors.ndim != 2 and n:
            raise MetricError(f"embeddings must be [N, E], got {self.vectors.shape}")
        if not (len(self.y_s) == len(self.y_d) == n == (self.vectors.shape[0] if n else 0)):
            raise MetricError("embedding dump columns have different lengths")

    def __len__(self):
        return len(self.utt_ids)


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    chance: float
    n_train: int
    n_test: int


def domain_probe(dump: EmbeddingDump, train_frac=0.8, seed=0, steps=200, lr=0.1):
    """Held-out accuracy of a multinomial linear classifier predicting the domain.

    The split is stratified by domain. Features are standardized with the
    training split's statistics, then a softmax regression is fitted with
    full-batch Adam.
    """
    if not 0.0 < train_frac < 1.0:
        raise MetricError(f"train_frac must be in (0, 1), got {train_frac}")
    domains, y = np.unique(dump.y_d, return_inverse=True)
    if len(domains) < 2:
        raise MetricError(f"domain probe needs at least 2 domains, got {len(domains)}")
    counts = np.bincount(y)
    if counts.min() < 10:
        raise MetricError(f"domain probe needs >= 10 samples per domain, got {dict(zip(domains.tolist(), counts.tolist()))}")

    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for d in range(len(domains)):
        members = rng.permutation(np.flatnonzero(y == d))
        n_tr = min(max(1, int(round(train_frac * len(members)))), len(members) - 1)
        train_idx.extend(members[:n_tr])
        test_idx.extend(members[n_tr:])
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)

    x = dump.vectors
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0)
    sd[sd == 0] = 1.0
    z = (x - mu) / sd

    params = {"weight": np.zeros((x.shape[1], len(domains))), "bias": np.zeros(len(domains))}
    opt = Adam(params, lr=lr)
    xt = ad.constant(z[train_idx])
    for _ in range(steps):
        tape = ad.Tape()
        w, b = tape.param("weight", params["weight"]), tape.param("bias", params["bias"])
        loss = ad.cross_entropy(ad.add(ad.matmul(xt, w), b), y[train_idx])
        opt.step(params, tape.backward(loss))
    pred = (z[test_idx] @ params["weight"] + params["bias"]).argmax(axis=1)
    return ProbeResult(float(np.mean(pred == y[test_idx])), 1.0 / len(domains),
                       len(train_idx), len(test_idx))


def _open_for_write(path):
    try:
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def export_scores(scores: ScoreSet, path):
    with _open_for_write(path) as fh:
        fh.write(SCORES_TAG + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["utt_id", "domain", "label", "score"])
        for e in scores.entries:
            w.writerow([e.utt_id, e.domain, LABELS[e.y_s], repr(e.score)])


def read_scores(path):
    scores = ScoreSet()
    with open(path, newline="", encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != SCORES_TAG:
            raise MetricError(f"{path}: missing '{SCORES_TAG}' header line")
        for row in csv.DictReader(fh, delimiter="\t"):
            scores.add(row["utt_id"], row["domain"], LABELS.index(row["label"]), float(row["score"]))
    return scores


def export_embeddings(dump: EmbeddingDump, path):
    dim = dump.vectors.shape[1] if len(dump) else 0
    with _open_for_write(path) as fh:
        fh.write(EMBEDDINGS_TAG + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["utt_id", "label", "domain"] + [f"v{i}" for i in range(dim)])
        for i, uid in enumerate(dump.utt_ids):
            w.writerow([uid, LABELS[dump.y_s[i]], int(dump.y_d[i])]
                       + [repr(float(v)) for v in dump.vectors[i]])


def read_embeddings(path):
    with open(path, newline="", encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != EMBEDDINGS_TAG:
            raise MetricError(f"{path}: missing '{EMBEDDINGS_TAG}' header line")
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader)
        rows = list(reader)
    dim = len(header) - 3
    return EmbeddingDump(
        [r[0] for r in rows],
        [LABELS.index(r[1]) for r in rows],
        [int(r[2]) for r in rows],
        np.array([[float(v) for v in r[3:]] for r in rows]).reshape(len(rows), dim),
    )
