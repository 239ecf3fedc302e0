"""Scoring and embedding extraction over whole corpora (eval mode, full utterances)."""

from collections import defaultdict

import numpy as np

from . import autodiff as ad
from .corpus import CorpusSet
from .metrics import EmbeddingDump, ScoreSet
from .model import IdfeModel, detection_score, frame_encode, mhfa_pool, spoof_head


def _by_length(records):
    groups = defaultdict(list)
    for i, r in enumerate(records):
        groups[r.load().shape[1]].append(i)
    return [groups[t] for t in sorted(groups)]


def _forward_eval(model: IdfeModel, records):
    """Embeddings ``[N, E]`` and detection scores ``[N]`` in record order.

    Utterances of equal length are batched; eval mode makes every row
    independent of its batch-mates.
    """
    p = model.params.bind()
    dtype = model.params.dtype
    n = len(records)
    emb = np.zeros((n, model.config.mhfa.embedding_dim))
    scores = np.zeros(n)
    for idx in _by_length(records):
        x = ad.constant(np.stack([records[i].load() for i in idx]).astype(dtype))
        e = mhfa_pool(frame_encode(x, p), p)
        logits = spoof_head(e, p, model.params.buffers, model.config.spoof_head)
        emb[idx] = e.data
        scores[idx] = detection_score(logits)
    return emb, scores


def score_corpus(model: IdfeModel, corpus_set: CorpusSet):
    records = corpus_set.records
    _, scores = _forward_eval(model, records)
    out = ScoreSet()
    for r, s in zip(records, scores):
        out.add(r.utt_id, corpus_set.corpora[r.y_d].name, r.y_s, s)
    return out


def embed_corpus(model: IdfeModel, corpus_set: CorpusSet):
    records = corpus_set.records
    emb, _ = _forward_eval(model, records)
    return EmbeddingDump([r.utt_id for r in records], [r.y_s for r in records],
                         [r.y_d for r in records], emb)
