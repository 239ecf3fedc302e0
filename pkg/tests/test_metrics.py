import numpy as np
import pytest

from idfe.errors import MetricError
from idfe.metrics import (EmbeddingDump, ScoreSet, det_points, domain_probe, eer, eer_table,
                          export_embeddings, export_scores, pooled_eer, read_embeddings, read_scores)


def brute_force_eer(bona, spoof):
    """Exhaustive enumeration with plain loops: every score value as a
    threshold plus one above them all, then interpolate the crossing."""
    cands = sorted(set(list(bona) + list(spoof)))
    cands.append(cands[-1] + 1.0)
    pts = []
    for tau in cands:
        apcer = sum(1 for s in spoof if s >= tau) / len(spoof)
        bpcer = sum(1 for b in bona if b < tau) / len(bona)
        pts.append((apcer, bpcer))
    for k, (a, b) in enumerate(pts):
        if a - b <= 0:
            if a == b:
                return a
            a0, b0 = pts[k - 1]
            t = (a0 - b0) / ((a0 - b0) - (a - b))
            return a0 + t * (a - a0)
    raise AssertionError("no crossing")


def test_eer_examples():
    assert eer([0.9, 0.8], [0.1, 0.2]).eer == 0.0
    assert eer([0.6, 0.2], [0.8, 0.4]).eer == pytest.approx(0.5, abs=1e-12)
    assert eer([1.0], [0.0]).eer == 0.0
    assert eer([0.0], [1.0]).eer == 1.0


def test_eer_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n_b, n_s = rng.integers(2, 300, 2)
        bona = np.round(rng.normal(0.5, 1.0, n_b), int(rng.integers(0, 4)))
        spoof = np.round(rng.normal(0.0, 1.0, n_s), int(rng.integers(0, 4)))
        assert abs(eer(bona, spoof).eer - brute_force_eer(bona, spoof)) <= 1e-9


@pytest.mark.parametrize("transform", [np.exp, lambda x: 3 * x + 1, np.arctan, lambda x: x ** 3])
def test_eer_monotone_invariance(transform):
    rng = np.random.default_rng(1)
    for _ in range(20):
        bona, spoof = rng.normal(0.7, 1, 60), rng.normal(0, 1, 80)
        assert eer(transform(bona), transform(spoof)).eer == pytest.approx(eer(bona, spoof).eer, abs=1e-12)


def test_eer_threshold_separates():
    res = eer([0.9, 0.8, 0.7], [0.1, 0.2, 0.3])
    assert 0.3 <= res.threshold <= 0.7


def test_eer_needs_both_classes():
    with pytest.raises(MetricError):
        eer([], [0.1])
    with pytest.raises(MetricError):
        eer([0.1], [])
    with pytest.raises(MetricError):
        eer([np.nan], [0.1])


def test_det_points_are_monotone():
    pts = det_points([0.3, 0.5, 0.9], [0.1, 0.4, 0.5])
    assert pts[0] == (1.0, 0.0) and pts[-1] == (0.0, 1.0)
    apcer, bpcer = zip(*pts)
    assert list(apcer) == sorted(apcer, reverse=True) and list(bpcer) == sorted(bpcer)


@pytest.mark.parametrize("values,expected", [((4.31, 4.64, 12.14, 8.58), 7.41),
                                             ((2.67, 12.68, 9.33, 7.27), 7.98)])
def test_pooled_eer_published_rows(values, expected):
    assert pooled_eer(values) == pytest.approx(expected, abs=0.01)


def test_pooled_eer_dict_and_empty():
    assert pooled_eer({"a": 0.1, "b": 0.3}) == pytest.approx(0.2)
    with pytest.raises(MetricError):
        pooled_eer([])


def test_eer_table_per_domain():
    s = ScoreSet()
    for i, (d, y, v) in enumerate([("A", 0, 0.9), ("A", 1, 0.1), ("B", 0, 0.2), ("B", 1, 0.8)]):
        s.add(f"u{i}", d, y, v)
    assert eer_table(s) == {"A": 0.0, "B": 1.0}


# --- domain probe -----------------------------------------------------------

def _dump(vectors, y_d, y_s=None):
    n = len(vectors)
    return EmbeddingDump([f"u{i}" for i in range(n)], np.zeros(n, int) if y_s is None else y_s, y_d, vectors)


def test_probe_one_hot_domains():
    y = np.repeat(np.arange(3), 40)
    rng = np.random.default_rng(0)
    x = np.eye(3)[y] + 0.01 * rng.standard_normal((120, 3))
    assert domain_probe(_dump(x, y)).accuracy >= 0.99


def test_probe_noise_is_near_chance():
    y = np.repeat(np.arange(4), 50)
    x = np.random.default_rng(1).standard_normal((200, 8))
    result = domain_probe(_dump(x, y))
    assert result.chance == 0.25 and result.accuracy <= result.chance + 0.10


def test_probe_identical_rows():
    y = np.repeat([0, 1], [30, 20])
    result = domain_probe(_dump(np.ones((50, 4)), y))
    assert result.accuracy <= 0.6 + 0.05


def test_probe_is_deterministic_and_stratified():
    y = np.repeat(np.arange(3), [20, 30, 40])
    x = np.random.default_rng(2).standard_normal((90, 5)) + y[:, None]
    a, b = domain_probe(_dump(x, y), seed=4), domain_probe(_dump(x, y), seed=4)
    assert a == b
    assert a.n_train == 16 + 24 + 32 and a.n_test == 90 - a.n_train


def test_probe_requires_ten_per_domain():
    y = np.repeat([0, 1], [10, 9])
    with pytest.raises(MetricError, match=">= 10"):
        domain_probe(_dump(np.zeros((19, 2)), y))
    with pytest.raises(MetricError):
        domain_probe(_dump(np.zeros((20, 2)), np.zeros(20, int)))


# --- exports ----------------------------------------------------------------

def test_scores_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = ScoreSet()
    for i in range(50):
        s.add(f"u{i}", "AB"[i % 2], i % 3 == 0, float(np.float32(rng.standard_normal())))
    export_scores(s, tmp_path / "s.tsv")
    back = read_scores(tmp_path / "s.tsv")
    assert back.entries == s.entries
    export_scores(back, tmp_path / "t.tsv")
    assert (tmp_path / "s.tsv").read_bytes() == (tmp_path / "t.tsv").read_bytes()


def test_scores_header_checked(tmp_path):
    (tmp_path / "s.tsv").write_text("utt_id\tdomain\tlabel\tscore\n")
    with pytest.raises(MetricError):
        read_scores(tmp_path / "s.tsv")


def test_embeddings_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((12, 5)).astype(np.float32).astype(np.float64)
    dump = _dump(x, np.arange(12) % 3, np.arange(12) % 2)
    export_embeddings(dump, tmp_path / "e.tsv")
    back = read_embeddings(tmp_path / "e.tsv")
    assert back.utt_ids == dump.utt_ids
    assert np.array_equal(back.y_s, dump.y_s) and np.array_equal(back.y_d, dump.y_d)
    assert np.array_equal(back.vectors, x)


def test_export_to_missing_directory(tmp_path):
    with pytest.raises(OSError, match="cannot write"):
        export_scores(ScoreSet(), tmp_path / "nope" / "s.tsv")
