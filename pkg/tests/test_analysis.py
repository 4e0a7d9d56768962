import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agevlm import tensor as T
from agevlm.analysis import (cosine_similarity, export_attention_heatmap,
                             normalize_heatmap, padding_attention_mass,
                             rank_auc, similarity_analysis,
                             write_similarity_report)
from agevlm.attention import AttentionRecord
from agevlm.data import DataConfig, generate_synthetic
from agevlm.guidance import QuerySpan
from agevlm.model import Model, ModelConfig

TINY = ModelConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=27,
                   cross_attn_indices=(1,), image_size=16, patch_size=4,
                   encoder_dim=4, adapter_hidden=6, mlp_hidden=16,
                   max_seq_len=12)
DATA = DataConfig(image_size=16, patch_size=4, guided_fraction=0.5)


def brute_force_auc(pos, neg):
    wins = ties = 0
    for p, n in itertools.product(pos, neg):
        if p > n:
            wins += 1
        elif p == n:
            ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


class TestCosine:
    def test_parallel(self):
        assert cosine_similarity([1.0, 2.0], [2.0, 4.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == pytest.approx(0.0)

    def test_forty_five_degrees(self):
        assert cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2))

    def test_antiparallel(self):
        assert cosine_similarity([1.0, 1.0], [-2.0, -2.0]) == pytest.approx(-1.0)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=6))
    def test_bounded(self, vals):
        u = np.array(vals)
        v = np.arange(1.0, len(vals) + 1)
        if np.linalg.norm(u) == 0:
            return
        assert -1.0 - 1e-12 <= cosine_similarity(u, v) <= 1.0 + 1e-12


class TestRankAuc:
    def test_perfect_separation(self):
        assert rank_auc([0.8, 0.9], [0.1, 0.2]) == 1.0

    def test_perfect_inversion(self):
        assert rank_auc([0.1, 0.2], [0.8, 0.9]) == 0.0

    def test_all_tied(self):
        assert rank_auc([0.5, 0.5], [0.5, 0.5, 0.5]) == 0.5

    def test_hand_example(self):
        # pairs: (3>1), (3>2), (1<2 loses), (1==1 tie) -> wait, recompute by oracle
        pos, neg = [3.0, 1.0], [1.0, 2.0]
        assert rank_auc(pos, neg) == pytest.approx(brute_force_auc(pos, neg))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_pair_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pos = np.round(rng.normal(0.3, 1.0, rng.integers(2, 15)), 1)
        neg = np.round(rng.normal(0.0, 1.0, rng.integers(2, 15)), 1)
        assert rank_auc(pos, neg) == pytest.approx(brute_force_auc(pos, neg), abs=1e-12)


@pytest.fixture(scope="module")
def corpus():
    samples, vocab = generate_synthetic(55, 8, DATA)
    return samples, vocab


class TestSimilarityAnalysis:
    def test_untrained_report_fields(self, corpus):
        samples, vocab = corpus
        model = Model(TINY, seed=0)
        report = similarity_analysis(model, samples, vocab, DATA, pairing_seed=1)
        assert len(report.matched) == len(report.mismatched) == 8
        assert 0.0 <= report.auc <= 1.0
        assert sum(report.matched_hist) == 8
        assert len(report.bin_edges) == 41

    def test_deterministic(self, corpus):
        samples, vocab = corpus
        model = Model(TINY, seed=0)
        a = similarity_analysis(model, samples, vocab, DATA, pairing_seed=1)
        b = similarity_analysis(model, samples, vocab, DATA, pairing_seed=1)
        assert a.matched == b.matched and a.mismatched == b.mismatched

    def test_derangement_never_pairs_self(self, corpus):
        samples, vocab = corpus
        model = Model(TINY, seed=0)
        for seed in range(5):
            report = similarity_analysis(model, samples, vocab, DATA, pairing_seed=seed)
            # if any mismatched pair were a self pair its cosine would equal matched
            assert report.matched != report.mismatched

    def test_too_few_samples(self, corpus):
        samples, vocab = corpus
        model = Model(TINY, seed=0)
        with pytest.raises(ValueError):
            similarity_analysis(model, samples[:1], vocab, DATA)

    def test_written_report(self, corpus, tmp_path):
        samples, vocab = corpus
        model = Model(TINY, seed=0)
        report = similarity_analysis(model, samples, vocab, DATA, pairing_seed=1)
        write_similarity_report(report, tmp_path / "pairs.csv", tmp_path / "summary.json")
        lines = (tmp_path / "pairs.csv").read_text().splitlines()
        assert lines[0] == "pair_id,kind,cosine"
        assert len(lines) == 17
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["auc"] == report.auc
        assert float(lines[1].split(",")[2]) == report.matched[0]


class TestHeatmap:
    def test_normalize_range_and_argmax(self):
        rng = np.random.default_rng(0)
        p = rng.random((4, 4))
        n = normalize_heatmap(p)
        assert n.min() == 0.0 and n.max() == 1.0
        assert np.argmax(n) == np.argmax(p)

    def test_normalize_constant(self):
        np.testing.assert_array_equal(normalize_heatmap(np.full((3, 3), 0.2)),
                                      np.zeros((3, 3)))

    def test_pgm_bytes(self, tmp_path):
        w = np.zeros((2, 3, 4))
        w[:, :, 0] = 1.0  # all mass on visual token 0
        record = AttentionRecord(layer_index=0, weights=T.Tensor(w))
        export_attention_heatmap(record, QuerySpan(1, 3), (2, 2), tmp_path / "h.pgm")
        data = (tmp_path / "h.pgm").read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n")
        assert data[len(b"P5\n2 2\n255\n"):] == bytes([255, 0, 0, 0])

    def test_csv_matches_raw_aggregate(self, tmp_path):
        rng = np.random.default_rng(3)
        raw = rng.random((2, 3, 4))
        w = raw / raw.sum(axis=-1, keepdims=True)
        record = AttentionRecord(layer_index=0, weights=T.Tensor(w))
        export_attention_heatmap(record, QuerySpan(0, 3), (2, 2), tmp_path / "h.pgm")
        rows = (tmp_path / "h.csv").read_text().splitlines()
        got = np.array([[float(c) for c in r.split(",")] for r in rows])
        expected = w.mean(axis=(0, 1)).reshape(2, 2)
        expected /= expected.sum()
        np.testing.assert_allclose(got, expected, rtol=1e-15)


class TestPaddingMass:
    def test_no_padding(self):
        p = np.full((2, 2), 0.25)
        assert padding_attention_mass(p, np.zeros((2, 2), bool)) == 0.0

    def test_all_padding(self):
        p = np.full((2, 2), 0.25)
        assert padding_attention_mass(p, np.ones((2, 2), bool)) == pytest.approx(1.0)

    def test_partial(self):
        p = np.array([[0.5, 0.1], [0.2, 0.2]])
        region = np.array([[True, False], [False, True]])
        assert padding_attention_mass(p, region) == pytest.approx(0.7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            padding_attention_mass(np.zeros((2, 2)), np.zeros((3, 3), bool))
