import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbmcn.evaluation import (
    EvalReport,
    FeatureFileError,
    FeatureSet,
    NoValidQueries,
    average_precision,
    cmc,
    cosine_matrix,
    emit_report,
    evaluate,
    rank_and_filter,
    read_features,
    write_features,
)
from oracles import check_against_oracle, planted_instance


class TestCosine:
    def test_identical_and_orthogonal(self):
        s = cosine_matrix(np.array([[1.0, 2.0]]), np.array([[1.0, 2.0], [-2.0, 1.0]]))
        assert s[0, 0] == pytest.approx(1.0, abs=1e-15)
        assert s[0, 1] == pytest.approx(0.0, abs=1e-15)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        v, w = rng.standard_normal((1, 6)), rng.standard_normal((3, 6))
        np.testing.assert_allclose(cosine_matrix(3.7 * v, w), cosine_matrix(v, w), rtol=1e-14)

    def test_zero_row(self):
        with pytest.raises(ValueError):
            cosine_matrix(np.zeros((1, 3)), np.ones((2, 3)))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine_matrix(np.ones((1, 3)), np.ones((2, 4)))

    def test_per_level_normalization(self):
        q = np.array([[1.0, 0.0, 10.0, 0.0]])
        g = np.array([[1.0, 0.0, 0.0, 10.0]])
        assert cosine_matrix(q, g)[0, 0] == pytest.approx(1 / 101)
        assert cosine_matrix(q, g, per_level=2)[0, 0] == pytest.approx(0.5)


class TestRankAndFilter:
    def test_same_id_same_camera_excluded(self):
        order, rel = rank_and_filter(np.array([0.9, 0.8, 0.7]), 5, 1, np.array([5, 5, 2]), np.array([1, 2, 1]))
        assert order.tolist() == [1, 2]
        assert rel.tolist() == [True, False]

    def test_junk_excluded(self):
        order, _ = rank_and_filter(np.array([0.9, 0.8]), 5, 1, np.array([-1, 5]), np.array([2, 2]))
        assert order.tolist() == [1]

    def test_tie_lower_index_first(self):
        order, _ = rank_and_filter(np.array([0.5, 0.9, 0.5, 0.5]), 1, 1, np.array([2, 2, 2, 2]), np.array([2, 2, 2, 2]))
        assert order.tolist() == [1, 0, 2, 3]

    def test_matches_brute_force_filter(self):
        rng = np.random.default_rng(3)
        scores = rng.random(60)
        pids, cams = rng.integers(-1, 4, 60), rng.integers(1, 3, 60)
        order, rel = rank_and_filter(scores, 2, 1, pids, cams)
        ref = [j for j in sorted(range(60), key=lambda j: (-scores[j], j)) if pids[j] != -1 and not (pids[j] == 2 and cams[j] == 1)]
        assert order.tolist() == ref
        assert rel.tolist() == [bool(pids[j] == 2) for j in ref]


class TestAveragePrecision:
    def test_all_first(self):
        assert average_precision([True, True, False, False]) == 1.0

    def test_hits_at_one_and_three(self):
        assert abs(average_precision([True, False, True, False]) - 0.833333333333) <= 1e-9
        assert average_precision([True, False, True]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)

    @pytest.mark.parametrize("k", [1, 2, 5, 17])
    def test_single_relevant(self, k):
        flags = [False] * 20
        flags[k - 1] = True
        assert average_precision(flags) == pytest.approx(1 / k, abs=1e-15)

    def test_no_relevant_is_skip(self):
        assert average_precision([False, False]) is None


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=40).filter(any))
def test_ap_range_and_perfect_iff_sorted(flags):
    ap = average_precision(flags)
    assert 0 <= ap <= 1
    perfect = flags == sorted(flags, reverse=True)
    assert (ap == 1.0) == perfect


class TestCMC:
    def test_counting(self):
        assert cmc([1, 3], 1) == 0.5
        assert cmc([1, 3], 3) == 1.0
        assert cmc([1, 3], 50) == 1.0
        assert cmc([1, 1, 1], 1) == 1.0


class TestEvaluate:
    def test_self_retrieval(self):
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((12, 5))
        pids = np.repeat(np.arange(4), 3)
        cams = np.tile([1, 2, 3], 4)
        fs = FeatureSet(feats, pids, cams)
        # each query's cross-camera matches rank first only when features cluster by id
        clustered = FeatureSet(np.repeat(rng.standard_normal((4, 5)), 3, axis=0), pids, cams)
        report = evaluate(clustered, clustered)
        assert report.mAP == 1.0
        assert report.cmc_at(1) == 1.0
        check_against_oracle(fs, fs)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        q, g = planted_instance(seed)
        check_against_oracle(q, g)

    def test_largest_instance(self):
        check_against_oracle(*planted_instance(99, n_q=50, n_g=200))

    def test_cmc_monotone_and_complete(self):
        report = evaluate(*planted_instance(7, n_q=30, n_g=120))
        assert np.all(np.diff(report.cmc) >= 0)
        assert report.cmc[-1] == 1.0
        assert 0 <= report.mAP <= 1

    def test_gallery_permutation_invariance(self):
        q, g = planted_instance(11, n_q=25, n_g=150)
        perm = np.random.default_rng(0).permutation(len(g))
        g2 = FeatureSet(g.features[perm], g.person_ids[perm], g.camera_ids[perm])
        a, b = evaluate(q, g), evaluate(q, g2)
        assert a.mAP == b.mAP
        np.testing.assert_array_equal(a.cmc, b.cmc)

    def test_all_skipped(self):
        q = FeatureSet(np.ones((1, 2)), [1], [1])
        g = FeatureSet(np.ones((2, 2)), [2, 1], [1, 1])
        with pytest.raises(NoValidQueries):
            evaluate(q, g)

    def test_skipped_counted(self):
        q = FeatureSet(np.eye(2), [1, 9], [1, 1])
        g = FeatureSet(np.eye(2), [1, 2], [2, 2])
        report = evaluate(q, g)
        assert report.num_skipped == 1
        assert report.mAP == 1.0


class TestReportFiles:
    def make_report(self):
        return EvalReport(0.5, np.array([0.25, 0.5, 1.0]), [0.5], [1], 4, 0)

    def test_metrics_line(self, tmp_path):
        emit_report(self.make_report(), tmp_path)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "metric,value"
        assert "mAP,0.500000" in lines
        assert "rank1,0.250000" in lines
        assert "rank20,1.000000" in lines

    def test_curve_length(self, tmp_path):
        emit_report(self.make_report(), tmp_path)
        rows = (tmp_path / "cmc_curve.csv").read_text().splitlines()
        assert rows[0] == "rank,cmc"
        assert len(rows) - 1 == 3

    def test_rerun_identical(self, tmp_path):
        report = evaluate(*planted_instance(5))
        emit_report(report, tmp_path / "a")
        emit_report(report, tmp_path / "b")
        for name in ("metrics.csv", "cmc_curve.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_summary_line(self):
        assert self.make_report().summary_line() == "mAP=0.500000 R1=0.250000 R5=1.000000 R10=1.000000 R20=1.000000"


class TestFeatureFile:
    def test_round_trip(self, tmp_path):
        q, _ = planted_instance(1)
        write_features(q, tmp_path / "q.hbfv")
        back = read_features(tmp_path / "q.hbfv")
        assert back.features.tobytes() == q.features.tobytes()
        assert back.person_ids.tolist() == q.person_ids.tolist()
        assert back.camera_ids.tolist() == q.camera_ids.tolist()
        raw = (tmp_path / "q.hbfv").read_bytes()
        assert raw[:4] == b"HBFV"

    def test_bad_magic(self, tmp_path):
        q, _ = planted_instance(1)
        write_features(q, tmp_path / "q.hbfv")
        raw = bytearray((tmp_path / "q.hbfv").read_bytes())
        raw[0:4] = b"XXXX"
        (tmp_path / "q.hbfv").write_bytes(bytes(raw))
        with pytest.raises(FeatureFileError):
            read_features(tmp_path / "q.hbfv")

    def test_truncated(self, tmp_path):
        q, _ = planted_instance(1)
        write_features(q, tmp_path / "q.hbfv")
        raw = (tmp_path / "q.hbfv").read_bytes()
        (tmp_path / "q.hbfv").write_bytes(raw[:-3])
        with pytest.raises(FeatureFileError):
            read_features(tmp_path / "q.hbfv")
