import csv

import numpy as np
import pytest

from cosparse import numerics as nx
from cosparse import theory
from cosparse.model import Model, ModelConfig, coupled_pairs, evaluate_loss


class TestCoupledError:
    def test_hand_example(self):
        j, err = theory.coupled_removal_error(np.diag([1.0, 3.0]), np.diag([2.0, 1.0]))
        assert (j, err) == (0, 2.0)

    def test_zero_row(self):
        b = nx.Rng(0).normal(4, 4)
        b[2] = 0.0
        assert theory.coupled_removal_error(nx.Rng(1).normal(4, 4), b) == (2, 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_materialized(self, seed):
        rng = nx.Rng(seed)
        a, b = rng.normal(50, 50), rng.normal(50, 50)
        j, err = theory.coupled_removal_error(a, b)
        full = nx.frobenius_norm(a @ b - nx.remove_column(a, j) @ nx.remove_row(b, j))
        assert err == pytest.approx(full, rel=1e-10)

    def test_shape_check(self):
        with pytest.raises(nx.ShapeError):
            theory.coupled_removal_error(np.ones((2, 3)), np.ones((2, 3)))


class TestIndividualError:
    def test_hand_example(self):
        a, b = np.array([[1.0, 0.0], [0.0, 3.0]]), np.array([[2.0, 0.0], [0.0, 1.0]])
        k, l, err = theory.individual_removal_error(a, b)
        assert (k, l) == (0, 1)
        assert err == pytest.approx(7.0, rel=1e-15)
        assert theory.coupled_removal_error(a, b)[1] == 2.0

    def test_aligned_case(self):
        a, b = np.diag([1.0, 5.0, 4.0]), np.diag([0.5, 2.0, 3.0])
        k, l, err = theory.individual_removal_error(a, b)
        assert k == l == 0 and err == 0.5
        assert theory.coupled_removal_error(a, b)[1] <= err

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_recomputation(self, seed):
        rng = nx.Rng(seed)
        a, b = rng.normal(100, 100), rng.normal(100, 100)
        k, l, err = theory.individual_removal_error(a, b)
        full = np.linalg.norm(a @ b - np.delete(a, k, axis=1) @ np.delete(b, l, axis=0))
        assert err == pytest.approx(full, rel=1e-10)


class TestComparison:
    def test_single_trial(self):
        s = theory.run_comparison(20, 1, seed=3)
        t = theory._trial(20, theory.trial_seeds(3, 1)[0])
        assert (s.avg_err_coupled, s.avg_err_individual) == (t.err_coupled, t.err_individual)
        assert s.win_probability == float(t.coupled_wins)

    def test_worker_count_irrelevant(self):
        a = theory.run_comparison(30, 40, seed=1, workers=1)
        b = theory.run_comparison(30, 40, seed=1, workers=3)
        assert a == b

    def test_env_caps_workers(self, monkeypatch):
        monkeypatch.setenv("ECOSPA_THREADS", "2")
        assert theory.worker_count() == 2

    def test_doubling_trials_is_stable(self):
        small = theory.run_comparison(40, 200, seed=5)
        big = theory.run_comparison(40, 400, seed=5)
        assert abs(big.avg_err_coupled - small.avg_err_coupled) < 3 * small.se_coupled

    def test_bad_args(self):
        with pytest.raises(ValueError):
            theory.run_comparison(1, 10)

    def test_csv(self, tmp_path):
        s = theory.run_comparison(10, 5, seed=2)
        theory.write_summary_csv(tmp_path / "s.csv", [s])
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[0] == ["size", "avg_coupled", "avg_individual", "win_probability", "trials", "seed"]
        assert rows[1][0] == "10" and float(rows[1][1]) == s.avg_err_coupled


class TestFFNBound:
    def test_no_violations(self):
        rep = theory.ffn_bound_check(8, 16, 6, trials=20, seed=1)
        assert rep.violations == 0 and rep.cases == 320

    def test_zero_input(self):
        rng = nx.Rng(0)
        linear, bound, metric, true = theory.ffn_removal_terms(np.zeros((5, 4)), rng.normal(4, 6), rng.normal(6, 4))
        np.testing.assert_array_equal(linear, 0.0)
        np.testing.assert_array_equal(bound, 0.0)
        np.testing.assert_array_equal(true, 0.0)

    def test_true_error_is_output_change(self):
        rng = nx.Rng(2)
        x, w_in, w_out = rng.normal(5, 4), rng.normal(4, 6), rng.normal(6, 4)
        true = theory.ffn_removal_terms(x, w_in, w_out)[3]
        full = nx.gelu(x @ w_in) @ w_out
        for j in range(6):
            cut = nx.gelu(x @ nx.remove_column(w_in, j)) @ nx.remove_row(w_out, j)
            assert true[j] == pytest.approx(nx.frobenius_norm(full - cut), rel=1e-10)

    def test_csv(self, tmp_path):
        rep = theory.ffn_bound_check(4, 8, 4, trials=3)
        theory.write_bound_csv(tmp_path / "b.csv", rep)
        rows = list(csv.reader(open(tmp_path / "b.csv")))
        assert rows[0] == theory.BOUND_HEADER and rows[-1][0] == "all" and len(rows) == 5


class TestFFNCompare:
    @pytest.fixture
    def model(self, corpus):
        return Model(ModelConfig(vocab=corpus.vocab, d_model=16, layers=1, heads=2, d_ffn=30, max_seq_len=32), seed=4)

    def test_zero_sparsity(self, model, corpus):
        batch = corpus.sample(2, 16, nx.Rng(0))
        row, = theory.ffn_coupled_vs_uncoupled(model, [0.0], batch)
        assert row.coupled_loss == row.uncoupled_loss == evaluate_loss(model, batch)

    def test_half_sparsity_dims(self, model, corpus):
        row, = theory.ffn_coupled_vs_uncoupled(model, [0.5], corpus.sample(2, 16, nx.Rng(0)))
        assert row.coupled_ffn_dims == (15,)
        assert [p.inner_dim for p in coupled_pairs(model) if p.kind == "IO"] == [30]

    def test_beyond_floor(self, model, corpus):
        with pytest.raises(ValueError):
            theory.ffn_coupled_vs_uncoupled(model, [0.99], corpus.sample(1, 8, nx.Rng(0)))
