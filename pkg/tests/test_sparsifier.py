import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cosparse import numerics as nx
from cosparse.model import Model, ModelConfig, coupled_pairs, param_count
from cosparse.sparsifier import (
    BudgetInfeasible,
    DegeneratePairError,
    ScoreVector,
    SparsifySchedule,
    coupled_remove,
    min_reachable_params,
    run_schedule_step,
    score_pair,
    select_removals,
    tsvd_reference,
    uncoupled_remove,
    write_removal_csv,
)
from cosparse.trainer import AdamState, TrainConfig, loss_and_grads, train


def pair_of(kind="IO", seed=0, **kw):
    cfg = dict(vocab=9, d_model=8, layers=1, heads=2, d_ffn=6, rope=False, init_std=1.0)
    cfg.update(kw)
    m = Model(ModelConfig(**cfg), seed=seed)
    return m, [p for p in coupled_pairs(m) if p.kind == kind][0]


def sv(values):
    return ScoreVector("x", np.asarray(values, dtype=float))


positive = arrays(np.float64, st.integers(2, 12), elements=st.floats(1e-3, 1e3))


class TestScores:
    def test_hand_example(self):
        m, pair = pair_of(d_model=2, d_ffn=2)
        m.params["L0.ffn.in"] = np.array([[3.0, 0.0], [0.0, 4.0]])
        m.params["L0.ffn.out"] = np.array([[1.0, 0.0], [0.0, 2.0]])
        np.testing.assert_allclose(score_pair(pair).scores, np.array([3, 8]) / np.sqrt(73), rtol=1e-15)

    def test_identity_is_uniform(self):
        m, pair = pair_of(d_model=6, d_ffn=6)
        m.params["L0.ffn.in"] = np.eye(6)
        m.params["L0.ffn.out"] = np.eye(6)
        np.testing.assert_allclose(score_pair(pair).scores, np.full(6, 1 / np.sqrt(6)), rtol=1e-15)

    @pytest.mark.parametrize("kind", ["QK", "VO", "IO"])
    def test_unit_norm_and_permutation(self, kind):
        m, pair = pair_of(kind, seed=3)
        s = score_pair(pair).scores
        assert abs(np.linalg.norm(s) - 1.0) <= 1e-12
        perm = np.random.default_rng(0).permutation(pair.inner_dim)
        for name, axis in pair.shared_names():
            m.params[name] = m.params[name][:, perm] if axis == 1 else m.params[name][perm]
        np.testing.assert_allclose(score_pair(pair).scores, s[perm], rtol=1e-14)

    def test_rope_blocks(self):
        m, pair = pair_of("QK", rope=True)
        s = score_pair(pair)
        q, k = m.params["L0.q0"], m.params["L0.k0"]
        qb = np.sqrt((q ** 2).sum(0).reshape(-1, 2).sum(1))
        kb = np.sqrt((k ** 2).sum(0).reshape(-1, 2).sum(1))
        assert s.block == 2 and len(s) == 2
        np.testing.assert_allclose(s.scores, qb * kb / np.linalg.norm(qb * kb), rtol=1e-14)

    def test_degenerate(self):
        m, pair = pair_of()
        m.params["L0.ffn.in"][:] = 0.0
        with pytest.raises(DegeneratePairError):
            score_pair(pair)


class TestSelect:
    def test_hand_example(self):
        assert select_removals(sv([0.05, 0.03, 0.92]), 0.90) == [1, 0]

    def test_full_retention(self):
        assert select_removals(sv([0.1, 0.2, 0.7]), 1.0) == []

    @pytest.mark.parametrize("d", [10, 20, 37, 64])
    def test_uniform(self, d):
        assert len(select_removals(sv(np.ones(d)), 0.90)) == int(np.floor(0.10 * d))

    def test_cap(self):
        assert select_removals(sv(np.ones(20)), 0.5, max_removals=3) == [0, 1, 2]

    @given(positive)
    def test_first_choice_is_argmin(self, s):
        picks = select_removals(sv(s), 0.0)
        assert picks[0] == int(np.argmin(s))

    @given(positive, st.floats(0.5, 1.0), st.floats(0.5, 1.0))
    @settings(max_examples=200)
    def test_theta_monotone(self, s, t1, t2):
        lo, hi = sorted((t1, t2))
        assert set(select_removals(sv(s), hi)) <= set(select_removals(sv(s), lo))


class TestCoupledRemove:
    def test_qk_product_loses_outer_term(self):
        m, pair = pair_of("QK", d_model=8, heads=2)
        q, k = m.params["L0.q0"].copy(), m.params["L0.k0"].copy()
        before = pair.product()
        coupled_remove(pair, 1)
        assert m.params["L0.q0"].shape == (8, 3) and m.params["L0.k0"].shape == (8, 3)
        np.testing.assert_allclose(pair.product(), before - nx.outer(q[:, 1], k[:, 1]), atol=1e-12)

    @pytest.mark.parametrize("kind", ["QK", "VO", "IO"])
    def test_frobenius_change_equals_norm_product(self, kind):
        m, pair = pair_of(kind, seed=5)
        n1 = nx.column_norms(pair.w1)
        n2 = nx.column_norms(pair.w2) if kind == "QK" else nx.row_norms(pair.w2)
        before = pair.product()
        coupled_remove(pair, 2)
        assert nx.frobenius_norm(before - pair.product()) == pytest.approx(n1[2] * n2[2], rel=1e-10)

    def test_zero_pair_removal_keeps_product(self):
        m, pair = pair_of("VO", d_model=8, heads=2)
        m.params["L0.v0"][:, 2] = 0.0
        m.params["L0.o0"][2] = 0.0
        before = pair.product()
        coupled_remove(pair, 2)
        np.testing.assert_allclose(pair.product(), before, atol=1e-15, rtol=0)

    def test_moments_follow(self):
        m, pair = pair_of(seed=6)
        opt = AdamState()
        rng = nx.Rng(6)
        opt.step(m.params, {k: rng.normal(*v.shape) for k, v in m.params.items()})
        m_in = opt.m["L0.ffn.in"].copy()
        coupled_remove(pair, [0, 4], optimizer=opt)
        assert opt.moment_shapes_match(m.params)
        np.testing.assert_array_equal(opt.m["L0.ffn.in"], m_in[:, [1, 2, 3, 5]])

    def test_floor(self):
        m, pair = pair_of()
        with pytest.raises(ValueError, match="min_inner_dim"):
            coupled_remove(pair, [0, 1, 2, 3, 4])

    def test_out_of_range(self):
        m, pair = pair_of()
        with pytest.raises(IndexError):
            coupled_remove(pair, 6)

    def test_rope_removes_whole_blocks(self):
        m, pair = pair_of("QK", rope=True)
        coupled_remove(pair, 1)
        assert m.params["L0.q0"].shape[1] == 2 and m.buffers["L0.q0.rope"].shape == (1, 1)


class TestUncoupled:
    def test_independent_argmins(self):
        m, pair = pair_of(d_model=2, d_ffn=2)
        m.params["L0.ffn.in"] = np.array([[1.0, 0.0], [0.0, 3.0]])
        m.params["L0.ffn.out"] = np.array([[2.0, 0.0], [0.0, 1.0]])
        u1, u2 = uncoupled_remove(pair, 1, min_inner_dim=1)
        assert (u1, u2) == ([0], [1])
        np.testing.assert_array_equal(pair.product(), [[0.0, 0.0], [6.0, 0.0]])

    def test_refuses_groups(self):
        m, pair = pair_of("QK", heads=2, groups=1)
        with pytest.raises(ValueError):
            uncoupled_remove(pair, 1)


class TestTSVD:
    def test_full_rank_exact(self):
        rng = nx.Rng(7)
        w1, w2 = rng.normal(6, 4), rng.normal(4, 5)
        a, b = tsvd_reference(w1, w2, 4)
        assert np.abs(a @ b - w1 @ w2).max() <= 1e-9

    def test_diagonal(self):
        a, b = tsvd_reference(np.diag([3.0, 1.0]), np.eye(2), 1)
        assert nx.frobenius_norm(np.diag([3.0, 1.0]) - a @ b) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(a @ b, [[3, 0], [0, 0]], atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_eckart_young(self, seed):
        rng = nx.Rng(seed)
        w1, w2 = rng.normal(8, 6), rng.normal(6, 8)
        a, b = tsvd_reference(w1, w2, 5)
        j = int(np.argmin(nx.column_norms(w1) * nx.row_norms(w2)))
        coupled = nx.remove_column(w1, j) @ nx.remove_row(w2, j)
        assert nx.frobenius_norm(w1 @ w2 - a @ b) <= nx.frobenius_norm(w1 @ w2 - coupled) + 1e-12

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            tsvd_reference(np.eye(2), np.eye(2), 3)


def toy(seed, corpus):
    return Model(ModelConfig(vocab=corpus.vocab, d_model=16, layers=2, heads=2, d_ffn=32, max_seq_len=32), seed=seed)


class TestSchedule:
    @pytest.mark.parametrize("kw", [dict(target_params=0), dict(target_params=5, theta=0.0),
                                    dict(target_params=5, top_k_fraction=0.0), dict(target_params=5, kinds=("XX",)),
                                    dict(target_params=5, scoring="random"), dict(target_params=5, cadence=0)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            SparsifySchedule(**kw)

    def test_noop_when_met(self, corpus):
        m = toy(0, corpus)
        rep = run_schedule_step(m, None, corpus.sample(2, 8, nx.Rng(0)), SparsifySchedule(param_count(m)))
        assert rep.rows == [] and rep.params_after == rep.params_before

    @pytest.mark.parametrize("seed", range(3))
    def test_training_reaches_budget_monotonically(self, corpus, seed):
        m = toy(seed, corpus)
        target = int(0.8 * param_count(m))
        checks = []

        def on_step(step, model, opt):
            checks.append(opt.moment_shapes_match(model.params) and all(p.inner_dim >= 2 for p in coupled_pairs(model)))

        cfg = TrainConfig(epochs=100, steps_per_epoch=10, batch_size=2, seq_len=16, lr=1e-2, seed=seed,
                          eval_batches=1, calib_size=4, schedule=SparsifySchedule(target))
        r = train(m, corpus, cfg, on_step=on_step)
        assert r.budget_met and param_count(m) <= target
        assert all(a >= b for a, b in zip(r.param_trajectory, r.param_trajectory[1:]))
        assert all(checks)

    def test_lower_theta_removes_more(self, corpus):
        m = toy(1, corpus)
        batch = corpus.sample(4, 16, nx.Rng(1))
        dims = {}
        for theta in (0.90, 0.99):
            try:
                rep = run_schedule_step(m.copy(), None, batch, SparsifySchedule(10, theta=theta, top_k_fraction=1.0))
                dims[theta] = rep.dims_removed
            except BudgetInfeasible:
                dims[theta] = 0
        assert dims[0.99] < dims[0.90]

    def test_stops_at_pair_boundary(self, corpus):
        m = toy(2, corpus)
        target = param_count(m) - 1
        rep = run_schedule_step(m, None, corpus.sample(4, 16, nx.Rng(2)), SparsifySchedule(target, top_k_fraction=1.0))
        assert len(rep.rows) == 1 and rep.params_after <= target

    def test_full_theta_removes_nothing(self, corpus):
        m = toy(3, corpus)
        rep = run_schedule_step(m, None, corpus.sample(2, 8, nx.Rng(3)), SparsifySchedule(10, theta=1.0))
        assert rep.rows == [] and param_count(m) == rep.params_before

    def test_infeasible_at_floor(self, corpus):
        m = toy(3, corpus)
        for pair in coupled_pairs(m):
            block = 2 if pair.rope else 1
            coupled_remove(pair, list(range((pair.inner_dim - 2) // block)))
        with pytest.raises(BudgetInfeasible):
            run_schedule_step(m, None, corpus.sample(2, 8, nx.Rng(3)), SparsifySchedule(10))

    def test_selection_ignores_theta(self, corpus):
        m = toy(7, corpus)
        batch = corpus.sample(4, 16, nx.Rng(7))
        removed = {}
        for theta in (0.8, 0.85, 0.9, 0.95):
            rep = run_schedule_step(m.copy(), None, batch, SparsifySchedule(10, theta=theta, top_k_fraction=0.5))
            removed[theta] = {(r.pair_id, r.dims_removed) for r in rep.rows}
        pairs = [{p for p, _ in removed[t]} for t in (0.8, 0.85, 0.9, 0.95)]
        assert all(hi <= lo for lo, hi in zip(pairs, pairs[1:]))

    def test_kinds_restrict_scope(self, corpus):
        m = toy(4, corpus)
        rep = run_schedule_step(m, None, corpus.sample(4, 16, nx.Rng(4)),
                                SparsifySchedule(10, kinds=("IO",), top_k_fraction=1.0))
        assert rep.rows and {r.kind for r in rep.rows} == {"IO"}

    def test_min_reachable(self, corpus):
        m = toy(5, corpus)
        floor = min_reachable_params(m, SparsifySchedule(10))
        d = m.config.d_model
        # every QK/VO pair ends at 2 dims, each FFN at 2 units
        lost = 2 * (2 * 2 * (8 - 2) * 2 * d) + 2 * (30 * (2 * d + 1))
        assert floor == param_count(m) - lost
        assert param_count(m) == param_count(toy(5, corpus))

    def test_removal_csv(self, corpus, tmp_path):
        m = toy(6, corpus)
        rep = run_schedule_step(m, None, corpus.sample(4, 16, nx.Rng(6)), SparsifySchedule(10, top_k_fraction=1.0), step=7)
        write_removal_csv(tmp_path / "r.csv", [rep])
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["step", "pair_id", "kind", "dims_removed", "params_before", "params_after"]
        assert len(rows) == 1 + len(rep.rows) and rows[1][0] == "7"
