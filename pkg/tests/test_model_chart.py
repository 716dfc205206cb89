"""Chart model tests: composition, splits, modules, forward, locality."""

import numpy as np
import pytest

import chart_reference as ref
from glt import tensor as T
from glt.model import (ModelConfig, compose_den, compose_rep, forward, init_params,
                       module_intersection, module_skip, module_union, module_visual)

H = 8
N_OBJ = 4


def text_cfg(**kw):
    base = dict(vocab_size=12, n_answers=11, h_dim=H, max_len=6, grounded=False, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def grounded_cfg(**kw):
    base = dict(vocab_size=12, n_answers=11, h_dim=H, feat_dim=6, max_len=6,
                grounded=True, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def f64_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, dtype=np.float64)
    # the trained init zeroes the answer head; randomize it so answer-path
    # assertions are not vacuous
    params["w_ans"].data[:] = 0.3 * rng.standard_normal(params["w_ans"].data.shape)
    return params


def rand_unit(rng, *shape):
    return rng.standard_normal(shape)


class TestComposeRep:
    def test_equal_children_equal_attention(self):
        p = f64_params(text_cfg(), seed=1)
        p["a_r"].data[:] = p["a_l"].data
        rng = np.random.default_rng(2)
        h = rand_unit(rng, H)
        got = compose_rep(p, h, h).data
        h_hat = 0.5 * (h @ p["w_l"].data) + 0.5 * (h @ p["w_r"].data)
        want = np.maximum(h_hat @ p["ff_rep_w"].data + p["ff_rep_b"].data, 0.0) + h_hat
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_zero_weights_give_zero(self):
        p = f64_params(text_cfg())
        for name in ("a_l", "a_r", "w_l", "w_r", "ff_rep_w", "ff_rep_b"):
            p[name].data[:] = 0.0
        rng = np.random.default_rng(3)
        out = compose_rep(p, rand_unit(rng, H), rand_unit(rng, H)).data
        np.testing.assert_array_equal(out, np.zeros(H))

    def test_matches_scalar_oracle(self):
        p = f64_params(text_cfg(), seed=4)
        pf = {k: t.data for k, t in p.items()}
        rng = np.random.default_rng(5)
        for _ in range(20):
            hl, hr = rand_unit(rng, H), rand_unit(rng, H)
            got = compose_rep(p, hl, hr).data
            np.testing.assert_allclose(got, ref.compose_pair(pf, hl, hr), atol=1e-6)


class TestSplitDistribution:
    def test_two_token_span_has_one_split(self):
        cfg = text_cfg()
        p = f64_params(cfg)
        res = forward(p, cfg, np.array([[1], [2]]))
        a = res.alpha_of[(0, 2)]
        assert a.shape == (1, 1)
        np.testing.assert_allclose(a, [[1.0]])

    def test_zero_scorer_is_uniform(self):
        cfg = text_cfg()
        p = f64_params(cfg, seed=6)
        p["split_s"].data[:] = 0.0
        res = forward(p, cfg, np.array([[1], [2], [3], [4]]))
        np.testing.assert_allclose(res.alpha_of[(0, 4)][:, 0], np.full(3, 1 / 3),
                                   atol=1e-12)

    def test_matches_bruteforce_enumeration(self):
        cfg = text_cfg()
        p = f64_params(cfg, seed=7)
        ids = [3, 1, 4, 1]
        res = forward(p, cfg, np.array(ids)[:, None])
        oracle = ref.ReferenceChart(p, ids, cfg.max_len)
        for (i, j), a in res.alpha_of.items():
            np.testing.assert_allclose(a[:, 0], oracle.alpha(i, j), atol=1e-6)


class TestChartEquivalence:
    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_text_chart_matches_reference(self, n):
        cfg = text_cfg()
        p = f64_params(cfg, seed=10 + n)
        rng = np.random.default_rng(20 + n)
        ids = rng.integers(0, cfg.vocab_size, size=n)
        res = forward(p, cfg, ids[:, None])
        oracle = ref.ReferenceChart(p, ids, cfg.max_len)
        for (i, j), h in res.h_of.items():
            np.testing.assert_allclose(h[0], oracle.h(i, j), atol=1e-6)
        np.testing.assert_allclose(res.answer_probs()[0], oracle.answer_probs(), atol=1e-6)

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_grounded_chart_matches_reference(self, n):
        cfg = grounded_cfg()
        p = f64_params(cfg, seed=30 + n)
        rng = np.random.default_rng(40 + n)
        ids = rng.integers(0, cfg.vocab_size, size=n)
        v = rng.standard_normal((N_OBJ, H))
        res = forward(p, cfg, ids[:, None], v_mat=T.Tensor(v[None]))
        oracle = ref.ReferenceChart(p, ids, cfg.max_len, v=v)
        for (i, j), h in res.h_of.items():
            np.testing.assert_allclose(h[0], oracle.h(i, j), atol=1e-6)
        for (i, j), d in res.d_of.items():
            np.testing.assert_allclose(d[0], oracle.d(i, j), atol=1e-6)
        np.testing.assert_allclose(res.answer_probs()[0], oracle.answer_probs(), atol=1e-6)


class TestCallCounts:
    def test_counts_match_closed_forms(self):
        cfg = grounded_cfg(max_len=8)
        p = f64_params(cfg)
        n = 6
        rng = np.random.default_rng(0)
        v = T.Tensor(rng.standard_normal((1, N_OBJ, H)))
        res = forward(p, cfg, np.arange(n)[:, None], v_mat=v)
        assert res.fd_calls == n * (n - 1) // 2
        assert res.compose_calls == sum((n - l + 1) * (l - 1) for l in range(2, n + 1))


class TestForward:
    def test_single_token_outputs(self):
        cfg = grounded_cfg()
        p = f64_params(cfg, seed=8)
        rng = np.random.default_rng(9)
        v = rng.standard_normal((N_OBJ, H))
        res = forward(p, cfg, np.array([[5]]), v_mat=T.Tensor(v[None]))
        want_h = ref.layer_norm_vec(p["embed"].data[5], p["ln_gain_1"].data,
                                    p["ln_bias_1"].data)
        np.testing.assert_allclose(res.h_of[(0, 1)][0], want_h, atol=1e-12)
        np.testing.assert_allclose(res.d_of[(0, 1)][0], ref.sigmoid_scalar(v @ want_h),
                                   atol=1e-12)

    def test_answer_distribution_sums_to_one(self):
        cfg = text_cfg()
        p = f64_params(cfg, seed=11)
        res = forward(p, cfg, np.array([[1, 2], [3, 4], [5, 6]]))
        np.testing.assert_allclose(res.answer_probs().sum(axis=-1), [1.0, 1.0], atol=1e-6)

    def test_out_of_vocab_id_rejected(self):
        cfg = text_cfg()
        p = f64_params(cfg)
        with pytest.raises(IndexError):
            forward(p, cfg, np.array([[cfg.vocab_size]]))

    def test_invariants_alpha_and_denotation_ranges(self):
        cfg = grounded_cfg()
        p = f64_params(cfg, seed=12)
        rng = np.random.default_rng(13)
        ids = rng.integers(0, cfg.vocab_size, size=(5, 3))
        v = T.Tensor(rng.standard_normal((3, N_OBJ, H)))
        res = forward(p, cfg, ids, v_mat=v)
        for (i, j), a in res.alpha_of.items():
            assert a.shape[0] == j - i - 1
            np.testing.assert_allclose(a.sum(axis=0), np.ones(3), atol=1e-6)
        for d in res.d_of.values():
            assert (d >= 0).all() and (d <= 1).all()
        for m in res.module_probs_of.values():
            np.testing.assert_allclose(m.sum(axis=-1), np.ones(3), atol=1e-6)


class TestSkipModule:
    def test_gate_limit_returns_left(self):
        p = f64_params(grounded_cfg())
        p["w_sk"].data[:, 0] = 10.0
        p["w_sk"].data[:, 1] = -10.0
        rng = np.random.default_rng(14)
        dl, dr = rng.random(N_OBJ), rng.random(N_OBJ)
        out = module_skip(p, dl, dr, np.ones(H)).data
        np.testing.assert_allclose(out, dl, atol=1e-12)

    def test_equal_sides_pass_through(self):
        p = f64_params(grounded_cfg(), seed=15)
        rng = np.random.default_rng(16)
        d = rng.random(N_OBJ)
        out = module_skip(p, d, d, rng.standard_normal(H)).data
        np.testing.assert_allclose(out, d, atol=1e-12)

    def test_output_in_unit_interval(self):
        p = f64_params(grounded_cfg(), seed=17)
        rng = np.random.default_rng(18)
        for _ in range(1000):
            dl, dr = rng.random(N_OBJ), rng.random(N_OBJ)
            out = module_skip(p, dl, dr, rng.standard_normal(H)).data
            assert (out >= 0).all() and (out <= 1).all()


class TestIntersectionUnion:
    def test_identity_elements(self):
        rng = np.random.default_rng(19)
        d = rng.random(N_OBJ)
        np.testing.assert_array_equal(module_intersection(d, np.ones(N_OBJ)).data, d)
        np.testing.assert_array_equal(module_union(d, np.zeros(N_OBJ)).data, d)

    def test_idempotence(self):
        rng = np.random.default_rng(20)
        d = rng.random(N_OBJ)
        np.testing.assert_array_equal(module_intersection(d, d).data, d)
        np.testing.assert_array_equal(module_union(d, d).data, d)

    def test_exhaustive_binary_pairs_equal_set_ops(self):
        for a_bits in range(16):
            for b_bits in range(16):
                a = np.array([(a_bits >> i) & 1 for i in range(N_OBJ)], dtype=np.float64)
                b = np.array([(b_bits >> i) & 1 for i in range(N_OBJ)], dtype=np.float64)
                set_a = {i for i in range(N_OBJ) if a[i]}
                set_b = {i for i in range(N_OBJ) if b[i]}
                inter = {i for i in range(N_OBJ) if module_intersection(a, b).data[i] == 1.0}
                union = {i for i in range(N_OBJ) if module_union(a, b).data[i] == 1.0}
                assert inter == (set_a & set_b)
                assert union == (set_a | set_b)


class TestVisualModule:
    def test_range_and_zeroed_ff(self):
        p = f64_params(grounded_cfg(), seed=21)
        rng = np.random.default_rng(22)
        dl, dr = rng.random(N_OBJ), rng.random(N_OBJ)
        h = rng.standard_normal(H)
        v = rng.standard_normal((N_OBJ, H))
        out = module_visual(p, dl, dr, h, v).data
        assert (out > 0).all() and (out < 1).all()
        p["ff_vis_w"].data[:] = 0.0
        p["ff_vis_b"].data[:] = 0.0
        np.testing.assert_array_equal(module_visual(p, dl, dr, h, v).data,
                                      np.full(N_OBJ, 0.5))

    def test_matches_scalar_oracle(self):
        p = f64_params(grounded_cfg(), seed=23)
        pf = {k: t.data for k, t in p.items()}
        rng = np.random.default_rng(24)
        for _ in range(10):
            dl, dr = rng.random(N_OBJ), rng.random(N_OBJ)
            h = rng.standard_normal(H)
            v = rng.standard_normal((N_OBJ, H))
            got = module_visual(p, dl, dr, h, v).data
            np.testing.assert_allclose(got, ref.visual_module(pf, h, dl, dr, v), atol=1e-6)


class TestDenotationMixture:
    def test_concentrated_on_skip_right(self):
        p = f64_params(grounded_cfg(), seed=25)
        p["w_mod"].data[:] = 0.0
        p["w_mod"].data[:, 0] = 10.0
        p["w_sk"].data[:, 0] = -10.0
        p["w_sk"].data[:, 1] = 10.0
        rng = np.random.default_rng(26)
        dl, dr = rng.random(N_OBJ), rng.random(N_OBJ)
        v = rng.standard_normal((N_OBJ, H))
        out = compose_den(p, dl, dr, np.ones(H), v).data
        np.testing.assert_allclose(out, dr, atol=1e-12)

    def test_mixture_is_convex_combination_of_modules(self):
        p = f64_params(grounded_cfg(), seed=27)
        pf = {k: t.data for k, t in p.items()}
        rng = np.random.default_rng(28)
        dl, dr = rng.random(N_OBJ), rng.random(N_OBJ)
        h = rng.standard_normal(H)
        v = rng.standard_normal((N_OBJ, H))
        got = compose_den(p, dl, dr, h, v).data
        np.testing.assert_allclose(got, ref.mixture_module(pf, h, dl, dr, v), atol=1e-6)


class TestLocality:
    def test_out_of_span_perturbation_changes_nothing(self):
        cfg = grounded_cfg()
        p = f64_params(cfg, seed=29)
        rng = np.random.default_rng(30)
        n = 5
        ids = rng.integers(0, cfg.vocab_size, size=n)
        v = T.Tensor(rng.standard_normal((1, N_OBJ, H)))
        base = forward(p, cfg, ids[:, None], v_mat=v)
        for t in range(n):
            mutated = ids.copy()
            mutated[t] = (mutated[t] + 1) % cfg.vocab_size
            res = forward(p, cfg, mutated[:, None], v_mat=v)
            for (i, j), h in base.h_of.items():
                if not (i <= t < j):
                    np.testing.assert_array_equal(res.h_of[(i, j)], h)
                    np.testing.assert_array_equal(res.d_of[(i, j)], base.d_of[(i, j)])


class TestObjectPadding:
    def test_padded_columns_do_not_leak_into_real_outputs(self):
        from glt import grounding
        cfg = grounded_cfg()
        p = f64_params(cfg, seed=31)
        rng = np.random.default_rng(32)
        n_real = 3
        v_pred = rng.standard_normal((1, N_OBJ, cfg.feat_dim))
        boxes = rng.random((1, N_OBJ, 4))
        mask = np.zeros((1, N_OBJ), dtype=bool)
        mask[0, :n_real] = True
        ids = rng.integers(0, cfg.vocab_size, size=(4, 1))

        v_pad = grounding.contextualize_objects(p, v_pred, boxes, mask)
        res_pad = forward(p, cfg, ids, v_mat=v_pad)

        v_solo = grounding.contextualize_objects(p, v_pred[:, :n_real], boxes[:, :n_real])
        res_solo = forward(p, cfg, ids, v_mat=v_solo)

        np.testing.assert_allclose(res_pad.answer_logits.data, res_solo.answer_logits.data,
                                   atol=1e-9)
        for key, d in res_solo.d_of.items():
            np.testing.assert_allclose(res_pad.d_of[key][:, :n_real], d, atol=1e-9)
