import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tif import losses
from tif.losses import LossWeights


def t(a):
    return torch.tensor(a, dtype=torch.float64)


def unit_rows(rng, *shape):
    a = rng.normal(size=shape)
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


class TestClsLoss:
    def test_zero_logit(self):
        assert losses.cls_loss(t([0.0]), t([1.0])).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_saturation(self):
        assert losses.cls_loss(t([20.0]), t([1.0])).item() == pytest.approx(2.061e-9, rel=1e-3)

    def test_matches_naive_formula(self, rng):
        z = rng.uniform(-8, 8, size=50)
        y = rng.integers(0, 2, size=50)
        assert losses.cls_loss(t(z), t(y)).item() == pytest.approx(
            oracles.mean_bce(z, y), abs=1e-9
        )

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            losses.cls_loss(t([]), t([]))


class TestProxyAlignment:
    def test_uniform_similarities_give_log_k(self):
        # embedding orthogonal to both proxies -> equal similarities
        emb = t([[1.0, 0.0, 0.0]])
        proxies = t([[[0, 1.0, 0], [0, 0, 1.0]], [[0, 1.0, 0], [0, 0, 1.0]]])
        val = losses.proxy_alignment_loss(emb, t([1]), proxies, 0.1)
        assert val.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_single_proxy_is_zero(self, rng):
        emb = t(unit_rows(rng, 5, 4))
        proxies = t(unit_rows(rng, 2, 1, 4))
        val = losses.proxy_alignment_loss(emb, t([0, 1, 1, 0, 1]), proxies, 0.1)
        assert val.item() == pytest.approx(0.0, abs=1e-12)

    def test_three_embeddings_against_loop(self, rng):
        emb = unit_rows(rng, 3, 5)
        proxies = unit_rows(rng, 2, 3, 5)
        y = [0, 1, 1]
        got = losses.proxy_alignment_loss(t(emb), t(y), t(proxies), 0.1).item()
        assert got == pytest.approx(oracles.pal(emb.tolist(), y, proxies.tolist(), 0.1), abs=1e-8)

    def test_absent_class_is_skipped(self, rng):
        emb = unit_rows(rng, 4, 3)
        proxies = unit_rows(rng, 2, 3, 3)
        only_malware = losses.proxy_alignment_loss(t(emb), t([1, 1, 1, 1]), t(proxies), 0.2)
        direct = losses._assignment_entropy(t(emb), t(proxies[1]), 0.2)
        assert only_malware.item() == pytest.approx(direct.item(), abs=1e-14)

    def test_no_class_present(self, rng):
        with pytest.raises(ValueError):
            losses.proxy_alignment_loss(t(unit_rows(rng, 2, 3)), t([5, 5]), t(unit_rows(rng, 2, 2, 3)), 0.1)

    def test_temperature_scaling_identity(self, rng):
        emb = unit_rows(rng, 6, 4)
        proxies = unit_rows(rng, 2, 3, 4)
        y = t([0, 1, 0, 1, 1, 0])
        a = losses.proxy_alignment_loss(t(emb), y, t(proxies), 0.3).item()
        b = losses.proxy_alignment_loss(t(emb) / 2.0, y, t(proxies), 0.15).item()
        assert a == pytest.approx(b, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 6), tau=st.floats(0.05, 2.0))
    def test_bounded_by_log_k(self, seed, k, tau):
        rng = np.random.default_rng(seed)
        emb = unit_rows(rng, 7, 5)
        val = losses.proxy_alignment_loss(
            t(emb), t(rng.integers(0, 2, 7)), t(unit_rows(rng, 2, k, 5)), tau
        ).item()
        assert -1e-12 <= val <= math.log(k) + 1e-12


class TestIntraDiversity:
    def test_unit_distance(self):
        proxies = t([[[0.0, 0.0], [1.0, 0.0]]])
        assert losses.intra_diversity_loss(proxies).item() == pytest.approx(-1.0)

    def test_identical_proxies(self):
        proxies = t([[[0.6, 0.8]] * 3, [[1.0, 0.0]] * 3])
        assert losses.intra_diversity_loss(proxies).item() == 0.0

    def test_single_proxy_defined_as_zero(self, rng):
        assert losses.intra_diversity_loss(t(unit_rows(rng, 2, 1, 4))).item() == 0.0

    def test_random_against_loop(self, rng):
        P = rng.normal(size=(2, 4, 6))
        assert losses.intra_diversity_loss(t(P)).item() == pytest.approx(
            oracles.intra(P.tolist()), abs=1e-10
        )

    def test_gradient_finite_at_coincident_proxies(self):
        P = t([[[0.6, 0.8]] * 2, [[1.0, 0.0], [0.0, 1.0]]]).requires_grad_(True)
        losses.intra_diversity_loss(P).backward()
        assert torch.isfinite(P.grad).all()


class TestInterSeparation:
    def test_margin_satisfied(self):
        proxies = t([[[1.0, 0.0]], [[-1.0, 0.0]]])
        assert losses.inter_separation_loss(proxies, 1.0).item() == 0.0

    def test_center_distance_point_four(self):
        proxies = t([[[0.0, 0.0], [0.0, 0.0]], [[0.4, 0.0], [0.4, 0.0]]])
        assert losses.inter_separation_loss(proxies, 1.0).item() == pytest.approx(0.6)

    def test_random_against_loop(self, rng):
        P = rng.normal(size=(2, 3, 4)) * 0.3
        assert losses.inter_separation_loss(t(P), 1.5).item() == pytest.approx(
            oracles.inter(P.tolist(), 1.5), abs=1e-10
        )

    def test_needs_two_classes(self, rng):
        with pytest.raises(ValueError):
            losses.inter_separation_loss(t(rng.normal(size=(1, 3, 4))), 1.0)


class TestMPC:
    def test_zero_lambdas_reduce_to_alignment(self, rng):
        emb, P, y = t(unit_rows(rng, 5, 4)), t(unit_rows(rng, 2, 3, 4)), t([0, 1, 1, 0, 1])
        w = LossWeights(lambda_intra=0.0, lambda_inter=0.0)
        assert losses.mpc_loss(emb, y, P, w).total.item() == pytest.approx(
            losses.proxy_alignment_loss(emb, y, P, w.tau).item(), abs=1e-15
        )

    def test_fixture_weighted_sum(self):
        # alignment = ln 2, intra = -1, inter = 0.6 (see the fixtures above)
        emb = t([[1.0, 0.0, 0.0]])
        P = t([[[0, 0, 0.0], [0, 0, 0.0]], [[0, 0.4, 0.0], [0, 0.4, 0.0]]])
        w = LossWeights(lambda_intra=0.5, lambda_inter=2.0)
        terms = losses.mpc_loss(emb, t([0]), P, w)
        assert terms.pal.item() == pytest.approx(math.log(2))
        assert terms.intra.item() == 0.0
        assert terms.inter.item() == pytest.approx(0.6)
        assert terms.total.item() == pytest.approx(math.log(2) + 2.0 * 0.6)

    def test_random_compositional(self, rng):
        emb, P = unit_rows(rng, 8, 5), unit_rows(rng, 2, 4, 5)
        y = rng.integers(0, 2, 8)
        w = LossWeights(lambda_intra=0.3, lambda_inter=0.7, tau=0.2, margin=1.3)
        got = losses.mpc_loss(t(emb), t(y), t(P), w).total.item()
        want = (oracles.pal(emb.tolist(), y.tolist(), P.tolist(), 0.2)
                + 0.3 * oracles.intra(P.tolist()) + 0.7 * oracles.inter(P.tolist(), 1.3))
        assert got == pytest.approx(want, abs=1e-10)


class TestIGA:
    def test_zero_logits_contribute_nothing(self):
        g = losses.dummy_scale_gradient(t([0.0, 0.0, 0.0]), t([1, 0, 1]))
        assert g.item() == 0.0

    def test_calibrated_saturation(self):
        for z in (10.0, 20.0, 40.0):
            assert abs(losses.dummy_scale_gradient(t([z]), t([1])).item()) < 1e-3
        assert abs(losses.dummy_scale_gradient(t([40.0]), t([1])).item()) < 1e-15

    def test_two_environments_against_fd(self, rng):
        z = [rng.normal(size=4) * 2 for _ in range(2)]
        y = [rng.integers(0, 2, 4) for _ in range(2)]
        got = losses.iga_penalty_from_logits([t(a) for a in z], [t(b) for b in y]).item()
        want = oracles.iga([a.tolist() for a in z], [b.tolist() for b in y])
        assert got == pytest.approx(want, abs=1e-9)

    def test_empty_environment(self):
        with pytest.raises(ValueError):
            losses.iga_penalty_from_logits([t([]), t([1.0])], [t([]), t([1])])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_nonnegative_and_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        z = [t(rng.normal(size=5) * 3) for _ in range(3)]
        y = [t(rng.integers(0, 2, 5)) for _ in range(3)]
        base = losses.iga_penalty_from_logits(z, y).item()
        assert base >= 0
        perm = rng.permutation(5)
        shuffled = losses.iga_penalty_from_logits([a[perm] for a in z], [b[perm] for b in y]).item()
        reordered = losses.iga_penalty_from_logits(z[::-1], y[::-1]).item()
        assert shuffled == pytest.approx(base, abs=1e-14)
        assert reordered == pytest.approx(base, abs=1e-14)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(tau=0.0)
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0)
