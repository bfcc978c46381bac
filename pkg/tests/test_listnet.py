import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sessionrank import nn
from sessionrank.datamodel import QueryBlock
from sessionrank.gradcheck import check_listnet, tiny_listnet
from sessionrank.listnet import (
    ListNetRanker,
    RankModel,
    listnet_backward,
    listnet_loss,
    listnet_loss_and_grad,
    n_groups,
    project_item,
    rank_items,
    score,
    score_items,
    topk_group_probability,
    train_listrank,
)
from sessionrank.sie import SessionEmbedder, extract_representations

from .conftest import TINY_RANK, TINY_SIE


def brute_prob(scores, group):
    """Plain-Python Plackett-Luce product, no shifting or vectorisation."""
    p, remaining = 1.0, list(range(len(scores)))
    for j in group:
        p *= math.exp(scores[j]) / math.fsum(math.exp(scores[r]) for r in remaining)
        remaining.remove(j)
    return p


def brute_loss(scores, labels, k):
    return -math.fsum(
        brute_prob(labels, g) * math.log(brute_prob(scores, g))
        for g in itertools.permutations(range(len(scores)), k)
    )


class TestTopKProbability:
    def test_single_item(self):
        assert topk_group_probability([3.7], [0]) == 1.0

    def test_two_items_hand(self):
        assert topk_group_probability([0.0, math.log(2)], [1]) == pytest.approx(2 / 3, abs=1e-12)

    def test_duplicate_index_rejected(self):
        with pytest.raises(ValueError):
            topk_group_probability([0.1, 0.2, 0.3], [1, 1])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            topk_group_probability([0.1, 0.2], [2])

    @pytest.mark.parametrize("n,k", [(n, k) for n in range(1, 9) for k in range(1, 4) if k <= n])
    def test_normalises(self, n, k):
        rng = np.random.default_rng(n * 10 + k)
        for _ in range(5):
            z = rng.normal(scale=3, size=n)
            total = math.fsum(topk_group_probability(z, g)
                              for g in itertools.permutations(range(n), k))
            assert abs(total - 1.0) <= 1e-9

    def test_large_scores_stable(self):
        p = topk_group_probability([1000.0, 999.0, -1000.0], [0, 1])
        assert p == pytest.approx(brute_prob([1.0, 0.0, -1999.0], [0, 1]), rel=1e-12)


class TestListNetLoss:
    def test_matching_scores_give_label_entropy(self):
        y = np.array([0.0, 1.0])
        p = np.exp(y) / np.exp(y).sum()
        assert listnet_loss(y, y, k=1) == pytest.approx(-(p * np.log(p)).sum(), abs=1e-12)

    def test_k1_equals_softmax_cross_entropy(self):
        z, y = np.array([0.3, -1.2, 2.0, 0.1]), np.array([0, 2, 1, 0])
        expected = nn.cross_entropy(nn.softmax(y.astype(float)), nn.softmax(z))
        assert listnet_loss(z, y, k=1) == pytest.approx(expected, abs=1e-12)

    def test_single_item_list(self):
        loss, grad = listnet_loss_and_grad([4.0], [2], k=1)
        assert loss == 0.0 and grad.tolist() == [0.0]

    @pytest.mark.parametrize("bad", [dict(scores=[1.0], labels=[1, 2], k=1),
                                     dict(scores=[1.0, 2.0], labels=[1, 2], k=3),
                                     dict(scores=[], labels=[], k=1)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            listnet_loss(**bad)

    @pytest.mark.parametrize("n,k", [(n, k) for n in range(2, 8) for k in (1, 2, 3) if k <= n])
    def test_matches_brute_force(self, n, k):
        rng = np.random.default_rng([n, k])
        z = rng.normal(size=n)
        y = rng.integers(0, 3, size=n)
        assert abs(listnet_loss(z, y, k=k) - brute_loss(list(z), list(map(float, y)), k)) <= 1e-10

    def test_top1_fallback_above_cap(self):
        z = np.linspace(-1, 1, 12)
        y = np.arange(12) % 3
        assert n_groups(12, 10) > 5000
        assert listnet_loss(z, y, k=10) == pytest.approx(listnet_loss(z, y, k=1), abs=1e-12)
        assert listnet_loss(z, y, k=3, enumeration_cap=10) == pytest.approx(
            listnet_loss(z, y, k=1), abs=1e-12)

    def test_temperature_scales_targets(self):
        z, y = np.array([0.5, 0.1, -0.3]), np.array([2, 0, 1])
        assert listnet_loss(z, y, k=2, label_temperature=2.0) == pytest.approx(
            listnet_loss(z, y / 2.0, k=2), abs=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_zero_gradient_at_shifted_labels(self, k):
        y = np.array([0.0, 2.0, 1.0, 1.0, 0.0])
        assert np.abs(listnet_backward(y + 4.2, y, k=k)).max() < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=6),
           st.integers(1, 3), st.floats(-10, 10), st.randoms())
    def test_shift_invariance_and_zero_sum(self, scores, k, shift, rnd):
        k = min(k, len(scores))
        y = [rnd.randint(0, 2) for _ in scores]
        z = np.array(scores)
        loss, grad = listnet_loss_and_grad(z, y, k=k)
        assert listnet_loss(z + shift, y, k=k) == pytest.approx(loss, abs=1e-9)
        assert abs(grad.sum()) < 1e-9

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_gradient_finite_difference(self, k):
        rng = np.random.default_rng(k)
        z, y = rng.normal(size=6), rng.integers(0, 3, size=6)
        grad = listnet_backward(z, y, k=k)
        eps = 1e-6
        num = np.array([(listnet_loss(z + eps * e, y, k=k) - listnet_loss(z - eps * e, y, k=k))
                        / (2 * eps) for e in np.eye(6)])
        assert np.abs(grad - num).max() < 1e-7


class TestScoring:
    def model(self):
        model, s, block = tiny_listnet(0, n=5, k=2)
        return model, s, block

    def test_zero_session_scores_zero(self):
        model, s, block = self.model()
        assert np.all(score_items(np.zeros_like(s), model, block.shown_items) == 0)

    def test_basis_vector_picks_coordinate(self):
        model, s, block = self.model()
        item = block.shown_items[0]
        e = np.zeros_like(s)
        e[2] = 1.0
        assert score(e, model, item) == pytest.approx(project_item(model, item)[2])

    def test_zero_weights_give_half(self):
        model, s, block = self.model()
        for layer in model.projection:
            layer.weights[:] = 0
            layer.bias[:] = 0
        assert np.allclose(project_item(model, block.shown_items[0]), 0.5)

    def test_projection_in_unit_interval(self):
        model, s, block = self.model()
        p = np.stack([project_item(model, i) for i in block.shown_items])
        assert np.all((p > 0) & (p < 1))

    def test_dimension_mismatch(self):
        model, s, block = self.model()
        with pytest.raises(ValueError):
            score(np.ones(len(s) + 1), model, block.shown_items[0])

    def test_oov_item_scored(self):
        model, s, _ = self.model()
        assert np.isfinite(score(s, model, "never-seen"))

    def test_gradcheck(self):
        for k in (1, 2, 3):
            assert check_listnet(1, n=5, k=k).passed


class TestRankModel:
    def test_projection_width_must_match(self, tiny_models):
        sie_model, _ = tiny_models
        with pytest.raises(ValueError):
            RankModel.from_sie(sie_model, proj_widths=(6, 5))

    def test_item_table_copied(self, tiny_models):
        sie_model, _ = tiny_models
        rm = RankModel.from_sie(sie_model, proj_widths=(6, 6))
        assert np.array_equal(rm.item_embeddings.vectors, sie_model.item_embeddings.vectors)
        rm.item_embeddings.vectors[1] += 1.0
        assert not np.array_equal(rm.item_embeddings.vectors, sie_model.item_embeddings.vectors)

    def test_json_roundtrip(self, tiny_models):
        _, rm = tiny_models
        back = RankModel.from_json(rm.to_json())
        assert back.to_json() == rm.to_json()
        for name, value in rm.params().items():
            assert np.array_equal(back.params()[name], value)


class TestTraining:
    def test_zero_epochs_keeps_sie_embeddings(self, small_dataset, tiny_models):
        sie_model, _ = tiny_models
        rm = train_listrank(small_dataset, sie_model, **{**TINY_RANK, "epochs": 0})
        assert np.array_equal(rm.item_embeddings.vectors, sie_model.item_embeddings.vectors)

    def test_sie_stays_frozen(self, small_dataset, tiny_models):
        sie_model, _ = tiny_models
        before = {k: v.copy() for k, v in sie_model.params().items()}
        train_listrank(small_dataset, sie_model, **TINY_RANK)
        for k, v in sie_model.params().items():
            assert np.array_equal(v, before[k])

    def test_deterministic(self, small_dataset, tiny_models):
        sie_model, _ = tiny_models
        a = train_listrank(small_dataset, sie_model, **TINY_RANK)
        b = train_listrank(small_dataset, sie_model, **TINY_RANK)
        assert a.to_json() == b.to_json()

    def test_loss_non_increasing_early(self, small_dataset, tiny_models):
        from sessionrank.sie import TrainLog
        sie_model, _ = tiny_models
        log = TrainLog()
        train_listrank(small_dataset, sie_model, log=log, **{**TINY_RANK, "epochs": 3, "eta": 0.5})
        losses = [r["mean_loss"] for r in log.rows]
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_no_clicks_rejected(self, tiny_models):
        sie_model, _ = tiny_models
        block = QueryBlock("s", "q", 0, ("i0001", "i0002"), (0, 0))
        with pytest.raises(ValueError):
            train_listrank([block], sie_model, **TINY_RANK)

    def test_rank_items_stable_ties(self, tiny_models):
        sie_model, rm = tiny_models
        block = QueryBlock("s", "q", 0, ("x1", "x2", "x3"), (0, 0, 0))
        # unseen items share the OOV row, so every score ties
        assert rank_items(block, sie_model, rm) == ["x1", "x2", "x3"]


class TestEstimator:
    def test_fit_from_embedder(self, small_dataset):
        ranker = ListNetRanker(SessionEmbedder(**TINY_SIE), **TINY_RANK).fit(small_dataset)
        assert hasattr(ranker.embedder_, "model_")
        assert ranker.get_params()["k"] == TINY_RANK["k"]
        block = small_dataset.test[0]
        assert sorted(ranker.rank(block)) == sorted(block.shown_items)
        assert ranker.decision_function(block).shape == (len(block.shown_items),)
        assert 0.0 <= ranker.score(small_dataset) <= 1.0

    def test_unfitted(self, small_dataset):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            ListNetRanker().rank(small_dataset.test[0])

    def test_from_models_matches_functions(self, small_dataset, tiny_models):
        sie_model, rm = tiny_models
        ranker = ListNetRanker.from_models(sie_model, rm)
        block = small_dataset.test[0]
        s = extract_representations([block], sie_model)[0]
        assert np.allclose(ranker.decision_function(block), score_items(s, rm, block.shown_items))


class TestExtremeScores:
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_tiny_group_probabilities_not_clamped(self, k):
        z = np.array([25.0, -25.0, 0.0, 12.0])
        y = np.array([0, 2, 1, 0])
        assert listnet_loss(z, y, k=k) == pytest.approx(
            brute_loss(list(z), list(map(float, y)), k), rel=1e-12)
