import math

import numpy as np
import pytest
import torch

from imvc.base import ContractError, EmptyViewError
from imvc.imputation import (
    SimilarityTable,
    build_similarity_table,
    co_observed,
    compute_prototypes,
    impute_assignments,
    impute_features,
    pair_similarity,
)
from imvc.model import Provenance, hard_labels

from .conftest import random_mask


def t(rows):
    return torch.tensor(rows, dtype=torch.float64)


def test_co_observed():
    mask = t([[1, 1], [1, 0], [0, 1], [1, 1]])
    assert co_observed(mask, 0, 1).tolist() == [0, 3]
    assert co_observed(t([[1, 0], [0, 1]]), 0, 1).tolist() == []
    with pytest.raises(ContractError):
        co_observed(mask, 1, 1)


def test_pair_similarity_hand_values():
    q = t([[1, 0], [0, 1]])
    labels = hard_labels(q)
    index = torch.arange(2)
    expected = math.exp(2) / (math.exp(2) + 1)
    assert pair_similarity(q, q, index, labels, labels, 0.5) == pytest.approx(expected, abs=1e-12)

    same = t([[0.7, 0.3], [0.6, 0.4]])
    y = hard_labels(same)
    assert pair_similarity(same, same, index, y, y, 0.5) == pytest.approx(1.0, abs=1e-15)
    assert pair_similarity(same, q, torch.tensor([1]), y, labels, 0.5) == pytest.approx(1.0, abs=1e-15)


def test_two_view_rankings_ignore_scores():
    q = [torch.softmax(torch.randn(4, 3, dtype=torch.float64), dim=1) for _ in range(2)]
    table = build_similarity_table(q, [hard_labels(x) for x in q], torch.ones(4, 2), 0.5)
    assert table.rankings == [[1], [0]]
    assert ((table.sim >= 0) & (table.sim <= 1)).all()


def test_empty_co_observation_scores_zero_and_ranks_last():
    q = [torch.softmax(torch.randn(4, 2, dtype=torch.float64), dim=1) for _ in range(3)]
    mask = t([[1, 1, 0], [1, 1, 0], [0, 0, 1], [0, 1, 1]])
    table = build_similarity_table(q, [hard_labels(x) for x in q], mask, 0.5)
    assert table.co_counts[0, 2] == 0 and table.sim[0, 2] == 0
    assert table.rankings[0] == [1, 2]


def test_imputation_copies_from_first_available_ranked_view():
    q = [t([[0.9, 0.1]]), t([[0.2, 0.8]]), t([[0.6, 0.4]])]
    mask = t([[0, 1, 0]])
    table = SimilarityTable(t([[0, 0.2, 0.9], [0, 0, 0], [0, 0, 0]]), [[2, 1], [0, 2], [0, 1]], None)
    result = impute_assignments(q, mask, table)
    assert torch.equal(result.completed[0], q[1])
    assert result.sources[0].tolist() == [1]
    assert result.provenance[0].tolist() == [int(Provenance.IMPUTED)]
    assert result.provenance[1].tolist() == [int(Provenance.OBSERVED)]
    result.check_simplex()


def test_full_mask_is_identity():
    q = [torch.softmax(torch.randn(5, 3, dtype=torch.float64), dim=1) for _ in range(2)]
    h = [torch.randn(5, 4, dtype=torch.float64) for _ in range(2)]
    mask = torch.ones(5, 2, dtype=torch.float64)
    table = build_similarity_table(q, [hard_labels(x) for x in q], mask, 0.5)
    assignments = impute_assignments(q, mask, table)
    prototypes = [compute_prototypes(h[v], mask[:, v], assignments.labels[v], 3) for v in range(2)]
    bank = impute_features(h, mask, assignments, prototypes)
    assert all(torch.equal(a, b) for a, b in zip(assignments.completed, q))
    assert all(torch.equal(a, b) for a, b in zip(bank.completed, h))
    assert assignments.imputed_counts() == [0, 0] and bank.imputed_counts() == [0, 0]


def test_prototypes_and_fallback():
    h = t([[1, 1], [3, 3], [0, 0], [2, 2]])
    observed = t([1, 1, 0, 0])
    protos = compute_prototypes(h, observed, torch.tensor([0, 0, 1, 1]), 3)
    assert protos.centers[0].tolist() == [2, 2]
    assert protos.valid.tolist() == [True, False, False]
    assert protos.centers[1].tolist() == [2, 2]

    protos = compute_prototypes(h, t([0, 0, 1, 1]), torch.tensor([0, 0, 1, 1]), 2)
    assert protos.fallback.tolist() == [1, 1]
    assert protos.centers[0].tolist() == [1, 1]

    with pytest.raises(EmptyViewError):
        compute_prototypes(h, t([0, 0, 0, 0]), torch.tensor([0, 0, 1, 1]), 2, view=0)


def test_missing_feature_takes_prototype_of_argmax():
    h = [t([[1.0, 0.0], [5.0, 5.0], [0.0, 0.0]]), t([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])]
    mask = t([[1, 1], [1, 1], [0, 1]])
    q = [t([[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]]), t([[0.9, 0.1], [0.1, 0.9], [0.1, 0.9]])]
    assignments = impute_assignments(q, mask, SimilarityTable(t([[0, 1], [1, 0]]), [[1], [0]], None))
    protos = [compute_prototypes(h[v], mask[:, v], assignments.labels[v], 2) for v in range(2)]
    bank = impute_features(h, mask, assignments, protos)
    assert bank.completed[0][2].tolist() == [5.0, 5.0]
    assert bank.provenance[0].tolist() == [0, 0, int(Provenance.IMPUTED)]


def test_view_without_prototypes_is_unavailable():
    h = [t([[1.0], [2.0]]), t([[0.0], [0.0]])]
    mask = t([[1, 0], [1, 0]])
    q = [t([[1.0, 0.0], [0.0, 1.0]])] * 2
    assignments = impute_assignments(q, mask, SimilarityTable(t([[0, 1], [1, 0]]), [[1], [0]], None))
    protos = [compute_prototypes(h[0], mask[:, 0], assignments.labels[0], 2), None]
    bank = impute_features(h, mask, assignments, protos)
    assert bank.provenance[1].tolist() == [int(Provenance.UNAVAILABLE)] * 2


# Independent re-implementation in plain Python, straight from the definitions.

def oracle_similarity(q_v, q_u, labels_v, labels_u, index, tau):
    terms = []
    for i in index:
        s = {j: sum(a * b for a, b in zip(q_v[i], q_u[j])) / tau for j in index}
        negatives = [j for j in index if j == i or labels_v[i] != labels_u[j]]
        top = max(s[j] for j in negatives)
        log_den = top + math.log(sum(math.exp(s[j] - top) for j in negatives))
        terms.append(math.exp(s[i] - log_den))
    return sum(terms) / len(terms)


def oracle_impute(q, h, mask, k, tau):
    n, v_count = mask.shape
    labels = [[int(np.argmax(row)) for row in qv] for qv in q]
    sim = np.zeros((v_count, v_count))
    for v in range(v_count):
        for u in range(v_count):
            index = [i for i in range(n) if mask[i, v] == 1 and mask[i, u] == 1] if u != v else []
            if index:
                sim[v, u] = oracle_similarity(q[v], q[u], labels[v], labels[u], index, tau)
    rankings = []
    for v in range(v_count):
        others = [u for u in range(v_count) if u != v]
        rankings.append(sorted(others, key=lambda u: (-sim[v, u], u)))

    completed = []
    for v in range(v_count):
        rows = []
        for i in range(n):
            if mask[i, v] == 1:
                rows.append(q[v][i])
            else:
                source = next(u for u in rankings[v] if mask[i, u] == 1)
                rows.append(q[source][i])
        completed.append(np.array(rows))

    features = []
    for v in range(v_count):
        y = [int(np.argmax(row)) for row in completed[v]]
        observed = [i for i in range(n) if mask[i, v] == 1]
        fallback = np.mean([h[v][i] for i in observed], axis=0)
        centers = []
        for c in range(k):
            members = [h[v][i] for i in observed if y[i] == c]
            centers.append(np.mean(members, axis=0) if members else fallback)
        features.append(np.array([h[v][i] if mask[i, v] == 1 else centers[y[i]] for i in range(n)]))
    return sim, rankings, completed, features


@pytest.mark.parametrize("seed", range(120))
def test_imputation_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n, v_count, k, d, tau = int(rng.integers(2, 11)), 3, 3, 2, 0.5
    mask = random_mask(rng, n, v_count)
    for v in range(v_count):
        if mask[:, v].sum() == 0:
            mask[rng.integers(n), v] = 1
    logits = rng.normal(size=(v_count, n, k)) * 2
    q_np = np.exp(logits) / np.exp(logits).sum(axis=2, keepdims=True)
    h_np = rng.normal(size=(v_count, n, d))

    q = [torch.from_numpy(x) for x in q_np]
    h = [torch.from_numpy(x) for x in h_np]
    mask_t = torch.from_numpy(mask.astype(np.float64))
    table = build_similarity_table(q, [hard_labels(x) for x in q], mask_t, tau)
    assignments = impute_assignments(q, mask_t, table)
    prototypes = [
        compute_prototypes(h[v], mask_t[:, v], assignments.labels[v], k) for v in range(v_count)
    ]
    bank = impute_features(h, mask_t, assignments, prototypes)

    sim, rankings, completed, features = oracle_impute(q_np, h_np, mask, k, tau)
    np.testing.assert_allclose(table.sim.numpy(), sim, rtol=0, atol=1e-12)
    assert table.rankings == rankings
    for v in range(v_count):
        assert np.array_equal(assignments.completed[v].numpy(), completed[v])
        np.testing.assert_allclose(bank.completed[v].numpy(), features[v], rtol=0, atol=1e-12)
        observed = mask[:, v] == 1
        assert np.array_equal(bank.completed[v].numpy()[observed], h_np[v][observed])
        for i in np.flatnonzero(~observed):
            assert mask[i, int(assignments.sources[v][i])] == 1
