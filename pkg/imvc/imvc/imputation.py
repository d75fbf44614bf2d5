"""
Hierarchical imputation. Missing soft assignments are copied from the most
semantically similar view that observed the sample; missing latent features
are then filled with the intra-view prototype of the completed label.
"""
from dataclasses import dataclass

import torch

from .base import ConfigError, ContractError, EmptyViewError
from .model import AssignmentMatrix, LatentBank, Provenance, hard_labels


@dataclass
class SimilarityTable:
    sim: torch.Tensor
    rankings: list
    co_counts: torch.Tensor

    def to_dict(self):
        return {
            "sim": self.sim.tolist(),
            "rankings": self.rankings,
            "co_counts": self.co_counts.tolist(),
        }


@dataclass
class ClusterPrototypes:
    centers: torch.Tensor
    valid: torch.Tensor
    fallback: torch.Tensor


def _flags(observed, missing):
    flags = torch.full(observed.shape, int(missing), dtype=torch.long)
    flags[observed] = int(Provenance.OBSERVED)
    return flags


def co_observed(mask, v, u):
    if v == u:
        raise ContractError(f"co-observation needs two distinct views, got {v} twice")
    return torch.nonzero((mask[:, v] == 1) & (mask[:, u] == 1)).reshape(-1)


def pair_similarity(q_v, q_u, index, labels_v, labels_u, tau):
    """
    Label-aware contrastive agreement of view v with view u over the
    co-observed rows `index`. For anchor i the denominator keeps i itself and
    every j whose label in u differs from i's label in v, so each term is in
    (0, 1].
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if len(index) == 0:
        raise ContractError("similarity needs at least one co-observed sample")

    s = q_v[index] @ q_u[index].T / tau
    y_v, y_u = labels_v[index], labels_u[index]
    keep = (y_v[:, None] != y_u[None, :]) | torch.eye(len(index), dtype=torch.bool)
    log_den = torch.logsumexp(s.masked_fill(~keep, float("-inf")), dim=1)
    return torch.exp(torch.diagonal(s) - log_den).mean().item()


def build_similarity_table(assignments, labels, mask, tau):
    """
    Fills sim(v, u) for every ordered pair and ranks, for every view, the
    other views by descending similarity (ties to the lower view index).
    Pairs with no co-observed rows score 0.
    """
    v_count = len(assignments)
    sim = torch.zeros(v_count, v_count, dtype=torch.float64)
    co_counts = torch.zeros(v_count, v_count, dtype=torch.long)
    with torch.no_grad():
        for v in range(v_count):
            for u in range(v_count):
                if u == v:
                    continue
                index = co_observed(mask, v, u)
                co_counts[v, u] = len(index)
                if len(index):
                    sim[v, u] = pair_similarity(
                        assignments[v], assignments[u], index, labels[v], labels[u], tau
                    )

    rankings = [
        sorted((u for u in range(v_count) if u != v), key=lambda u: (-sim[v, u].item(), u))
        for v in range(v_count)
    ]
    return SimilarityTable(sim, rankings, co_counts)


def impute_assignments(assignments, mask, table: SimilarityTable, detach=True):
    """
    Observed rows are kept as they are; a missing row of view v is copied from
    the first view in v's ranking that observed the sample.
    """
    completed, provenance, sources = [], [], []
    for v, q in enumerate(assignments):
        observed = mask[:, v] == 1
        filled = observed.clone()
        source = torch.full((len(q),), v, dtype=torch.long)
        out = q
        for u in table.rankings[v]:
            take = ~filled & (mask[:, u] == 1)
            if take.any():
                donor = assignments[u].detach() if detach else assignments[u]
                out = torch.where(take[:, None], donor, out)
                source[take] = u
                filled |= take
        completed.append(out)
        sources.append(source)
        provenance.append(_flags(observed, Provenance.IMPUTED))

    return AssignmentMatrix(
        assignments=list(assignments),
        completed=completed,
        labels=[hard_labels(q) for q in completed],
        provenance=provenance,
        sources=sources,
    )


def compute_prototypes(h, observed, labels, k, view=None):
    """
    Mean observed latent per predicted cluster. Clusters with no observed
    member fall back to the mean of all observed latents of the view.
    """
    observed = observed.bool()
    if not observed.any():
        raise EmptyViewError(view)

    fallback = h[observed].mean(dim=0)
    rows, valid = [], []
    for c in range(k):
        members = observed & (labels == c)
        if members.any():
            rows.append(h[members].mean(dim=0))
            valid.append(True)
        else:
            rows.append(fallback)
            valid.append(False)
    return ClusterPrototypes(torch.stack(rows), torch.tensor(valid), fallback)


def impute_features(latents, mask, assignments: AssignmentMatrix, prototypes):
    """
    Observed rows are kept; a missing row of view v becomes the view-v
    prototype of its completed label. A view whose prototypes are None (no
    observed rows) keeps its placeholder rows, flagged unavailable.
    """
    completed, provenance = [], []
    for v, h in enumerate(latents):
        observed = mask[:, v] == 1
        if prototypes[v] is None:
            completed.append(h)
            missing = Provenance.UNAVAILABLE
        else:
            fill = prototypes[v].centers[assignments.labels[v]]
            completed.append(torch.where(observed[:, None], h, fill))
            missing = Provenance.IMPUTED
        provenance.append(_flags(observed, missing))
    return LatentBank(list(latents), completed, provenance)
