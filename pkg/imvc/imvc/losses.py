"""
Training objectives: masked reconstruction, energy-based intra-cluster
alignment, similarity-weighted contrastive assignment alignment with a
distribution entropy regulariser, and their weighted total.
"""
from dataclasses import dataclass, field
import math

import torch
import torch.nn.functional as F

from .base import ConfigError, NumericError
from .model import ModelBundle, Provenance

LOG_FLOOR = 1e-12


@dataclass
class LossReport:
    rec: float
    ebm: float
    caa: float
    total: float
    alpha: float
    beta: float
    ebm_terms: list = field(default_factory=list)
    ca_terms: dict = field(default_factory=dict)
    reg_terms: dict = field(default_factory=dict)
    objective: torch.Tensor = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {"rec": self.rec, "ebm": self.ebm, "caa": self.caa, "total": self.total}


@dataclass
class EnergyBank:
    features: list
    energies: list
    anchors: list
    terms: list


def _zero():
    return torch.zeros((), dtype=torch.float64)


def loss_rec(views, reconstructions, mask):
    """
    Squared reconstruction error of observed rows, divided by V times the
    number of batch rows.
    """
    v_count, n = len(views), len(mask)
    total = _zero()
    for v, (x, x_hat) in enumerate(zip(views, reconstructions)):
        total = total + (mask[:, v] * ((x - x_hat) ** 2).sum(dim=1)).sum()
    return total / (v_count * n)


def pool_clusters(latents, assignments, k):
    """
    Gathers, for every cluster, the completed features of all views whose
    completed label is that cluster. Rows without a completed feature are
    skipped.
    """
    pools = [[] for _ in range(k)]
    for h, labels, provenance in zip(latents.completed, assignments.labels, latents.provenance):
        usable = provenance != int(Provenance.UNAVAILABLE)
        h, labels = h[usable], labels[usable]
        for c in range(k):
            pools[c].append(h[labels == c])
    return [torch.cat(rows) for rows in pools]


def loss_ebm(bundle: ModelBundle, latents, assignments, detach_anchors=True, tape=None):
    """
    Mean absolute deviation of every pooled feature's energy from the lowest
    energy in its cluster, averaged over all K clusters. Empty clusters
    contribute zero.
    """
    pools = pool_clusters(latents, assignments, bundle.k)
    terms, energies, anchors = [], [], []
    for c, features in enumerate(pools):
        if len(features) == 0:
            terms.append(_zero())
            energies.append(features.new_zeros(0))
            anchors.append(None)
            continue
        e = bundle.energy_of(c, features, tape)
        anchor = e.min()
        if detach_anchors:
            anchor = anchor.detach()
        terms.append((e - anchor).abs().mean())
        energies.append(e.detach())
        anchors.append(anchor.item())
    bank = EnergyBank(pools, energies, anchors, [t.item() for t in terms])
    return torch.stack(terms).mean(), bank


def contrastive_alignment(q_v, q_u, tau):
    """
    InfoNCE over batch rows: row i of view v against every row of view u,
    with row i of u as the positive.
    """
    logits = q_v @ q_u.T / tau
    return F.cross_entropy(logits, torch.arange(len(q_v)))


def entropy_regularizer(q_v, q_u):
    """
    Negative entropy of the two batch-mean assignment distributions, divided
    by K. Uniform distributions minimise it; 0 log 0 is taken as 0.
    """
    k = q_v.shape[1]
    p, r = q_v.mean(dim=0), q_u.mean(dim=0)
    return (p * torch.log(p.clamp_min(LOG_FLOOR)) + r * torch.log(r.clamp_min(LOG_FLOOR))).sum() / k


def loss_caa(completed, table, tau):
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    total = _zero()
    ca_terms, reg_terms = {}, {}
    for v, q_v in enumerate(completed):
        for u, q_u in enumerate(completed):
            if u == v:
                continue
            ca = contrastive_alignment(q_v, q_u, tau)
            reg = entropy_regularizer(q_v, q_u)
            total = total + table.sim[v, u] * ca + reg
            ca_terms[f"{v},{u}"] = ca.item()
            reg_terms[f"{v},{u}"] = reg.item()
    return 0.5 * total, ca_terms, reg_terms


def loss_total(rec, ebm, caa, alpha, beta, ebm_terms=(), ca_terms=None, reg_terms=None):
    if alpha < 0 or beta < 0:
        raise ConfigError(f"loss weights must be non-negative, got alpha={alpha} beta={beta}")
    rec, ebm, caa = (torch.as_tensor(t, dtype=torch.float64) for t in (rec, ebm, caa))
    for name, value in (("rec", rec), ("ebm", ebm), ("caa", caa)):
        if not math.isfinite(value.item()):
            raise NumericError(f"{name} loss is not finite ({value.item()})")

    objective = rec + alpha * ebm + beta * caa
    return LossReport(
        rec=rec.item(),
        ebm=ebm.item(),
        caa=caa.item(),
        total=objective.item(),
        alpha=alpha,
        beta=beta,
        ebm_terms=[float(t) for t in ebm_terms],
        ca_terms=dict(ca_terms or {}),
        reg_terms=dict(reg_terms or {}),
        objective=objective,
    )
