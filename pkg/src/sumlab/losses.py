"""Training objectives: teacher-forced NLL, the margin ranking loss over a
gold/silver score pair, and their weighted combination.

Each function accepts either plain floats (for analysis and tests) or
scalar autodiff tensors (for training); the tensor path builds the same
arithmetic on the active tape so gradients flow.  Sums run left to right,
which keeps the NLL identity with sequence_loglik exact at the bit level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class TapeMismatchError(ValueError):
    """Scalars built on different tapes were combined."""


@dataclass(frozen=True)
class LossBreakdown:
    """One step's loss report.  For a batch, l_nll / l_con / scores are
    per-pair means and hinge_active means the averaged l_con is positive;
    hinge_rate is the fraction of pairs with an active hinge.  Scores are
    None in modes that never build a contrastive pair.  The count of
    silver == gold pairs (whose l_con is defined as 0 and skipped) rides
    along for diagnostics."""

    l_nll: float
    l_con: float
    total: float
    hinge_active: bool
    pos_score: Optional[float]
    neg_score: Optional[float]
    hinge_rate: float = 0.0
    n_silver_equals_gold: int = 0


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _as_float(x) -> float:
    return x.item() if _is_tensor(x) else float(x)


def nll_loss(per_token_logliks):
    """Negative sum of per-token log-likelihoods.

    Non-empty list in, scalar >= 0 out; differentiable when the entries
    are tensors."""
    entries = list(per_token_logliks)
    if not entries:
        raise ValueError("nll_loss needs a non-empty log-likelihood list")
    for e in entries:
        if _as_float(e) > 0.0:
            raise ValueError("log-likelihoods must be <= 0")
    if not any(_is_tensor(e) for e in entries):
        return -sum(float(e) for e in entries)
    total = entries[0]
    for e in entries[1:]:
        total = ad.add(total, e if _is_tensor(e) else Tensor([float(e)]))
    return ad.scale(total, -1.0)


def contrastive_loss(pos_score, neg_score, gamma: float):
    """Margin ranking hinge max(0, neg - pos + gamma).

    Zero (with exactly zero gradient) whenever the gold score beats the
    silver score by at least the margin."""
    gamma = float(gamma)
    if not np.isfinite(gamma) or gamma < 0.0:
        raise ValueError("gamma must be a finite value >= 0")
    if not (_is_tensor(pos_score) or _is_tensor(neg_score)):
        return max(0.0, float(neg_score) - float(pos_score) + gamma)
    pos = pos_score if _is_tensor(pos_score) else Tensor([float(pos_score)])
    neg = neg_score if _is_tensor(neg_score) else Tensor([float(neg_score)])
    margin = ad.add(ad.add(neg, ad.scale(pos, -1.0)), Tensor([gamma]))
    return ad.relu(margin)


def combined_loss(l_nll, l_con, lambda_nll: float = 1.0):
    """l_con + lambda_nll * l_nll.

    lambda_nll = 1 is the plain combined objective; 0 drops the NLL term
    entirely (the "- NLL loss" ablation)."""
    lam = float(lambda_nll)
    if not np.isfinite(lam) or lam < 0.0:
        raise ValueError("lambda_nll must be a finite value >= 0")
    if _is_tensor(l_nll) and _is_tensor(l_con):
        if (l_nll.tape is not None and l_con.tape is not None
                and l_nll.tape is not l_con.tape):
            raise TapeMismatchError(
                "l_nll and l_con were recorded on different tapes")
    if not (_is_tensor(l_nll) or _is_tensor(l_con)):
        return float(l_con) + lam * float(l_nll)
    nll = l_nll if _is_tensor(l_nll) else Tensor([float(l_nll)])
    con = l_con if _is_tensor(l_con) else Tensor([float(l_con)])
    return ad.add(con, ad.scale(nll, lam))
