"""Training losses: masked next-token cross-entropy, flow matching, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .validation import check_same_shape, check_unit_interval


def noise_actions(a, tau, omega) -> np.ndarray:
    """``tau * a + (1 - tau) * omega``; ``tau`` scalar or one per chunk."""
    a = np.asarray(a, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    check_same_shape(a=a, omega=omega)
    tau = check_unit_interval("tau", tau)
    if tau.ndim:
        tau = tau.reshape(tau.shape + (1,) * (a.ndim - tau.ndim))
    return tau * a + (1.0 - tau) * omega


def flow_target(a, omega) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    check_same_shape(a=a, omega=omega)
    return omega - a


@dataclass(frozen=True)
class TimestepSampler:
    """``tau = s * (1 - u)`` with ``u ~ Beta(alpha, 1)``, favouring low (noisy) times."""

    s: float = 0.999
    alpha: float = 1.5
    beta: float = 1.0

    def __post_init__(self):
        if self.beta != 1.0:
            raise ValueError("only beta = 1 has the closed-form inverse CDF used here")

    def sample(self, rng: np.random.Generator, size=None):
        v = rng.random(size)
        return self.s * (1.0 - v ** (1.0 / self.alpha))

    def cdf(self, tau) -> np.ndarray:
        tau = np.clip(np.asarray(tau, dtype=np.float64), 0.0, self.s)
        return 1.0 - ((self.s - tau) / self.s) ** self.alpha

    @property
    def mean(self) -> float:
        return self.s * (1.0 - self.alpha / (self.alpha + self.beta))


def sample_timestep(sampler: TimestepSampler, rng: np.random.Generator, size=None):
    return sampler.sample(rng, size)


def ar_loss(logits: Tensor, ids, mask, shift: bool = True) -> Tensor:
    """Mean negative log-likelihood over masked positions.

    ``logits`` is ``(B, L, V)`` aligned with ``ids``/``mask`` ``(B, L)``.  With
    ``shift`` position ``t`` predicts ``ids[t + 1]``; otherwise ``ids[t]``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    check_same_shape(ids=ids, mask=mask)
    if ids.shape != logits.shape[:-1]:
        raise ValueError(f"logits {logits.shape} do not cover targets {ids.shape}")
    if shift:
        logits = ad.slice_axis(logits, 1, 0, logits.shape[1] - 1)
        ids, mask = ids[:, 1:], mask[:, 1:]
    count = int(mask.sum())
    if count == 0:
        raise ValueError("ar_loss needs at least one masked target position")
    V = logits.shape[-1]
    if np.any(ids[mask] >= V) or np.any(ids[mask] < 0):
        raise ValueError(f"target id outside vocabulary of {V}")
    pick = np.zeros(logits.shape, dtype=logits.value.dtype)
    b, t = np.nonzero(mask)
    pick[b, t, ids[b, t]] = -1.0 / count
    return ad.sum_all(ad.mul(ad.log_softmax(logits), logits.graph.constant(pick)))


def flow_loss(pred: Tensor, a, omega, m_act=None) -> Tensor:
    """Mean over action examples of the per-element squared error to ``omega - a``.

    ``pred`` is ``(B, H, d)``; ``m_act`` ``(B,)`` selects examples.  With no
    selected example the loss is a constant zero and no gradient flows.
    """
    target = flow_target(a, omega)
    if target.ndim == 2:
        target = target[None]
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    B = target.shape[0]
    m = np.ones(B, dtype=bool) if m_act is None else np.asarray(m_act, dtype=bool).reshape(B)
    g = pred.graph
    if not m.any():
        return g.constant(0.0)
    per = float(np.prod(target.shape[1:]))
    w = np.where(m, 1.0 / (m.sum() * per), 0.0)[:, None, None]
    diff = pred - g.constant(target)
    return ad.sum_all(ad.mul(ad.mul(diff, diff), g.constant(np.broadcast_to(w, target.shape))))


@dataclass
class LossBreakdown:
    ar: float
    flow: float
    alpha: float
    total: float
    n_ar_tokens: int
    n_flow_examples: int
    loss: Tensor

    def as_row(self) -> dict:
        return {"ar_loss": self.ar, "flow_loss": self.flow, "total": self.total}


def combined_loss(out, batch, a=None, omega=None, m_act=None, alpha: float = 1.0,
                  parts: tuple[str, ...] = ("ar", "flow")) -> LossBreakdown:
    """``ar + alpha * flow`` for a forward output on a collated batch.

    The AR term is skipped when the batch has no target positions, the flow
    term when the model emitted no flow prediction.  ``parts`` restricts the
    total to a subset, for gradient attribution.
    """
    g = out.graph
    terms = []
    ar_v = flow_v = 0.0
    n_tok = n_flow = 0
    if "ar" in parts and batch.ar_mask.any():
        Lp = batch.prefix_width
        B = batch.size
        ids = np.concatenate([np.zeros((B, Lp), dtype=np.int64), batch.ar_ids], axis=1)
        mask = np.concatenate([np.zeros((B, Lp), dtype=bool), batch.ar_mask], axis=1)
        start = out.logits_start
        shift = batch.variant != "oft"
        if shift and start > Lp - 1 or not shift and start > Lp:
            raise ValueError(f"logits start at {start}, too late for AR targets after position {Lp}")
        ids, mask = ids[:, start:], mask[:, start:]
        ar = ar_loss(out.logits, ids, mask, shift=shift)
        n_tok = int(mask[:, 1:].sum() if shift else mask.sum())
        ar_v = float(ar.value)
        terms.append(ar)
    if "flow" in parts and out.flow is not None and a is not None:
        m = np.ones(batch.size, dtype=bool) if m_act is None else np.asarray(m_act, dtype=bool)
        n_flow = int(m.sum())
        if n_flow:
            fl = flow_loss(out.flow, a, omega, m)
            flow_v = float(fl.value)
            terms.append(fl * alpha if alpha != 1.0 else fl)
    if not terms:
        loss = g.constant(0.0)
    else:
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
    return LossBreakdown(ar_v, flow_v, alpha, float(loss.value), n_tok, n_flow, loss)
