"""Inference: Euler flow integration, autoregressive token decoding, parallel decoding.

The decoders take plain callables so they can be driven by the model or by
oracle fields and logits in tests.  No key/value caching: every generated
token costs one full forward pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

VelocityFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
LogitsFn = Callable[[list[list[int]]], np.ndarray]


@dataclass(frozen=True)
class DenoiseConfig:
    n_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def delta(self) -> float:
        return 1.0 / self.n_steps


def euler_integrate(velocity: VelocityFn, noise, n_steps: int = 10) -> np.ndarray:
    """Integrate from ``tau = 0`` (noise) to ``tau = 1`` with ``x <- x - delta * v``.

    ``velocity(x, tau)`` gets a ``(B, H, d)`` batch and per-row times and
    returns the predicted flow ``omega - a``.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    x = np.array(noise, dtype=np.float64)
    delta = 1.0 / n_steps
    for k in range(n_steps):
        tau = np.full(x.shape[0], k * delta)
        x = x - delta * np.asarray(velocity(x, tau), dtype=np.float64)
    return x


@dataclass
class ArResult:
    tokens: list[list[int]]
    complete: np.ndarray      # (B,) bool
    passes: int


def ar_decode(next_logits: LogitsFn, batch_size: int, n_symbols: int, token_length: Callable[[int], int],
              vocab: int, max_tokens: int = 40, temperature: float = 0.0,
              rng: np.random.Generator | None = None) -> ArResult:
    """Token-by-token decoding until each row's tokens expand to ``n_symbols``.

    ``next_logits(prefixes)`` returns ``(B, vocab)`` scores for the next
    action token given the tokens generated so far.  Tokens whose expansion
    would overshoot the remaining symbol budget are excluded, so a completed
    row always decodes.  Rows that hit ``max_tokens`` first are incomplete.
    """
    if temperature > 0 and rng is None:
        raise ValueError("sampling needs an rng")
    lengths = np.array([token_length(t) for t in range(vocab)])
    tokens: list[list[int]] = [[] for _ in range(batch_size)]
    remaining = np.full(batch_size, n_symbols)
    passes = 0
    while passes < max_tokens and np.any(remaining > 0):
        logits = np.asarray(next_logits(tokens), dtype=np.float64)[:, :vocab]
        passes += 1
        for b in range(batch_size):
            if remaining[b] <= 0:
                continue
            scores = np.where(lengths <= remaining[b], logits[b], -np.inf)
            if temperature > 0:
                z = scores / temperature
                p = np.exp(z - z.max())
                t = int(rng.choice(vocab, p=p / p.sum()))
            else:
                t = int(np.argmax(scores))
            tokens[b].append(t)
            remaining[b] -= lengths[t]
    return ArResult(tokens, remaining == 0, passes)


def parallel_decode(logits, n_tokens: int) -> list[list[int]]:
    """Argmax per position of ``(B, L, V)`` action logits, first ``n_tokens`` positions."""
    logits = np.asarray(logits)
    return np.argmax(logits[:, :n_tokens], axis=-1).tolist()


@dataclass
class LatencyReport:
    mode: str
    forward_passes: float
    tokens: float
    seconds_per_chunk: float
    chunks: int
    failures: int = 0
    extra: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {
            "mode": self.mode,
            "forward_passes": self.forward_passes,
            "tokens": self.tokens,
            "seconds_per_chunk": self.seconds_per_chunk,
            "chunks": self.chunks,
            "failures": self.failures,
        }


def bench_latency(policy, observations: Sequence, modes: Sequence[str]) -> list[LatencyReport]:
    """Decode each observation alone (batch size 1) per mode and time it.

    ``policy.decode(obs_batch, mode)`` must return a ``DecodeResult``.
    """
    reports = []
    for mode in modes:
        passes, toks, fails = [], [], 0
        t0 = time.perf_counter()
        for o in observations:
            res = policy.decode([o], mode)
            passes.append(res.passes)
            toks.append(res.tokens_per_chunk)
            fails += int(np.sum(res.failed))
        dt = time.perf_counter() - t0
        n = len(observations)
        reports.append(LatencyReport(mode, float(np.mean(passes)), float(np.mean(toks)), dt / max(n, 1), n, fails))
    return reports
