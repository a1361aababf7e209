"""Observation to action-chunk inference for a trained parameter set."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import decode as dec
from .codecs import StateEncoder
from .env import Observation
from .model import ModelConfig, Params, build_token_stream, collate, forward, has_ar_actions, has_expert_span

MODES = ("flow", "ar", "parallel")


def default_mode(variant: str) -> str:
    if variant == "oft":
        return "parallel"
    if variant == "pi0-fast":
        return "ar"
    return "flow"


def available_modes(variant: str) -> tuple[str, ...]:
    modes = []
    if has_expert_span(variant):
        modes.append("flow")
    if has_ar_actions(variant) and variant != "oft":
        modes.append("ar")
    if variant == "oft":
        modes.append("parallel")
    return tuple(modes)


@dataclass
class DecodeResult:
    chunks: np.ndarray        # (B, H, d) raw action units
    passes: int               # forward passes for the whole batch
    tokens_per_chunk: float
    failed: np.ndarray        # (B,) bool, AR decodes that fell back to zeros


class ChunkPolicy:
    """Decodes action chunks from observations; callable as a rollout policy."""

    def __init__(self, cfg: ModelConfig, params: Params, codec, state_encoder: StateEncoder,
                 mode: str | None = None, n_flow_steps: int = 10, seed: int = 0):
        self.cfg = cfg
        self.params = params
        self.codec = codec
        self.state_encoder = state_encoder
        self.mode = mode or default_mode(cfg.variant)
        self.n_flow_steps = n_flow_steps
        self.rng = np.random.default_rng(seed)
        self.failures = 0
        self._check_mode(self.mode)

    def _check_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown decode mode {mode!r}; expected one of {MODES}")
        if mode not in available_modes(self.cfg.variant):
            raise ValueError(f"variant {self.cfg.variant!r} cannot decode in {mode!r} mode "
                             f"(available: {available_modes(self.cfg.variant)})")

    def _streams(self, obs: Sequence[Observation], action_ids=None, noisy=None):
        out = []
        for i, o in enumerate(obs):
            out.append(build_token_stream(
                o.grid, o.instruction, self.state_encoder.encode(np.asarray(o.q)), variant=self.cfg.variant,
                action_ids=None if action_ids is None else action_ids[i],
                noisy=None if noisy is None else noisy[i], tau=None if noisy is None else 0.0,
                horizon=self.cfg.horizon))
        return out

    def flow(self, obs: Sequence[Observation], n_steps: int | None = None, noise=None) -> tuple[np.ndarray, int]:
        """Normalised chunks by Euler integration of the expert's flow."""
        n_steps = n_steps or self.n_flow_steps
        cfg = self.cfg
        if noise is None:
            noise = self.rng.standard_normal((len(obs), cfg.horizon, cfg.action_dim))
        batch = collate(self._streams(obs, noisy=noise), cfg)
        passes = 0

        def velocity(x, tau):
            nonlocal passes
            batch.noisy = x
            batch.tau = tau
            passes += 1
            out = forward(self.params, batch, cfg, trainable=(), logits_start=batch.prefix_width + batch.ar_width)
            v = out.flow.value
            out.graph.release()
            return v

        return dec.euler_integrate(velocity, noise, n_steps), passes

    def ar(self, obs: Sequence[Observation], temperature: float = 0.0) -> tuple[np.ndarray, int, list[list[int]], np.ndarray]:
        cfg = self.cfg
        vocab = self.codec.token_vocab_size
        lo = cfg.action_offset

        def next_logits(prefixes):
            batch = collate(self._streams(obs, action_ids=prefixes), cfg, expert=False)
            n = batch.prefix_width + batch.ar_width
            out = forward(self.params, batch, cfg, trainable=(), logits_start=n - 1)
            logits = out.logits.value[:, -1, lo: lo + vocab]
            out.graph.release()
            return logits

        res = dec.ar_decode(next_logits, len(obs), self.codec.n_symbols, self.codec.token_length, vocab,
                            max_tokens=cfg.max_ar, temperature=temperature,
                            rng=self.rng if temperature > 0 else None)
        chunks = np.zeros((len(obs), cfg.horizon, cfg.action_dim))
        failed = ~res.complete
        for b, toks in enumerate(res.tokens):
            if res.complete[b]:
                try:
                    chunks[b] = self.codec.decode(toks)
                except ValueError:
                    failed[b] = True
        return chunks, res.passes, res.tokens, failed

    def parallel(self, obs: Sequence[Observation]) -> tuple[np.ndarray, int]:
        cfg = self.cfg
        n = self.codec.n_symbols
        placeholder = [[0] * n for _ in obs]
        batch = collate(self._streams(obs, action_ids=placeholder), cfg, expert=False)
        out = forward(self.params, batch, cfg, trainable=(), logits_start=batch.prefix_width)
        lo = cfg.action_offset
        toks = dec.parallel_decode(out.logits.value[:, :, lo: lo + self.codec.token_vocab_size], n)
        out.graph.release()
        return np.stack([self.codec.decode(t) for t in toks]), 1

    def decode(self, obs: Sequence[Observation], mode: str | None = None) -> DecodeResult:
        mode = mode or self.mode
        self._check_mode(mode)
        failed = np.zeros(len(obs), dtype=bool)
        if mode == "flow":
            z, passes = self.flow(obs)
            toks = 0.0
        elif mode == "ar":
            z, passes, tokens, failed = self.ar(obs)
            toks = float(np.mean([len(t) for t in tokens]))
        else:
            z, passes = self.parallel(obs)
            toks = float(self.codec.n_symbols)
        self.failures += int(failed.sum())
        raw = self.codec.denormalize(np.clip(z, -1.0, 1.0))
        raw[failed] = 0.0
        return DecodeResult(raw, passes, toks, failed)

    def __call__(self, obs: Sequence[Observation]) -> np.ndarray:
        return self.decode(obs).chunks
