"""Two-expert transformer over image / word / state / action-token / noisy-action streams.

Backbone tokens (prefix and the autoregressive span) and action-expert tokens
(the noisy chunk) have separate weights but share the attention projection
size, so a single softmax runs over the concatenated key set.  Expert-query
to backbone-key entries can be marked as gradient barriers; the forward pass
is unchanged by them.

Batched layout per row::

    [pad .. pad | image cells | words | state | ar tokens | ar pad | noisy chunk]
    '------------- prefix (left padded) ------'---- AR span ----'-- expert --'
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .env import WORD_ID

VARIANTS = ("ours", "joint", "pi0", "pi0-fast", "transfusion", "hybrid", "oft", "frozen")

_AR_ACTIONS = {"ours", "joint", "pi0-fast", "hybrid", "oft"}
_EXPERT_SPAN = {"ours", "joint", "pi0", "frozen", "hybrid", "transfusion"}
_BARRIER = {"ours", "frozen"}

PAD, IMAGE, TOKEN, CSTATE = 0, 1, 2, 3


def _check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


def has_ar_actions(variant: str) -> bool:
    return _check_variant(variant) in _AR_ACTIONS


def has_expert_span(variant: str) -> bool:
    return _check_variant(variant) in _EXPERT_SPAN


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    expert_width: int = 32
    depth: int = 4
    n_heads: int = 4
    head_dim: int = 16
    ffn_mult: int = 4
    expert_ffn_mult: int = 4
    text_vocab: int = 64
    action_vocab: int = 512
    state_bins: int = 256
    n_channels: int = 11
    grid_size: int = 8
    tau_width: int = 32
    horizon: int = 8
    action_dim: int = 3
    state_dim: int = 3
    max_prefix: int = 96
    max_ar: int = 40
    cell_coords: bool = True
    variant: str = "ours"

    def __post_init__(self):
        _check_variant(self.variant)
        if self.tau_width % 2:
            raise ValueError("tau_width must be even")

    @property
    def attn_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def action_offset(self) -> int:
        return self.text_vocab

    @property
    def state_offset(self) -> int:
        return self.text_vocab + self.action_vocab

    @property
    def vocab_size(self) -> int:
        return self.text_vocab + self.action_vocab + self.state_bins

    @property
    def separate_expert(self) -> bool:
        return has_expert_span(self.variant) and self.variant != "transfusion"

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ params


@dataclass
class Params:
    """Named arrays, each tagged ``backbone`` or ``expert``."""

    arrays: dict[str, np.ndarray]
    tags: dict[str, str]

    def names(self, tag: str | None = None) -> list[str]:
        return [n for n in self.arrays if tag is None or self.tags[n] == tag]

    def count(self, tag: str | None = None) -> int:
        return sum(self.arrays[n].size for n in self.names(tag))

    def copy(self) -> "Params":
        return Params({k: v.copy() for k, v in self.arrays.items()}, dict(self.tags))

    def astype(self, dtype) -> "Params":
        return Params({k: v.astype(dtype) for k, v in self.arrays.items()}, dict(self.tags))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Gaussian init with variance 1/fan-in; adaptive-norm maps start at zero."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}

    def add(name, shape, tag, fan_in=None, zero=False, one=False):
        if zero:
            v = np.zeros(shape)
        elif one:
            v = np.ones(shape)
        else:
            fan = shape[0] if fan_in is None else fan_in
            v = rng.standard_normal(shape) / math.sqrt(fan)
        arrays[name] = v.astype(dtype)
        tags[name] = tag

    W, A, V = cfg.width, cfg.attn_dim, cfg.vocab_size
    add("embed", (V, W), "backbone", fan_in=1)
    add("pos_prefix", (cfg.max_prefix, W), "backbone", fan_in=1)
    add("pos_ar", (cfg.max_ar, W), "backbone", fan_in=1)
    add("img_w", (cfg.n_channels, W), "backbone")
    add("img_b", (W,), "backbone", zero=True)
    if cfg.cell_coords:
        add("img_xy_w", (2, W), "backbone")
    add("state_w", (cfg.state_dim, W), "backbone")
    add("state_b", (W,), "backbone", zero=True)
    for l in range(cfg.depth):
        p = f"b{l}."
        add(p + "attn_norm", (W,), "backbone", one=True)
        for m in ("wq", "wk", "wv"):
            add(p + m, (W, A), "backbone")
        add(p + "wo", (A, W), "backbone")
        add(p + "ffn_norm", (W,), "backbone", one=True)
        add(p + "w1", (W, W * cfg.ffn_mult), "backbone")
        add(p + "w2", (W * cfg.ffn_mult, W), "backbone")
    add("final_norm", (W,), "backbone", one=True)
    add("head", (W, V), "backbone")

    if not has_expert_span(cfg.variant):
        return Params(arrays, tags)
    w = cfg.tau_width
    if not cfg.separate_expert:
        # transfusion: the backbone denoises; only action projections are new
        add("act_in_w", (cfg.action_dim, W), "backbone")
        add("act_in_b", (W,), "backbone", zero=True)
        add("pos_act", (cfg.horizon, W), "backbone", fan_in=1)
        add("tau_w1", (w, w), "backbone")
        add("tau_w2", (w, w), "backbone")
        add("tau_proj", (w, W), "backbone")
        add("act_out_w", (W, cfg.action_dim), "backbone")
        add("act_out_b", (cfg.action_dim,), "backbone", zero=True)
        return Params(arrays, tags)
    E = cfg.expert_width
    add("act_in_w", (cfg.action_dim, E), "expert")
    add("act_in_b", (E,), "expert", zero=True)
    add("pos_act", (cfg.horizon, E), "expert", fan_in=1)
    add("tau_w1", (w, w), "expert")
    add("tau_w2", (w, w), "expert")
    for l in range(cfg.depth):
        p = f"e{l}."
        for norm in ("attn", "ffn"):
            for part in ("scale", "shift"):
                add(f"{p}{norm}_{part}_w", (w, E), "expert", zero=True)
                add(f"{p}{norm}_{part}_b", (E,), "expert", zero=True)
        for m in ("wq", "wk", "wv"):
            add(p + m, (E, A), "expert")
        add(p + "wo", (A, E), "expert")
        add(p + "w1", (E, E * cfg.expert_ffn_mult), "expert")
        add(p + "w2", (E * cfg.expert_ffn_mult, E), "expert")
    for part in ("scale", "shift"):
        add(f"final_{part}_w", (w, E), "expert", zero=True)
        add(f"final_{part}_b", (E,), "expert", zero=True)
    add("act_out_w", (E, cfg.action_dim), "expert")
    add("act_out_b", (cfg.action_dim,), "expert", zero=True)
    return Params(arrays, tags)


# ------------------------------------------------------------------ streams


@dataclass
class TokenStream:
    """Ordered ``(modality, payload)`` items with segment boundaries.

    Modalities: ``image`` (channel vector), ``word`` (word id), ``state``
    (raw vector), ``state-token`` (bin id), ``fast-action`` (action token id),
    ``noisy-action`` (length-d vector).  ``ar_targets`` flags which items of
    the autoregressive span are loss targets.
    """

    items: list[tuple[str, object]]
    prefix_end: int
    ar_end: int
    ar_targets: list[bool] = field(default_factory=list)
    tau: float | None = None

    def __len__(self) -> int:
        return len(self.items)

    @property
    def expert_len(self) -> int:
        return len(self.items) - self.ar_end

    @property
    def ar_len(self) -> int:
        return self.ar_end - self.prefix_end


def build_token_stream(grid, instruction: Sequence[int], state_items, *, variant: str,
                       action_ids: Sequence[int] | None = None, noisy=None, tau: float | None = None,
                       text_target: Sequence[int] | None = None, horizon: int = 8) -> TokenStream:
    """Prefix (image cells, words, state) then AR span then noisy chunk.

    ``text_target`` word ids (caption answer or subtask text) precede the
    action tokens in the AR span.  Spans a variant does not use are dropped.
    """
    grid = np.asarray(grid)
    items: list[tuple[str, object]] = [("image", grid[r, c]) for r in range(grid.shape[0]) for c in range(grid.shape[1])]
    items += [("word", int(w)) for w in instruction]
    items += [("word", WORD_ID[v]) if m == "word" and isinstance(v, str) else (m, v) for m, v in state_items]
    prefix_end = len(items)
    targets: list[bool] = []
    if text_target is not None:
        items += [("word", int(w)) for w in text_target]
        targets += [True] * len(text_target)
    if action_ids is not None and has_ar_actions(variant):
        items += [("fast-action", int(t)) for t in action_ids]
        targets += [True] * len(action_ids)
    ar_end = len(items)
    if noisy is not None and has_expert_span(variant):
        noisy = np.asarray(noisy, dtype=np.float64)
        if noisy.shape[0] != horizon:
            raise ValueError(f"noisy chunk has horizon {noisy.shape[0]}, expected {horizon}")
        if tau is None:
            raise ValueError("a noisy chunk needs its flow time tau")
        items += [("noisy-action", row) for row in noisy]
    else:
        tau = None
    return TokenStream(items, prefix_end, ar_end, targets, tau)


@dataclass
class AttentionPlan:
    """Additive mask, gradient barrier and expert routing for one layout."""

    mask: np.ndarray       # (..., n, n) in {0, -inf}
    barrier: np.ndarray    # (..., n, n) bool
    routing: np.ndarray    # (..., n) 0 backbone, 1 expert

    @property
    def allowed(self) -> np.ndarray:
        return self.mask == 0


def _plan(prefix_len, prefix_pad, ar_len, ar_pad, expert_len, variant) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Allowed/barrier/routing for one (possibly padded) row."""
    Lp = prefix_len + prefix_pad
    La = ar_len + ar_pad
    n = Lp + La + expert_len
    ok = np.zeros((n, n), dtype=bool)
    P = np.arange(prefix_pad, Lp)
    A = np.arange(Lp, Lp + ar_len)
    E = np.arange(Lp + La, n)
    ok[np.ix_(P, P)] = True
    if ar_len:
        ok[np.ix_(A, P)] = True
        if variant == "oft":
            ok[np.ix_(A, A)] = True
        else:
            ok[np.ix_(A, A)] = np.tril(np.ones((ar_len, ar_len), dtype=bool))
        if variant == "hybrid" and expert_len:
            ok[np.ix_(A, E)] = True
    if expert_len:
        ok[np.ix_(E, P)] = True
        ok[np.ix_(E, E)] = True
    pads = np.r_[np.arange(prefix_pad), np.arange(Lp + ar_len, Lp + La)]
    ok[pads, pads] = True
    barrier = np.zeros((n, n), dtype=bool)
    if variant in _BARRIER and expert_len:
        barrier[Lp + La:, : Lp + La] = ok[Lp + La:, : Lp + La]
    routing = np.zeros(n, dtype=np.int8)
    if variant != "transfusion":
        routing[Lp + La:] = 1
    return ok, barrier, routing


def build_attention_plan(stream: TokenStream, variant: str) -> AttentionPlan:
    _check_variant(variant)
    ok, barrier, routing = _plan(stream.prefix_end, 0, stream.ar_len, 0, stream.expert_len, variant)
    return AttentionPlan(np.where(ok, 0.0, -np.inf), barrier, routing)


# ------------------------------------------------------------------- batches


@dataclass
class Batch:
    kind: np.ndarray        # (B, Lp) PAD/IMAGE/TOKEN/CSTATE
    cells: np.ndarray       # (B, Lp, C)
    cell_xy: np.ndarray     # (B, Lp, 2) cell centre in state units, zero off-image
    prefix_ids: np.ndarray  # (B, Lp)
    prefix_state: np.ndarray  # (B, Lp, s)
    prefix_pos: np.ndarray  # (B, Lp)
    ar_inputs: np.ndarray   # (B, La)
    ar_ids: np.ndarray      # (B, La) target ids
    ar_mask: np.ndarray     # (B, La) bool
    ar_real: np.ndarray     # (B, La) bool
    noisy: np.ndarray | None  # (B, H, d)
    tau: np.ndarray | None    # (B,)
    plan: AttentionPlan
    variant: str

    @property
    def size(self) -> int:
        return self.kind.shape[0]

    @property
    def prefix_width(self) -> int:
        return self.kind.shape[1]

    @property
    def ar_width(self) -> int:
        return self.ar_inputs.shape[1]


def collate(streams: Sequence[TokenStream], cfg: ModelConfig, expert: bool | None = None) -> Batch:
    """Pad streams into one batch.  Rows without a noisy chunk get a masked dummy one."""
    variant = cfg.variant
    if expert is None:
        expert = any(s.expert_len for s in streams)
    if expert and not has_expert_span(variant):
        raise ValueError(f"variant {variant!r} has no expert span")
    B = len(streams)
    Lp = max(s.prefix_end for s in streams)
    La = max(s.ar_len for s in streams)
    if Lp > cfg.max_prefix or La > cfg.max_ar:
        raise ValueError(f"stream spans ({Lp}, {La}) exceed position tables ({cfg.max_prefix}, {cfg.max_ar})")
    H = cfg.horizon if expert else 0
    kind = np.zeros((B, Lp), dtype=np.int8)
    cells = np.zeros((B, Lp, cfg.n_channels))
    cell_xy = np.zeros((B, Lp, 2))
    pids = np.zeros((B, Lp), dtype=np.int64)
    pstate = np.zeros((B, Lp, cfg.state_dim))
    ppos = np.zeros((B, Lp), dtype=np.int64)
    ar_in = np.zeros((B, La), dtype=np.int64)
    ar_ids = np.zeros((B, La), dtype=np.int64)
    ar_mask = np.zeros((B, La), dtype=bool)
    ar_real = np.zeros((B, La), dtype=bool)
    noisy = np.zeros((B, H, cfg.action_dim)) if expert else None
    tau = np.zeros(B) if expert else None
    mask = np.empty((B, Lp + La + H, Lp + La + H))
    barrier = np.empty(mask.shape, dtype=bool)
    routing = np.empty((B, Lp + La + H), dtype=np.int8)
    act_id = 1  # "<act>" placeholder word for parallel decoding
    for b, s in enumerate(streams):
        pad = Lp - s.prefix_end
        for i, (mod, val) in enumerate(s.items[: s.prefix_end]):
            j = pad + i
            ppos[b, j] = i
            if mod == "image":
                kind[b, j] = IMAGE
                cells[b, j] = val
                r, c = divmod(i, cfg.grid_size)
                cell_xy[b, j] = (2 * (c + 0.5) / cfg.grid_size - 1, 2 * (r + 0.5) / cfg.grid_size - 1)
            elif mod == "word":
                kind[b, j] = TOKEN
                pids[b, j] = val
            elif mod == "state-token":
                kind[b, j] = TOKEN
                pids[b, j] = cfg.state_offset + val
            elif mod == "state":
                kind[b, j] = CSTATE
                pstate[b, j] = val
            else:
                raise ValueError(f"modality {mod!r} cannot appear in the prefix")
        for t, (mod, val) in enumerate(s.items[s.prefix_end: s.ar_end]):
            gid = cfg.action_offset + val if mod == "fast-action" else val
            ar_ids[b, t] = gid
            ar_in[b, t] = act_id if (variant == "oft" and mod == "fast-action") else gid
            ar_mask[b, t] = s.ar_targets[t]
            ar_real[b, t] = True
        row_expert = 0
        if expert and s.expert_len:
            noisy[b] = np.stack([v for _, v in s.items[s.ar_end:]])
            tau[b] = s.tau
            row_expert = H
        ok, bar, rt = _plan(s.prefix_end, pad, s.ar_len, La - s.ar_len, row_expert, variant)
        if expert and not row_expert:
            # dummy chunk: attend to itself only, invisible to everyone else
            n0 = ok.shape[0]
            ok = np.pad(ok, ((0, H), (0, H)))
            ok[n0:, n0:] = np.eye(H, dtype=bool)
            bar = np.pad(bar, ((0, H), (0, H)))
            rt = np.pad(rt, (0, H), constant_values=0 if variant == "transfusion" else 1)
        mask[b] = np.where(ok, 0.0, -np.inf)
        barrier[b] = bar
        routing[b] = rt
    return Batch(kind, cells, cell_xy, pids, pstate, ppos, ar_in, ar_ids, ar_mask, ar_real, noisy, tau,
                 AttentionPlan(mask, barrier, routing), variant)


# ------------------------------------------------------------------- forward


@dataclass
class ForwardOutput:
    graph: Graph
    logits: Tensor | None     # (B, n_b - logits_start, V); None if start >= n_b
    logits_start: int
    flow: Tensor | None       # (B, H, d)
    backbone_out: Tensor
    expert_out: Tensor | None
    leaves: dict[str, Tensor]


def sinusoidal(tau, width: int) -> np.ndarray:
    """``[sin(tau f_0), cos(tau f_0), ...]`` with ``f_k`` geometric from 1 to 1e4."""
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    half = width // 2
    freqs = 10.0 ** (4.0 * np.arange(half) / max(half - 1, 1))
    ang = tau[:, None] * freqs[None, :]
    out = np.empty((tau.shape[0], width))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def tau_embedding(g: Graph, tau, w1: Tensor, w2: Tensor) -> Tensor:
    """``swish(W2 swish(W1 phi(tau)))`` for a batch of flow times."""
    phi = g.constant(sinusoidal(tau, w1.shape[0]))
    return ad.swish(ad.swish(phi @ w1) @ w2)


def adaptive_rmsnorm(x: Tensor, e: Tensor, scale_w: Tensor, scale_b: Tensor,
                     shift_w: Tensor, shift_b: Tensor) -> Tensor:
    """``rmsnorm(x) * (1 + scale(e)) + shift(e)`` with ``e`` per batch row."""
    B = x.shape[0]
    s = (e @ scale_w + scale_b).reshape(B, 1, -1)
    h = (e @ shift_w + shift_b).reshape(B, 1, -1)
    return ad.mul(ad.rmsnorm(x), s + 1.0) + h


def _heads(x: Tensor, cfg: ModelConfig) -> Tensor:
    B, n, _ = x.shape
    return ad.transpose(x.reshape(B, n, cfg.n_heads, cfg.head_dim), (0, 2, 1, 3))


def forward(params: Params | None, batch: Batch, cfg: ModelConfig, *, dtype=None,
            trainable: Sequence[str] | None = None, logits_start: int = 0,
            leaves: dict[str, Tensor] | None = None) -> ForwardOutput:
    """Run the model on a collated batch.

    ``trainable`` names the leaves that get gradients (default: all).
    ``leaves`` supplies ready-made parameter tensors (one shared graph)
    instead of ``params``.
    Logits are produced for backbone positions ``logits_start`` onwards
    (none when it is past the last backbone position).
    """
    if batch.variant != cfg.variant:
        raise ValueError(f"batch built for {batch.variant!r}, model is {cfg.variant!r}")
    if leaves is not None:
        P = dict(leaves)
        g = next(iter(P.values())).graph
        dtype = g.dtype
    else:
        dtype = dtype or next(iter(params.arrays.values())).dtype
        g = Graph(dtype)
        train = set(params.arrays) if trainable is None else set(trainable)
        P = {k: g.tensor(v, trainable=k in train, name=k) for k, v in params.arrays.items()}
    B, Lp, La = batch.size, batch.prefix_width, batch.ar_width
    expert = batch.noisy is not None
    if expert and "act_in_w" not in P:
        raise ValueError(f"variant {cfg.variant!r} has no expert parameters")

    # prefix embeddings: each modality computed where present, masked elsewhere
    kind = batch.kind
    parts = [ad.embedding_gather(P["pos_prefix"], batch.prefix_pos)]
    if np.any(kind == TOKEN):
        sel = g.constant((kind == TOKEN)[..., None].astype(dtype))
        parts.append(ad.mul(ad.embedding_gather(P["embed"], batch.prefix_ids), sel))
    if np.any(kind == IMAGE):
        sel = g.constant((kind == IMAGE)[..., None].astype(dtype))
        parts.append(ad.mul(g.constant(batch.cells) @ P["img_w"] + P["img_b"], sel))
        if "img_xy_w" in P:
            parts.append(g.constant(batch.cell_xy) @ P["img_xy_w"])
    if np.any(kind == CSTATE):
        sel = g.constant((kind == CSTATE)[..., None].astype(dtype))
        parts.append(ad.mul(g.constant(batch.prefix_state) @ P["state_w"] + P["state_b"], sel))
    xb = parts[0]
    for p in parts[1:]:
        xb = xb + p
    if La:
        ar = ad.embedding_gather(P["embed"], batch.ar_inputs) + ad.embedding_gather(P["pos_ar"], np.arange(La))
        xb = ad.concat([xb, ar], axis=1)
    nb = Lp + La

    xa = None
    e = None
    if expert:
        xa = g.constant(batch.noisy) @ P["act_in_w"] + P["act_in_b"] + P["pos_act"]
        e = tau_embedding(g, batch.tau, P["tau_w1"], P["tau_w2"])
        if not cfg.separate_expert:
            xa = xa + (e @ P["tau_proj"]).reshape(B, 1, -1)
            xb = ad.concat([xb, xa], axis=1)
            xa = None

    mask = batch.plan.mask[:, None]
    barrier = batch.plan.barrier[:, None] if np.any(batch.plan.barrier) else None
    inv = 1.0 / math.sqrt(cfg.head_dim)
    for l in range(cfg.depth):
        b, x = f"b{l}.", f"e{l}."
        hb = ad.rmsnorm(xb, P[b + "attn_norm"])
        q, k, v = hb @ P[b + "wq"], hb @ P[b + "wk"], hb @ P[b + "wv"]
        if xa is not None:
            ha = adaptive_rmsnorm(xa, e, P[x + "attn_scale_w"], P[x + "attn_scale_b"],
                                  P[x + "attn_shift_w"], P[x + "attn_shift_b"])
            q = ad.concat([q, ha @ P[x + "wq"]], axis=1)
            k = ad.concat([k, ha @ P[x + "wk"]], axis=1)
            v = ad.concat([v, ha @ P[x + "wv"]], axis=1)
        s = ad.attention_scores(_heads(q, cfg) * inv, _heads(k, cfg), barrier)
        pr = ad.softmax_rows(s, mask)
        o = ad.attention_mix(pr, _heads(v, cfg), barrier)
        o = ad.transpose(o, (0, 2, 1, 3))
        o = o.reshape(B, o.shape[1], cfg.attn_dim)
        if xa is not None:
            xb = xb + ad.slice_axis(o, 1, 0, nb) @ P[b + "wo"]
            xa = xa + ad.slice_axis(o, 1, nb, o.shape[1]) @ P[x + "wo"]
        else:
            xb = xb + o @ P[b + "wo"]
        hb = ad.rmsnorm(xb, P[b + "ffn_norm"])
        xb = xb + ad.swish(hb @ P[b + "w1"]) @ P[b + "w2"]
        if xa is not None:
            ha = adaptive_rmsnorm(xa, e, P[x + "ffn_scale_w"], P[x + "ffn_scale_b"],
                                  P[x + "ffn_shift_w"], P[x + "ffn_shift_b"])
            xa = xa + ad.swish(ha @ P[x + "w1"]) @ P[x + "w2"]

    flow = None
    if expert and xa is not None:
        ha = adaptive_rmsnorm(xa, e, P["final_scale_w"], P["final_scale_b"], P["final_shift_w"], P["final_shift_b"])
        flow = ha @ P["act_out_w"] + P["act_out_b"]
        expert_out = xa
    elif expert:
        xa = ad.slice_axis(xb, 1, nb, xb.shape[1])
        xb = ad.slice_axis(xb, 1, 0, nb)
        flow = ad.rmsnorm(xa, P["final_norm"]) @ P["act_out_w"] + P["act_out_b"]
        expert_out = xa
    else:
        expert_out = None
    logits = None
    if logits_start < nb:
        hb = xb if logits_start == 0 else ad.slice_axis(xb, 1, logits_start, nb)
        logits = ad.rmsnorm(hb, P["final_norm"]) @ P["head"]
    return ForwardOutput(g, logits, logits_start, flow, xb, expert_out, P)
