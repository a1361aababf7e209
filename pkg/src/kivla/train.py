"""Training loop, presets, checkpoints and per-run metrics."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import env
from .autodiff import GradCheckReport, backward, grad_check
from .codecs import StateEncoder, codec_from_dict, make_codec
from .model import ModelConfig, Params, build_token_stream, collate, forward, init_params
from .objectives import TimestepSampler, combined_loss, noise_actions
from .policy import ChunkPolicy

STATE_KINDS = {"text": "text", "special": "special", "special-token": "special", "continuous": "continuous"}


@dataclass
class TrainConfig:
    preset: str = "ours"
    variant: str = "ours"
    codec: str = "fast"
    state_encoding: str = "continuous"
    alpha: float = 1.0
    batch_size: int = 32
    steps: int = 3000
    lr: float = 3e-4
    lr_schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    seed: int = 0
    data: str = "data/train.jsonl"
    caption_ratio: float = 0.25
    subtasks: bool = True
    warm_start_steps: int = 1000
    warm_start_cache: str = ""
    eval_every: int = 250
    eval_episodes: int = 100
    ood_episodes: int = 100
    n_flow_steps: int = 10
    insulation_check_every: int = 100
    record_wall_clock: bool = False
    dtype: str = "float32"
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_encoding not in STATE_KINDS:
            raise ValueError(f"unknown state encoding {self.state_encoding!r}")
        if self.variant == "frozen" and self.warm_start_steps <= 0:
            raise ValueError("variant 'frozen' needs warm_start_steps > 0, otherwise the frozen backbone is random")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.caption_ratio < 0:
            raise ValueError("caption_ratio must be >= 0")
        unknown = set(self.model) - {f.name for f in dataclasses.fields(ModelConfig)}
        if unknown:
            raise ValueError(f"unknown model fields {sorted(unknown)}")
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{**self.model, "variant": self.variant})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)


# Deltas from the TrainConfig defaults (which are the "ours" recipe).
PRESETS: dict[str, dict] = {
    "ours": {},
    "joint": {"variant": "joint"},
    "joint-no-vlm": {"variant": "joint", "caption_ratio": 0.0, "subtasks": False},
    "pi0": {"variant": "pi0", "caption_ratio": 0.0, "subtasks": False},
    "pi0-fast": {"variant": "pi0-fast", "caption_ratio": 0.0, "subtasks": False},
    "frozen": {"variant": "frozen", "caption_ratio": 0.0, "subtasks": False},
    "transfusion": {"variant": "transfusion"},
    "hybrid": {"variant": "hybrid"},
    "oft": {"variant": "oft", "codec": "naive", "state_encoding": "text", "caption_ratio": 0.0, "subtasks": False},
    "naive-tokens": {"codec": "naive"},
}


def preset_config(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], "preset": name, **overrides})


# -------------------------------------------------------------------- data


@dataclass
class ActionExample:
    grid: np.ndarray
    instruction: list[int]
    state: np.ndarray
    chunk: np.ndarray          # normalised
    action_ids: list[int]
    subtask: list[int] | None


@dataclass
class CaptionExample:
    grid: np.ndarray
    question: list[int]
    answer: list[int]


class TrainingData:
    """Dataset records flattened into per-chunk examples, with a fitted codec."""

    def __init__(self, records: Sequence[dict], codec_kind: str = "fast", codec=None,
                 horizon: int = env.HORIZON, action_dim: int = env.ACTION_DIM):
        acts = [r for r in records if r["kind"] == "action"]
        chunks = np.array([s["chunk"] for r in acts for s in r["steps"]], dtype=np.float64)
        if codec is None:
            if not len(chunks):
                raise ValueError("dataset has no action records to fit the codec on")
            codec = make_codec(codec_kind, horizon, action_dim).fit(chunks)
        self.codec = codec
        self.actions: list[ActionExample] = []
        self.captions: list[CaptionExample] = []
        for r in records:
            if r["kind"] == "caption":
                cap = r["caption"]
                self.captions.append(CaptionExample(env.record_observation(r), cap["question"], cap["answer"]))
                continue
            for s in r["steps"]:
                z = codec.normalize(np.asarray(s["chunk"]))
                self.actions.append(ActionExample(
                    env.record_observation(r, s), list(r["instruction"]["tokens"]), np.asarray(s["state"]),
                    z, codec.encode(z), s.get("subtask")))


def load_records(path) -> list[dict]:
    return env.read_jsonl(path)


# ------------------------------------------------------------- checkpoints

MAGIC = b"KIVLA-CHECKPOINT 1\n"


@dataclass
class Checkpoint:
    params: Params
    config: TrainConfig
    codec: object


def save_checkpoint(path, params: Params, config: TrainConfig, codec) -> None:
    """Magic line, one JSON header line, then little-endian float32 arrays back to back."""
    entries, blobs, offset = [], [], 0
    for name in sorted(params.arrays):
        a = np.ascontiguousarray(params.arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "dtype": "<f4",
                        "tag": params.tags[name]})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {"config": config.to_dict(), "codec": codec.to_dict(), "params": entries, "nbytes": offset}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not a checkpoint (bad magic line)")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end])
    blob = raw[end + 1:]
    if len(blob) != header["nbytes"]:
        raise ValueError(f"checkpoint blob has {len(blob)} bytes, expected {header['nbytes']}")
    config = TrainConfig.from_dict(header["config"])
    arrays, tags = {}, {}
    for e in header["params"]:
        n = int(np.prod(e["shape"])) * 4
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=e["offset"]).reshape(e["shape"]).copy()
        tags[e["name"]] = e["tag"]
    expected = init_params(config.model_config(), 0)
    for name, a in expected.arrays.items():
        if name not in arrays or arrays[name].shape != a.shape:
            got = arrays[name].shape if name in arrays else "missing"
            raise ValueError(f"checkpoint parameter {name}: expected shape {a.shape}, got {got}")
    if set(arrays) != set(expected.arrays):
        raise ValueError(f"checkpoint has unexpected parameters {sorted(set(arrays) - set(expected.arrays))}")
    return Checkpoint(Params(arrays, tags), config, codec_from_dict(header["codec"]))


# --------------------------------------------------------------- optimizer


class Adam:
    """Adam without weight decay over a dict of arrays, updated in place."""

    def __init__(self, names: Sequence[str], params: Params, lr: float, beta1: float, beta2: float, eps: float):
        self.names = list(names)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(params.arrays[n]) for n in self.names}
        self.v = {n: np.zeros_like(params.arrays[n]) for n in self.names}
        self.t = 0

    def step(self, params: Params, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p = params.arrays[n]
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant" or total <= 0:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


# ----------------------------------------------------------------- metrics

METRIC_FIELDS = ("step", "ar_loss", "flow_loss", "total", "eval_score", "follow_rate", "ood_follow_rate",
                 "forward_passes", "wall_clock", "seed", "preset")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def write_metrics(rows: Sequence[dict], path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in METRIC_FIELDS})
    Path(path).write_text(buf.getvalue())


def read_metrics(path) -> list[dict]:
    """Rows as written: ints for step and seed, floats or None elsewhere."""
    out = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k in METRIC_FIELDS:
                v = raw[k]
                if k == "preset":
                    row[k] = v
                elif k in ("step", "seed"):
                    row[k] = int(v)
                else:
                    row[k] = float(v) if v != "" else None
            out.append(row)
    return out


class InsulationError(AssertionError):
    pass


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- training


EVAL_SEED_BASE = 900_000
OOD_SEED_BASE = 950_000


def eval_seeds(n: int, ood: bool = False) -> list[int]:
    return list(range(OOD_SEED_BASE if ood else EVAL_SEED_BASE, (OOD_SEED_BASE if ood else EVAL_SEED_BASE) + n))


@dataclass
class EvalSummary:
    score: float
    follow_rate: float
    ood_follow_rate: float | None
    forward_passes: float
    failures: int
    results: list = field(default_factory=list)


def evaluate_params(cfg: TrainConfig, params: Params, codec, n_episodes: int, ood_episodes: int = 0,
                    mode: str | None = None, seed: int = 0) -> EvalSummary:
    """Closed-loop rollouts on ambiguous scenes (and held-out-combination scenes)."""
    policy = ChunkPolicy(cfg.model_config(), params, codec, StateEncoder(STATE_KINDS[cfg.state_encoding]),
                         mode=mode, n_flow_steps=cfg.n_flow_steps, seed=seed)
    passes = []

    def act(obs):
        res = policy.decode(obs)
        passes.append(res.passes)
        return res.chunks

    res = env.evaluate_rollout(act, eval_seeds(n_episodes), "ambiguous")
    score = float(np.mean([r.score for r in res])) if res else 0.0
    ood = None
    if ood_episodes:
        ood = env.follow_rate(env.evaluate_rollout(act, eval_seeds(ood_episodes, ood=True), "ood"))
    return EvalSummary(score, env.follow_rate(res), ood, float(np.mean(passes)) if passes else 0.0,
                       policy.failures, res)


class Trainer:
    """One training run: optional caption-only warm start, then the preset's recipe."""

    def __init__(self, cfg: TrainConfig, records: Sequence[dict] | None = None, data: TrainingData | None = None):
        self.cfg = cfg
        self.mcfg = cfg.model_config()
        if data is None:
            if records is None:
                records = load_records(cfg.data)
            data = TrainingData(records, cfg.codec, horizon=self.mcfg.horizon, action_dim=self.mcfg.action_dim)
        self.data = data
        self.codec = data.codec
        if self.codec.token_vocab_size > self.mcfg.action_vocab:
            raise ValueError(f"codec vocab {self.codec.token_vocab_size} exceeds model action vocab {self.mcfg.action_vocab}")
        self.state_encoder = StateEncoder(STATE_KINDS[cfg.state_encoding], state_dim=self.mcfg.state_dim)
        self.dtype = np.dtype(cfg.dtype)
        self.sampler = TimestepSampler()
        self.insulation_checks = 0

    # -- batches

    def _streams(self, step: int, captions_only: bool = False, stream_seed: int = 0):
        cfg, mcfg = self.cfg, self.mcfg
        rng = np.random.default_rng([cfg.seed, stream_seed, step])
        B = cfg.batch_size
        if captions_only:
            n_cap = B
        elif self.data.captions and cfg.caption_ratio > 0:
            n_cap = int(round(B * cfg.caption_ratio / (1.0 + cfg.caption_ratio)))
        else:
            n_cap = 0
        if n_cap and not self.data.captions:
            raise ValueError("caption examples requested but the dataset has none")
        streams, A, O, M = [], [], [], []
        for i in rng.integers(len(self.data.captions), size=n_cap) if n_cap else []:
            c = self.data.captions[i]
            streams.append(build_token_stream(c.grid, c.question, [], variant=mcfg.variant, text_target=c.answer,
                                              horizon=mcfg.horizon))
            A.append(np.zeros((mcfg.horizon, mcfg.action_dim)))
            O.append(A[-1])
            M.append(False)
        for i in rng.integers(len(self.data.actions), size=B - n_cap):
            e = self.data.actions[i]
            tau = float(self.sampler.sample(rng))
            omega = rng.standard_normal(e.chunk.shape)
            text = e.subtask if cfg.subtasks and e.subtask else None
            streams.append(build_token_stream(
                e.grid, e.instruction, self.state_encoder.encode(e.state), variant=mcfg.variant,
                action_ids=e.action_ids, noisy=noise_actions(e.chunk, tau, omega), tau=tau,
                text_target=text, horizon=mcfg.horizon))
            A.append(e.chunk)
            O.append(omega)
            M.append(True)
        return streams, np.array(A), np.array(O), np.array(M)

    def loss_on(self, params: Params, step: int, trainable=None, captions_only=False, stream_seed=0,
                variant_cfg: ModelConfig | None = None):
        mcfg = variant_cfg or self.mcfg
        streams, A, O, M = self._streams(step, captions_only, stream_seed)
        batch = collate(streams, mcfg)
        Lp = batch.prefix_width
        nb = Lp + batch.ar_width
        start = nb if not batch.ar_mask.any() else (Lp if mcfg.variant == "oft" else Lp - 1)
        out = forward(params, batch, mcfg, trainable=trainable, logits_start=start)
        loss = combined_loss(out, batch, A, O, M, alpha=self.cfg.alpha)
        return out, batch, loss, (A, O, M)

    # -- phases

    def warm_start(self) -> Params:
        """Caption-only backbone training, cached on disk when a cache path is set."""
        cfg = self.cfg
        wcfg = dataclasses.replace(self.mcfg, variant="pi0-fast")
        key = self._warm_key()
        # the cache is a directory of results keyed by every setting that affects them
        cache = Path(cfg.warm_start_cache) / f"warm-{key[:20]}.npz" if cfg.warm_start_cache else None
        if cache and cache.exists():
            with np.load(cache) as z:
                if str(z["__key__"]) == key:
                    return Params({k: z[k] for k in z.files if k != "__key__"}, {k: "backbone" for k in z.files if k != "__key__"})
        params = init_params(wcfg, cfg.seed, self.dtype)
        if not self.data.captions:
            raise ValueError("warm start needs caption records in the dataset")
        opt = Adam(params.names(), params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        for step in range(cfg.warm_start_steps):
            out, batch, loss, _ = self.loss_on(params, step, captions_only=True, stream_seed=1, variant_cfg=wcfg)
            self._check_finite(loss, step)
            gm = backward(loss.loss, retain="leaves")
            opt.step(params, {n: gm[out.leaves[n]] for n in opt.names}, learning_rate(cfg, step, cfg.warm_start_steps))
            out.graph.release()
        if cache:
            cache.parent.mkdir(parents=True, exist_ok=True)
            tmp = cache.with_suffix(".tmp.npz")
            np.savez(tmp, __key__=np.array(key), **params.arrays)
            tmp.replace(cache)
        return params

    def _warm_key(self) -> str:
        cfg = self.cfg
        wcfg = dataclasses.replace(self.mcfg, variant="pi0-fast")
        caps = hashlib.sha256(b"".join(np.ascontiguousarray(c.grid).tobytes() + bytes(c.question) + bytes(c.answer)
                                       for c in self.data.captions)).hexdigest()
        blob = json.dumps([wcfg.to_dict(), cfg.seed, cfg.warm_start_steps, cfg.batch_size, cfg.lr, cfg.lr_schedule,
                           cfg.beta1, cfg.beta2, cfg.eps, cfg.dtype, caps], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def init(self) -> Params:
        params = init_params(self.mcfg, self.cfg.seed, self.dtype)
        if self.cfg.warm_start_steps > 0:
            warm = self.warm_start()
            for k, v in warm.arrays.items():
                params.arrays[k] = v.astype(self.dtype).copy()
        return params

    def trainable(self, params: Params) -> list[str]:
        if self.mcfg.variant == "frozen":
            return params.names("expert")
        return params.names()

    def _check_finite(self, loss, step):
        if not np.isfinite(loss.total):
            raise TrainingError(f"non-finite loss at step {step}: ar={loss.ar} flow={loss.flow} total={loss.total}")

    def check_insulation(self, out, batch, targets, tags: dict[str, str] | None = None) -> None:
        """Flow loss alone must leave every backbone parameter with an exactly zero gradient."""
        tags = tags or self.params_tags
        A, O, M = targets
        if out.flow is None or not M.any():
            return
        fl = combined_loss(out, batch, A, O, M, alpha=self.cfg.alpha, parts=("flow",))
        gm = backward(fl.loss, retain="leaves")
        for name, leaf in out.leaves.items():
            if out.leaves[name].trainable and tags[name] == "backbone" and np.any(gm[leaf] != 0):
                raise InsulationError(f"flow loss reached backbone parameter {name}")
        self.insulation_checks += 1

    def fit(self, metrics_path=None, log=None) -> tuple[Params, list[dict]]:
        cfg = self.cfg
        params = self.init()
        self.params_tags = params.tags
        names = self.trainable(params)
        opt = Adam(names, params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        rows: list[dict] = []
        window: list[tuple[float, float, float]] = []
        t_window = 0.0
        for step in range(cfg.steps + 1):
            t0 = time.perf_counter()
            out, batch, loss, targets = self.loss_on(params, step, trainable=names)
            self._check_finite(loss, step)
            window.append((loss.ar, loss.flow, loss.total))
            if step < cfg.steps:
                gm = backward(loss.loss, retain="leaves")
                opt.step(params, {n: gm[out.leaves[n]] for n in names}, learning_rate(cfg, step, cfg.steps))
                if (cfg.variant == "ours" and cfg.insulation_check_every
                        and step % cfg.insulation_check_every == 0):
                    self.check_insulation(out, batch, targets)
            out.graph.release()
            t_window += time.perf_counter() - t0
            if step % cfg.eval_every == 0 or step == cfg.steps:
                final = step == cfg.steps
                ev = evaluate_params(cfg, params, self.codec, cfg.eval_episodes,
                                     cfg.ood_episodes if final else 0, seed=cfg.seed * 1000 + step)
                mean = np.mean(window, axis=0)
                row = {
                    "step": step, "ar_loss": float(mean[0]), "flow_loss": float(mean[1]), "total": float(mean[2]),
                    "eval_score": ev.score, "follow_rate": ev.follow_rate, "ood_follow_rate": ev.ood_follow_rate,
                    "forward_passes": ev.forward_passes,
                    "wall_clock": t_window / len(window) if cfg.record_wall_clock else None,
                    "seed": cfg.seed, "preset": cfg.preset,
                }
                rows.append(row)
                window, t_window = [], 0.0
                if log:
                    log(row)
                if metrics_path:
                    write_metrics(rows, metrics_path)
        self.params = params
        return params, rows


def train(cfg: TrainConfig, out_dir=None, records=None, data=None, log=None):
    """Train and, with ``out_dir``, write ``metrics.csv``, ``model.ckpt`` and ``config.json``."""
    trainer = Trainer(cfg, records=records, data=data)
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = out_dir / "metrics.csv"
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")
    params, rows = trainer.fit(metrics, log=log)
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", params, cfg, trainer.codec)
    return trainer, params, rows


def step_time(cfg: TrainConfig, data: TrainingData, n_steps: int = 20, warmup: int = 3) -> float:
    """Median wall-clock of one optimisation step (forward, backward, update), in seconds."""
    trainer = Trainer(dataclasses.replace(cfg, warm_start_steps=0), data=data)
    params = init_params(trainer.mcfg, cfg.seed, trainer.dtype)
    names = trainer.trainable(params)
    opt = Adam(names, params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    times = []
    for step in range(warmup + n_steps):
        t0 = time.perf_counter()
        out, batch, loss, _ = trainer.loss_on(params, step, trainable=names)
        gm = backward(loss.loss, retain="leaves")
        opt.step(params, {n: gm[out.leaves[n]] for n in names}, cfg.lr)
        out.graph.release()
        if step >= warmup:
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


TINY_MODEL = dict(width=8, expert_width=8, depth=2, n_heads=2, head_dim=4, ffn_mult=2, expert_ffn_mult=2,
                  text_vocab=16, action_vocab=8, state_bins=4, tau_width=4, horizon=2, action_dim=2, state_dim=2,
                  max_prefix=8, max_ar=6)


def tiny_grad_check(variant: str = "ours", seed: int = 0, tolerance: float = 1e-4) -> tuple[GradCheckReport, list[str]]:
    """Finite-difference check of the combined loss on a two-example float64 toy model.

    Adaptive-norm maps are drawn away from their zero init so every path carries gradient.
    """
    cfg = ModelConfig(variant=variant, **TINY_MODEL)
    rng = np.random.default_rng(seed)
    H, d = cfg.horizon, cfg.action_dim
    a = rng.uniform(-1, 1, (2, H, d))
    om = rng.standard_normal((2, H, d))
    tau = np.array([0.3, 0.8])
    noisy = noise_actions(a, tau, om)
    streams = []
    for b in range(2):
        grid = np.zeros((1, 2, cfg.n_channels))
        grid[0, 0, b] = grid[0, 1, 4 + b] = 1.0
        streams.append(build_token_stream(grid, [2 + b], [("state", rng.uniform(-1, 1, cfg.state_dim))],
                                          variant=variant, action_ids=[b + 1, 3], noisy=noisy[b],
                                          tau=float(tau[b]), horizon=H))
    batch = collate(streams, cfg)
    params = init_params(cfg, seed, np.float64)
    for n in params.names("expert"):
        if "_scale_" in n or "_shift_" in n:
            params.arrays[n] = rng.standard_normal(params.arrays[n].shape) * 0.3
    names = params.names()
    start = batch.prefix_width - 1

    def f(g, *tensors):
        out = forward(None, batch, cfg, leaves=dict(zip(names, tensors)), logits_start=start)
        return combined_loss(out, batch, a, om).loss

    return grad_check(f, [params.arrays[n] for n in names], tolerance=tolerance), names
