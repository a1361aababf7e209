"""Acceptance criteria, one PASS/FAIL line each.

Criteria 7-10 read the stored experiment under ``results/experiment``; set
``KIVLA_RERUN=1`` to regenerate it first (several CPU hours).
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import record_criterion
from kivla import autodiff as ad
from kivla import codecs as C
from kivla import env
from kivla import experiment as X
from kivla import model as M
from kivla import train as T
from kivla.objectives import TimestepSampler, combined_loss, noise_actions

ROOT = Path(__file__).resolve().parents[1]
RESULTS = ROOT / "results"
EXPERIMENT = RESULTS / "experiment"


def random_streams(variant, rng, n=2, fast_ids=None, noisy=None):
    streams, A, O = [], [], []
    for i in range(n):
        scene, st, instr = env.reset(int(rng.integers(1 << 30)), "ambiguous")
        a = rng.uniform(-1, 1, (8, 3))
        om = rng.standard_normal(a.shape)
        tau = float(rng.random())
        ids = rng.integers(0, 512, int(rng.integers(1, 16))).tolist() if fast_ids is None else fast_ids[i]
        x = noise_actions(a, tau, om) if noisy is None else noisy[i]
        streams.append(M.build_token_stream(env.observe(scene, st), instr.token_ids, [("state", st.q(scene.size))],
                                            variant=variant, action_ids=ids, noisy=x, tau=tau))
        A.append(a)
        O.append(om)
    return streams, np.array(A), np.array(O)


def random_batch(variant, rng, n=2, cfg=None, fast_ids=None, noisy=None):
    streams, A, O = random_streams(variant, rng, n, fast_ids, noisy)
    return M.collate(streams, cfg or M.ModelConfig(variant=variant)), A, O


def flow_backbone_grads(variant, params, rng):
    cfg = M.ModelConfig(variant=variant)
    batch, A, O = random_batch(variant, rng, cfg=cfg)
    out = M.forward(params, batch, cfg, logits_start=batch.prefix_width - 1)
    gm = ad.backward(combined_loss(out, batch, A, O, parts=("flow",)).loss)
    grads = {n: gm[out.leaves[n]] for n in params.names("backbone")}
    out.graph.release()
    return grads


def test_criterion_01_structural_insulation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    params = M.init_params(M.ModelConfig(variant="ours"), 0)
    nonzero_ours = 0
    nonzero_joint = 0
    for _ in range(20):
        g_ours = flow_backbone_grads("ours", params, rng)
        nonzero_ours += sum(bool(np.any(v != 0)) for v in g_ours.values())
        g_joint = flow_backbone_grads("joint", params, rng)
        nonzero_joint += sum(bool(np.any(v != 0)) for v in g_joint.values())
    dt = time.perf_counter() - t0
    ok = nonzero_ours == 0 and nonzero_joint > 0 and dt < 60
    record_criterion(1, ok, f"ours: {nonzero_ours} nonzero backbone flow gradients over 20 batches; "
                            f"joint: {nonzero_joint} nonzero; {dt:.1f}s")
    assert ok


def test_criterion_02_forward_equivalence():
    rng = np.random.default_rng(202)
    ours, joint = M.ModelConfig(variant="ours"), M.ModelConfig(variant="joint")
    params = M.init_params(ours, 1)
    identical = 0
    for _ in range(20):
        streams, _, _ = random_streams("ours", rng, n=1)
        batch = M.collate(streams, ours)
        a = M.forward(params, batch, ours, trainable=())
        b = M.forward(params, M.collate(streams, joint), joint, trainable=())
        identical += int(np.array_equal(a.logits.value, b.logits.value) and np.array_equal(a.flow.value, b.flow.value)
                         and np.array_equal(a.backbone_out.value, b.backbone_out.value))
    record_criterion(2, identical == 20, f"{identical}/20 streams bit-identical (logits, flow, backbone states)")
    assert identical == 20


def test_criterion_03_leakage():
    rng = np.random.default_rng(303)
    cfg = M.ModelConfig(variant="ours")
    params = M.init_params(cfg, 2)
    expert_same = logits_same = 0
    for _ in range(20):
        seed = int(rng.integers(1 << 30))
        noisy = rng.standard_normal((2, 8, 3))
        ids_a = [rng.integers(0, 512, 7).tolist() for _ in range(2)]
        ids_b = [rng.integers(0, 512, 7).tolist() for _ in range(2)]
        ba, _, _ = random_batch("ours", np.random.default_rng(seed), cfg=cfg, fast_ids=ids_a, noisy=noisy)
        bb, _, _ = random_batch("ours", np.random.default_rng(seed), cfg=cfg, fast_ids=ids_b, noisy=noisy)
        fa, fb = M.forward(params, ba, cfg, trainable=()), M.forward(params, bb, cfg, trainable=())
        expert_same += int(np.array_equal(fa.flow.value, fb.flow.value)
                           and np.array_equal(fa.expert_out.value, fb.expert_out.value))
        ids = [rng.integers(0, 512, 7).tolist() for _ in range(2)]
        na, nb = rng.standard_normal((2, 8, 3)), rng.standard_normal((2, 8, 3))
        ba, _, _ = random_batch("ours", np.random.default_rng(seed), cfg=cfg, fast_ids=ids, noisy=na)
        bb, _, _ = random_batch("ours", np.random.default_rng(seed), cfg=cfg, fast_ids=ids, noisy=nb)
        la, lb = M.forward(params, ba, cfg, trainable=()), M.forward(params, bb, cfg, trainable=())
        logits_same += int(np.array_equal(la.logits.value, lb.logits.value))
    ok = expert_same == 20 and logits_same == 20
    record_criterion(3, ok, f"FAST ids -> expert unchanged {expert_same}/20; noise -> logits unchanged {logits_same}/20")
    assert ok


def _tiny_problem(variant):
    cfg = M.ModelConfig(variant=variant, **T.TINY_MODEL)
    rng = np.random.default_rng(44)
    a = rng.uniform(-1, 1, (2, cfg.horizon, cfg.action_dim))
    om = rng.standard_normal(a.shape)
    tau = np.array([0.25, 0.7])
    x = noise_actions(a, tau, om)
    streams = []
    for b in range(2):
        grid = np.zeros((1, 2, cfg.n_channels))
        grid[0, b, 2 * b] = grid[0, 1 - b, 5] = 1.0
        streams.append(M.build_token_stream(grid, [3, 4 + b], [("state", rng.uniform(-1, 1, cfg.state_dim))],
                                            variant=variant, action_ids=[b + 2, 1], noisy=x[b], tau=float(tau[b]),
                                            horizon=cfg.horizon))
    batch = M.collate(streams, cfg)
    params = M.init_params(cfg, 9, np.float64)
    for n in params.names():
        if "_scale_" in n or "_shift_" in n:
            params.arrays[n] = rng.standard_normal(params.arrays[n].shape) * 0.3
    return cfg, batch, params, a, om


def _loss_value(cfg, batch, params, a, om):
    out = M.forward(params, batch, cfg, logits_start=batch.prefix_width - 1, trainable=())
    v = float(combined_loss(out, batch, a, om).loss.value)
    out.graph.release()
    return v


def test_criterion_04_gradient_correctness():
    t0 = time.perf_counter()
    # joint has no barrier, so plain central differences of the loss are the exact oracle
    cfg, batch, params, a, om = _tiny_problem("joint")
    out = M.forward(params, batch, cfg, logits_start=batch.prefix_width - 1)
    gm = ad.backward(combined_loss(out, batch, a, om).loss)
    analytic = {n: gm[out.leaves[n]] for n in params.names()}
    worst, worst_name = 0.0, ""
    rng = np.random.default_rng(5)
    h = 1e-6
    for n in params.names():
        arr = params.arrays[n]
        flat = rng.choice(arr.size, size=min(4, arr.size), replace=False)
        num, ana = [], []
        for f in flat:
            idx = np.unravel_index(f, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            up = _loss_value(cfg, batch, params, a, om)
            arr[idx] = orig - h
            down = _loss_value(cfg, batch, params, a, om)
            arr[idx] = orig
            num.append((up - down) / (2 * h))
            ana.append(analytic[n][idx])
        num, ana = np.array(num), np.array(ana)
        scale = max(np.abs(num).max(), np.abs(ana).max())
        err = 0.0 if scale == 0 else float(np.abs(num - ana).max() / scale)
        if err > worst:
            worst, worst_name = err, n
    # ours: the severed-function check (barriered key/value paths frozen)
    rep, names = T.tiny_grad_check("ours", seed=3, tolerance=1e-4)
    covered = {n for n in names if "_scale_" in n or "_shift_" in n or n.startswith("tau_w")}
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and rep.passed and len(covered) > 0 and dt < 300
    record_criterion(4, ok, f"joint vs central differences max rel err {worst:.2e} ({worst_name}); "
                            f"ours severed grad_check max {max(rep.max_rel_error):.2e} over {len(names)} tensors "
                            f"incl. {len(covered)} adaptive-norm/tau-MLP; {dt:.0f}s")
    assert ok


def test_criterion_05_codec_fidelity():
    rng = np.random.default_rng(505)
    recs = env.generate_dataset(300, seed=11, caption_fraction=0.0)
    fast = C.FastTokenizer().fit(np.array([s["chunk"] for r in recs for s in r["steps"]]))
    H, d, s = 8, 3, fast.scale
    bound = math.sqrt(H * d) / (2 * s)
    fast_worst = max(np.linalg.norm(fast.decode(fast.encode(z)) - z)
                     for z in rng.uniform(-1, 1, (1000, H, d)))
    base = fast.bpe_.base_count
    bpe_ok = all(fast.bpe_.decode(fast.bpe_.encode(q)) == q
                 for q in (rng.integers(0, base, int(rng.integers(0, 40))).tolist() for _ in range(1000)))
    dct_worst = max(np.abs(C.dct_basis(n) @ C.dct_basis(n).T - np.eye(n)).max() for n in (2, 4, 8, 16, 32))
    ok = fast_worst <= bound + 1e-12 and bpe_ok and dct_worst < 1e-10
    record_criterion(5, ok, f"FAST worst L2 error {fast_worst:.4f} <= {bound:.4f}; BPE identity on 1000: {bpe_ok}; "
                            f"DCT orthonormality {dct_worst:.1e}")
    assert ok


def test_criterion_06_timestep_sampler():
    tau = TimestepSampler().sample(np.random.default_rng(606), 100_000)
    ks = stats.kstest(tau, lambda t: 1 - ((0.999 - np.clip(t, 0, 0.999)) / 0.999) ** 1.5).statistic
    mean = float(tau.mean())
    ok = ks < 0.01 and abs(mean - 0.3996) <= 0.01
    record_criterion(6, ok, f"KS {ks:.4f} < 0.01; mean {mean:.4f} vs 0.3996 +- 0.01")
    assert ok


# ------------------------------------------------------- stored experiment


@pytest.fixture(scope="module")
def experiment_dir():
    if os.environ.get("KIVLA_RERUN"):
        cfg = json.loads((RESULTS / "experiment_config.json").read_text())
        data = RESULTS / "train.jsonl"
        env.write_jsonl(env.generate_dataset(cfg["records"], seed=cfg["data_seed"]), data)
        X.run_matrix(cfg["presets"], cfg["seeds"], EXPERIMENT, data, cfg["overrides"], resume=False)
        for extra in cfg.get("single_seed_presets", []):
            X.run_matrix([extra], cfg["seeds"][:1], EXPERIMENT, data, cfg["overrides"], resume=False)
    if not (EXPERIMENT / "summary.csv").exists():
        pytest.skip("no stored experiment; run with KIVLA_RERUN=1")
    return EXPERIMENT


def test_criterion_07_convergence_speed(experiment_dir):
    runs = X.collect_runs(experiment_dir)
    horizon = max(int(rows[-1]["step"]) for rs in runs.values() for _, rows in rs) + 1
    med = {p: X.median_steps([X.steps_to_threshold(rows) for _, rows in runs.get(p, [])], horizon)
           for p in ("ours", "pi0", "pi0-fast")}
    n = {p: len(runs.get(p, [])) for p in med}
    reached = {p: sum(X.steps_to_threshold(rows) is not None for _, rows in runs.get(p, [])) for p in med}
    ok = (all(v >= 3 for v in n.values()) and med["ours"] <= 0.5 * med["pi0"] and med["ours"] <= 1.5 * med["pi0-fast"])
    desc = "; ".join(f"{p} median {med[p]:.0f} ({reached[p]}/{n[p]} reached)" for p in med)
    record_criterion(7, ok, f"steps to score>=0.8, unreached counted as {horizon}: {desc}")
    assert ok


def test_criterion_08_language_following(experiment_dir):
    ours = X.final_metric(experiment_dir, "ours", "follow_rate")
    base = X.final_metric(experiment_dir, "joint-no-vlm", "follow_rate")
    cfg = json.loads((experiment_dir / "runs" / "ours-s0" / "config.json").read_text())
    res = env.evaluate_rollout(env.random_policy(0), range(700_000, 700_600), "ambiguous")
    follow, chance = env.follow_rate(res), env.chance_rate(res)
    calib = abs(follow - chance) <= 0.1
    ok = (len(ours) >= 3 and len(base) >= 3 and cfg["eval_episodes"] >= 100
          and float(np.mean(ours)) > float(np.mean(base)) and calib)
    record_criterion(8, ok, f"follow rate ours {np.mean(ours):.3f} {np.round(ours, 3).tolist()} vs joint-no-vlm "
                            f"{np.mean(base):.3f} {np.round(base, 3).tolist()} ({cfg['eval_episodes']} episodes/seed); "
                            f"random {follow:.3f} vs chance {chance:.3f}")
    assert ok


def test_criterion_09_frozen_backbone(experiment_dir):
    ours = X.final_metric(experiment_dir, "ours", "eval_score")
    frozen = X.final_metric(experiment_dir, "frozen", "eval_score")
    gap = float(np.mean(ours) - np.mean(frozen)) if ours and frozen else float("nan")
    ok = len(ours) >= 3 and len(frozen) >= 3 and gap >= 0.2
    record_criterion(9, ok, f"score ours {np.mean(ours):.3f} vs frozen {np.mean(frozen):.3f}, gap {gap:.3f} (need >= 0.2)")
    assert ok


def test_criterion_10_latency(experiment_dir):
    rows = X.read_latency(experiment_dir / "latency.csv")
    by_run: dict[tuple[str, str], dict[str, dict]] = {}
    for r in rows:
        by_run.setdefault((r["preset"], r["seed"]), {})[r["mode"]] = r
    fast_pairs, other_pairs = [], []
    for (preset, seed), modes in sorted(by_run.items()):
        if "flow" in modes and "ar" in modes:
            codec = json.loads((experiment_dir / "runs" / f"{preset}-s{seed}" / "config.json").read_text())["codec"]
            (fast_pairs if codec == "fast" else other_pairs).append((preset, seed, modes["flow"], modes["ar"]))

    def holds(flow, ar):
        return (float(flow["forward_passes"]) < float(ar["forward_passes"])
                and float(flow["seconds_per_chunk"]) < float(ar["seconds_per_chunk"]))

    def fmt(pairs):
        return ", ".join(f"{p}-s{s}: flow {float(f['forward_passes']):.0f} passes/{float(f['seconds_per_chunk']):.3f}s "
                         f"vs AR {float(a['tokens']):.1f} tokens {float(a['forward_passes']):.1f} passes/"
                         f"{float(a['seconds_per_chunk']):.3f}s" for p, s, f, a in pairs)

    fast_long = [t for t in fast_pairs if float(t[3]["tokens"]) > 10]
    # the same model under naive tokens is where sequences exceed 10 on this data
    qualifying = fast_long + [t for t in other_pairs if float(t[3]["tokens"]) > 10]
    ok = len(qualifying) > 0 and all(holds(f, a) for _, _, f, a in qualifying)
    cond = f"{len(fast_long)}/{len(fast_pairs)} FAST policies decode > 10 tokens"
    if not fast_long:
        cond += " (FAST chunks stay short here)"
    record_criterion(10, ok, f"{cond}; {fmt(fast_pairs[:3])}; beyond 10 tokens: {fmt(qualifying)}")
    assert ok


# ------------------------------------------------------------- live checks


@pytest.fixture(scope="module")
def default_data():
    return T.TrainingData(env.generate_dataset(2000, seed=0), "fast")


def test_criterion_11_training_cost(default_data):
    ours = T.step_time(T.preset_config("ours"), default_data, n_steps=15, warmup=3)
    fast = T.step_time(T.preset_config("pi0-fast"), default_data, n_steps=15, warmup=3)
    ratio = ours / fast
    record_criterion(11, ratio <= 1.35, f"step time ours {ours:.3f}s vs pi0-fast {fast:.3f}s, ratio {ratio:.2f} <= 1.35")
    assert ratio <= 1.35


def test_criterion_12_reproducibility(tmp_path, default_data):
    results = []
    for preset in ("ours", "pi0-fast", "frozen"):
        cfg = T.preset_config(preset, steps=12, eval_every=6, eval_episodes=4, ood_episodes=4, warm_start_steps=4,
                              batch_size=8, seed=3)
        T.train(cfg, tmp_path / f"{preset}-a", data=default_data)
        T.train(cfg, tmp_path / f"{preset}-b", data=default_data)
        a = (tmp_path / f"{preset}-a" / "metrics.csv").read_bytes()
        results.append(a == (tmp_path / f"{preset}-b" / "metrics.csv").read_bytes())
    record_criterion(12, all(results), f"byte-identical metrics CSV on rerun for ours, pi0-fast, frozen: {results}")
    assert all(results)
