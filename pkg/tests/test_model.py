import numpy as np
import pytest

from kivla import autodiff as ad
from kivla import codecs, env
from kivla import model as M
from kivla.model import TokenStream, build_attention_plan
from kivla.objectives import combined_loss, noise_actions

TINY = dict(width=8, expert_width=8, depth=2, n_heads=2, head_dim=4, ffn_mult=2, expert_ffn_mult=2,
            text_vocab=16, action_vocab=8, state_bins=4, tau_width=4, horizon=2, action_dim=2, state_dim=2,
            max_prefix=8, max_ar=6)


def toy_stream(n_p=3, n_f=2, n_e=2):
    items = [("word", 1)] * n_p + [("fast-action", 0)] * n_f + [("noisy-action", np.zeros(3))] * n_e
    return TokenStream(items, n_p, n_p + n_f, [True] * n_f, 0.5 if n_e else None)


def allowed_sets(plan):
    names = ["P1", "P2", "P3", "F1", "F2", "E1", "E2"]
    return {names[i]: {names[j] for j in np.flatnonzero(plan.allowed[i])} for i in range(len(names))}


P = {"P1", "P2", "P3"}


def test_plan_ours_hand_enumeration():
    sets = allowed_sets(build_attention_plan(toy_stream(), "ours"))
    assert sets["P1"] == sets["P2"] == sets["P3"] == P
    assert sets["F1"] == P | {"F1"}
    assert sets["F2"] == P | {"F1", "F2"}
    assert sets["E1"] == sets["E2"] == P | {"E1", "E2"}


def test_plan_hybrid_fast_sees_expert():
    sets = allowed_sets(build_attention_plan(toy_stream(), "hybrid"))
    assert sets["F1"] == P | {"F1", "E1", "E2"}
    assert sets["F2"] == P | {"F1", "F2", "E1", "E2"}
    assert sets["E1"] == P | {"E1", "E2"}


def test_plan_oft_bidirectional_actions():
    sets = allowed_sets(build_attention_plan(toy_stream(), "oft"))
    assert sets["F1"] == sets["F2"] == P | {"F1", "F2"}


def test_plan_barrier_block():
    ours = build_attention_plan(toy_stream(), "ours")
    expected = np.zeros((7, 7), dtype=bool)
    expected[5:, :3] = True
    assert np.array_equal(ours.barrier, expected)
    assert not build_attention_plan(toy_stream(), "joint").barrier.any()
    assert np.array_equal(build_attention_plan(toy_stream(), "frozen").barrier, expected)


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_plan_invariants(variant):
    plan = build_attention_plan(toy_stream(), variant)
    ok = plan.allowed
    assert not ok[:3, 3:].any()                       # prefix never sees F or E
    if variant in ("ours", "joint", "pi0"):
        assert not ok[5:, 3:5].any()                  # expert never sees FAST
    if variant != "hybrid":
        assert not ok[3:5, 5:].any()
    rows, cols = np.nonzero(plan.barrier)
    assert np.all(rows >= 5) and np.all(cols < 5)
    assert plan.barrier.any() == (variant in ("ours", "frozen"))
    assert set(np.unique(plan.mask)) <= {0.0, -np.inf}


def test_plan_unknown_variant():
    with pytest.raises(ValueError, match="unknown variant"):
        build_attention_plan(toy_stream(), "diffusion")


@pytest.fixture(scope="module")
def episode():
    rec = env.action_record(7, "ambiguous", annotate=True)
    step = rec["steps"][0]
    return env.record_observation(rec, step), rec["instruction"]["tokens"], np.asarray(step["state"])


def test_stream_lengths(episode):
    grid, instr, q = episode
    state = codecs.StateEncoder("continuous").encode(q)
    ids = [3, 1, 4, 1]
    noisy = np.zeros((8, 3))
    s = M.build_token_stream(grid, instr, state, variant="ours", action_ids=ids, noisy=noisy, tau=0.3)
    assert len(s) == 64 + 5 + 1 + len(ids) + 8
    s = M.build_token_stream(grid, instr, state, variant="pi0", action_ids=ids, noisy=noisy, tau=0.3)
    assert len(s) == 64 + 5 + 1 + 8 and s.ar_len == 0
    s = M.build_token_stream(grid, instr, state, variant="pi0-fast", action_ids=ids, noisy=noisy, tau=0.3)
    assert s.expert_len == 0 and s.ar_len == 4
    with pytest.raises(ValueError, match="horizon"):
        M.build_token_stream(grid, instr, state, variant="ours", noisy=np.zeros((5, 3)), tau=0.3)


def test_text_state_words_mapped(episode):
    grid, instr, q = episode
    s = M.build_token_stream(grid, instr, codecs.StateEncoder("text").encode(q), variant="oft")
    assert all(isinstance(v, int) for m, v in s.items[64:s.prefix_end])


def random_streams(variant, n, seed, horizon=8, fast_ids=None, noisy=None):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        scene, st, instr = env.reset(int(rng.integers(1 << 30)), "ambiguous")
        grid = env.observe(scene, st)
        ids = rng.integers(0, 512, int(rng.integers(1, 12))).tolist() if fast_ids is None else fast_ids[i]
        nz = rng.standard_normal((horizon, 3)) if noisy is None else noisy[i]
        out.append(M.build_token_stream(grid, instr.token_ids, [("state", st.q(scene.size))], variant=variant,
                                        action_ids=ids, noisy=nz, tau=float(rng.random())))
    return out


def default_model(variant, seed=0, dtype=np.float64):
    cfg = M.ModelConfig(variant=variant)
    return cfg, M.init_params(cfg, seed, dtype)


def test_forward_shapes():
    cfg, params = default_model("ours")
    streams = random_streams("ours", 3, 0)
    batch = M.collate(streams, cfg)
    out = M.forward(params, batch, cfg)
    nb = batch.prefix_width + batch.ar_width
    assert out.logits.shape == (3, nb, cfg.vocab_size)
    assert out.flow.shape == (3, 8, 3)
    pf_cfg, pf = default_model("pi0-fast")
    out = M.forward(pf, M.collate(random_streams("pi0-fast", 2, 0), pf_cfg), pf_cfg)
    assert out.flow is None


def test_ours_and_joint_forward_bit_identical():
    cfg_o, params = default_model("ours", 3)
    cfg_j = M.ModelConfig(variant="joint")
    for t in range(5):
        streams = random_streams("ours", 4, t)
        a = M.forward(params, M.collate(streams, cfg_o), cfg_o)
        b = M.forward(params, M.collate(streams, cfg_j), cfg_j)
        assert np.array_equal(a.logits.value, b.logits.value)
        assert np.array_equal(a.flow.value, b.flow.value)


@pytest.mark.parametrize("variant", ["ours", "joint", "pi0", "frozen", "transfusion"])
def test_leakage_fast_ids_do_not_reach_expert(variant):
    cfg, params = default_model(variant, 1)
    rng = np.random.default_rng(5)
    ids = [rng.integers(0, 512, 6).tolist() for _ in range(3)]
    noisy = rng.standard_normal((3, 8, 3))
    a = M.forward(params, M.collate(random_streams(variant, 3, 9, fast_ids=ids, noisy=noisy), cfg), cfg)
    ids2 = [rng.integers(0, 512, 6).tolist() for _ in range(3)]
    b = M.forward(params, M.collate(random_streams(variant, 3, 9, fast_ids=ids2, noisy=noisy), cfg), cfg)
    assert np.array_equal(a.flow.value, b.flow.value)


@pytest.mark.parametrize("variant", ["ours", "joint", "transfusion", "oft"])
def test_leakage_noise_does_not_reach_logits(variant):
    cfg, params = default_model(variant, 2)
    rng = np.random.default_rng(6)
    ids = [rng.integers(0, 256, 24).tolist() for _ in range(3)]
    a = M.forward(params, M.collate(random_streams(variant, 3, 4, fast_ids=ids, noisy=rng.standard_normal((3, 8, 3))), cfg), cfg)
    b = M.forward(params, M.collate(random_streams(variant, 3, 4, fast_ids=ids, noisy=rng.standard_normal((3, 8, 3))), cfg), cfg)
    assert np.array_equal(a.logits.value, b.logits.value)


def test_mask_soundness_perturbing_masked_key():
    # every masked (i, j): changing token j leaves output i bitwise unchanged
    cfg, params = default_model("ours", 4)
    streams = random_streams("ours", 1, 11)
    batch = M.collate(streams, cfg)
    base = M.forward(params, batch, cfg)
    nb = batch.prefix_width + batch.ar_width
    # perturb the last FAST token: no prefix position or expert position may change
    s2 = random_streams("ours", 1, 11)
    s2[0].items[s2[0].ar_end - 1] = ("fast-action", (s2[0].items[s2[0].ar_end - 1][1] + 1) % 512)
    pert = M.forward(params, M.collate(s2, cfg), cfg)
    assert np.array_equal(base.logits.value[:, : nb - 1], pert.logits.value[:, : nb - 1])
    assert np.array_equal(base.flow.value, pert.flow.value)


def flow_grads(variant, seed):
    cfg, params = default_model(variant, seed)
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (3, 8, 3))
    om = rng.standard_normal((3, 8, 3))
    tau = rng.random(3)
    streams = random_streams(variant, 3, seed, noisy=noise_actions(a, tau, om))
    batch = M.collate(streams, cfg)
    out = M.forward(params, batch, cfg, logits_start=batch.prefix_width - 1)
    fl = combined_loss(out, batch, a, om, parts=("flow",))
    gm = ad.backward(fl.loss)
    return params, {n: gm[out.leaves[n]] for n in params.arrays}, out, batch, (a, om)


def test_insulation_exact_zero_under_ours():
    params, grads, *_ = flow_grads("ours", 0)
    for name in params.names("backbone"):
        assert not np.any(grads[name]), name
    assert any(np.any(grads[n]) for n in params.names("expert"))


def test_frozen_insulation_all_but_expert():
    params, grads, *_ = flow_grads("frozen", 1)
    for name in params.names():
        if params.tags[name] != "expert":
            assert not np.any(grads[name]), name


def test_joint_flow_reaches_backbone_kv():
    params, grads, *_ = flow_grads("joint", 0)
    kv = [n for n in params.names("backbone") if n.endswith((".wk", ".wv"))]
    assert any(np.any(grads[n]) for n in kv)


def test_combined_backbone_grad_equals_ar_only_under_ours():
    params, _, out, batch, (a, om) = flow_grads("ours", 2)
    total = combined_loss(out, batch, a, om)
    ar = combined_loss(out, batch, a, om, parts=("ar",))
    g_total, g_ar = ad.backward(total.loss), ad.backward(ar.loss)
    for name in params.names("backbone"):
        assert np.array_equal(g_total[out.leaves[name]], g_ar[out.leaves[name]]), name


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_parameter_partition(variant):
    cfg = M.ModelConfig(variant=variant)
    params = M.init_params(cfg, 0)
    assert set(params.tags.values()) <= {"backbone", "expert"}
    assert params.count("backbone") + params.count("expert") == params.count()
    if variant == "transfusion":
        assert params.count("expert") == 0
    if variant in ("pi0-fast", "oft"):
        assert "act_in_w" not in params.arrays


def test_shared_projection_dims():
    cfg = M.ModelConfig()
    params = M.init_params(cfg, 0)
    assert params.arrays["b0.wq"].shape[1] == params.arrays["e0.wq"].shape[1] == cfg.attn_dim


def test_adaptive_rmsnorm_zero_init_is_rmsnorm(rng):
    g = ad.Graph()
    x = g.tensor(rng.standard_normal((2, 3, 4)))
    e = g.tensor(rng.standard_normal((2, 5)))
    zw, zb = g.tensor(np.zeros((5, 4))), g.tensor(np.zeros(4))
    y = M.adaptive_rmsnorm(x, e, zw, zb, zw, zb)
    assert np.array_equal(y.value, ad.rmsnorm(x).value)
    y0 = M.adaptive_rmsnorm(x, g.tensor(np.zeros((2, 5))), zw, zb, zw, zb)
    assert np.array_equal(y0.value, ad.rmsnorm(x).value)


def test_adaptive_rmsnorm_grad_check(rng):
    def f(g, x, e, sw, sb, hw, hb):
        return ad.sum_all(M.adaptive_rmsnorm(x, e, sw, sb, hw, hb) * 0.9)

    shapes = [(2, 3, 4), (2, 5), (5, 4), (4,), (5, 4), (4,)]
    rep = ad.grad_check(f, [rng.standard_normal(s) for s in shapes], tolerance=1e-5)
    assert rep.passed, rep.max_rel_error


def test_sinusoidal_features():
    phi0 = M.sinusoidal(0.0, 8)[0]
    assert phi0.tolist() == [0, 1, 0, 1, 0, 1, 0, 1]
    taus = np.linspace(0, 1, 101)
    norms = np.linalg.norm(M.sinusoidal(taus, 32), axis=1)
    assert np.all(norms <= np.sqrt(16) * np.sqrt(2) + 1e-12)
    # geometric ladder from 1 to 1e4: the last sine pair at tau=1 uses frequency 1e4
    assert np.isclose(M.sinusoidal(1.0, 8)[0, 6], np.sin(1e4))


def test_tau_mlp_grad_check(rng):
    tau = np.array([0.1, 0.7])

    def f(g, w1, w2):
        return ad.sum_all(M.tau_embedding(g, tau, w1, w2) * 1.3)

    rep = ad.grad_check(f, [rng.standard_normal((8, 8)) / 3, rng.standard_normal((8, 8)) / 3], tolerance=1e-5)
    assert rep.passed, rep.max_rel_error


def tiny_batch(variant, seed=0):
    cfg = M.ModelConfig(variant=variant, **TINY)
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (2, 2, 2))
    om = rng.standard_normal((2, 2, 2))
    tau = np.array([0.3, 0.8])
    noisy = noise_actions(a, tau, om)
    streams = []
    for b in range(2):
        grid = np.zeros((1, 2, cfg.n_channels))
        grid[0, 0, b] = grid[0, 1, 4 + b] = 1.0
        streams.append(M.build_token_stream(grid, [2 + b], [("state", rng.uniform(-1, 1, 2))], variant=variant,
                                            action_ids=[b + 1, 3], noisy=noisy[b], tau=float(tau[b]), horizon=2))
    return cfg, M.collate(streams, cfg), a, om


@pytest.mark.parametrize("variant", ["ours", "joint"])
def test_full_tiny_model_grad_check(variant):
    cfg, batch, a, om = tiny_batch(variant)
    params = M.init_params(cfg, 0, np.float64)
    # move adaptive-norm maps off zero so their paths carry gradient
    rng = np.random.default_rng(1)
    for n in params.names("expert"):
        if "_scale_" in n or "_shift_" in n:
            params.arrays[n] = rng.standard_normal(params.arrays[n].shape) * 0.3
    names = params.names()

    def f(g, *tensors):
        leaves = {n: t for n, t in zip(names, tensors)}
        out = M.forward(None, batch, cfg, leaves=leaves, logits_start=batch.prefix_width - 1)
        return combined_loss(out, batch, a, om).loss

    rep = ad.grad_check(f, [params.arrays[n] for n in names], tolerance=1e-4)
    worst = max(zip(rep.max_rel_error, names))
    assert rep.passed, worst


def test_forward_rejects_mismatched_batch():
    cfg, params = default_model("ours")
    batch = M.collate(random_streams("joint", 1, 0), M.ModelConfig(variant="joint"))
    with pytest.raises(ValueError, match="batch built for"):
        M.forward(params, batch, cfg)


def test_collate_rejects_expert_span_for_ar_only_variant():
    cfg = M.ModelConfig(variant="pi0-fast")
    with pytest.raises(ValueError, match="no expert span"):
        M.collate(random_streams("pi0-fast", 1, 0), cfg, expert=True)


def test_padding_does_not_change_rows():
    # a row's outputs are the same alone or padded next to a longer row
    cfg, params = default_model("ours", 6)
    streams = random_streams("ours", 3, 21)
    both = M.forward(params, M.collate(streams, cfg), cfg)
    alone = M.forward(params, M.collate(streams[:1], cfg), cfg)
    assert np.allclose(both.flow.value[0], alone.flow.value[0], atol=1e-10)
