import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_batch, tiny_config
from hscmoe.model import (
    ModelConfig,
    MoENet,
    adv_loss,
    assemble_input,
    cross_entropy,
    gate_probs,
    hsc_loss,
    inference_gate_scores,
    predict_mixture,
    sample_disagreeing,
    top_k_select,
)
from hscmoe.numcore import MLP, ConfigurationError, grad_check


# input assembly --------------------------------------------------------------

def test_assemble_single_embedding():
    table = np.arange(15.0).reshape(5, 3)
    out = assemble_input([[2]], np.zeros((1, 0)), [table])
    np.testing.assert_array_equal(out, [table[2]])


def test_assemble_numeric_only():
    out = assemble_input(np.zeros((1, 0), dtype=int), [[0.25, 0.75]], [])
    np.testing.assert_array_equal(out, [[0.25, 0.75]])


def test_assemble_slices():
    rng = np.random.default_rng(0)
    tables = [rng.normal(size=(7, 16)), rng.normal(size=(4, 16))]
    ids = np.array([[3, 1], [6, 2]])
    num = rng.random((2, 3))
    out = assemble_input(ids, num, tables)
    assert out.shape == (2, 35)
    for r in range(2):
        np.testing.assert_array_equal(out[r, 0:16], tables[0][ids[r, 0]])
        np.testing.assert_array_equal(out[r, 16:32], tables[1][ids[r, 1]])
        np.testing.assert_array_equal(out[r, 32:35], num[r])


def test_assemble_oov_maps_to_row_zero():
    table = np.arange(6.0).reshape(3, 2)
    out = assemble_input([[99], [-1]], np.zeros((2, 0)), [table])
    np.testing.assert_array_equal(out, [table[0], table[0]])


# inference gate -------------------------------------------------------------

def test_gate_basis_vector_selects_row():
    W_I = np.arange(12.0).reshape(3, 4)
    raw, noisy = inference_gate_scores(np.array([0.0, 1.0, 0.0]), W_I)
    np.testing.assert_array_equal(raw[0], W_I[1])
    np.testing.assert_array_equal(noisy, raw)


def test_gate_noise_disabled():
    rng = np.random.default_rng(0)
    x, W, Wn = rng.normal(size=3), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    raw, noisy = inference_gate_scores(x, W, Wn, training=True, noise_enabled=False, rng=rng)
    np.testing.assert_array_equal(raw, noisy)


def test_gate_noise_deterministic_under_seed():
    x = np.ones(3)
    W, Wn = np.eye(3, 4), np.full((3, 4), 0.3)
    a = inference_gate_scores(x, W, Wn, training=True, rng=np.random.default_rng(5))[1]
    b = inference_gate_scores(x, W, Wn, training=True, rng=np.random.default_rng(5))[1]
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, x @ W)


# top-K and gate probabilities -----------------------------------------------

def test_top_k_example():
    masked, idx = top_k_select([3.0, 1.0, 2.0, 0.0], 2)
    assert set(idx.tolist()) == {0, 2}
    np.testing.assert_array_equal(masked, [3.0, -np.inf, 2.0, -np.inf])


def test_top_k_all():
    s = np.array([0.5, -1.0, 2.0])
    masked, idx = top_k_select(s, 3)
    np.testing.assert_array_equal(masked, s)
    assert sorted(idx.tolist()) == [0, 1, 2]


def test_top_k_ties_prefer_lower_index():
    _, idx = top_k_select([1.0, 1.0, 1.0], 2)
    assert idx.tolist() == [0, 1]


def test_top_k_rejects_bad_k():
    with pytest.raises(ConfigurationError):
        top_k_select([1.0, 2.0], 3)


def test_gate_probs_examples():
    np.testing.assert_array_equal(gate_probs([0.0, -np.inf, 0.0, -np.inf]), [0.5, 0, 0.5, 0])
    # e^3 / (e^3 + e^2) = 1 / (1 + e^-1)
    expected = 1.0 / (1.0 + math.exp(-1.0))
    p = gate_probs([3.0, -np.inf, 2.0, -np.inf])
    np.testing.assert_allclose(p, [expected, 0.0, 1.0 - expected, 0.0], rtol=1e-15)
    np.testing.assert_allclose(p[[0, 2]], [0.7311, 0.2689], atol=5e-5)
    masked, _ = top_k_select([0.3, 1.2, -0.4], 1)
    np.testing.assert_array_equal(gate_probs(masked), [0.0, 1.0, 0.0])


@settings(max_examples=200)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.data())
def test_gate_prob_sparsity(scores, data):
    k = data.draw(st.integers(1, len(scores)))
    masked, idx = top_k_select(scores, k)
    p = gate_probs(masked)
    assert np.count_nonzero(p > 0) == k
    assert abs(p.sum() - 1.0) < 1e-9
    assert set(np.flatnonzero(p > 0)) == set(idx.tolist())


@given(st.lists(st.integers(-80, 80), min_size=2, max_size=10, unique=True),
       st.floats(-100, 100))
def test_gate_probs_shift_invariant(ints, c):
    # scores spaced 0.25 apart so a shift cannot create ties by rounding
    scores = [0.25 * i for i in ints]
    k = max(1, len(scores) // 2)
    p1 = gate_probs(top_k_select(scores, k)[0])
    p2 = gate_probs(top_k_select(np.array(scores) + c, k)[0])
    np.testing.assert_allclose(p1, p2, atol=1e-9)


@given(st.lists(st.integers(-20, 20), min_size=2, max_size=10, unique=True))
def test_topk_invariant_under_monotone_transform(ints):
    scores = [0.25 * i for i in ints]
    k = max(1, len(scores) // 2)
    _, a = top_k_select(scores, k)
    _, b = top_k_select(np.exp(np.array(scores)) * 3.0 + 1.0, k)
    assert set(a.tolist()) == set(b.tolist())


# mixture prediction -----------------------------------------------------------

def _experts(n, rng, widths=(3, 4, 1)):
    return [MLP.init(rng, widths, f"e{i}") for i in range(n)]


def test_predict_one_hot_equals_expert_logit():
    rng = np.random.default_rng(0)
    experts = _experts(3, rng)
    X = rng.normal(size=3)
    yhat, logits = predict_mixture(X, np.array([0.0, 1.0, 0.0]), experts)
    e1 = experts[1].forward(X[None])[0][0, 0]
    assert logits == {1: e1}
    assert yhat == 1.0 / (1.0 + math.exp(-e1))


def test_predict_two_experts_average():
    rng = np.random.default_rng(1)
    experts = _experts(2, rng)
    X = rng.normal(size=3)
    _, logits = predict_mixture(X, np.array([0.5, 0.5]), experts)
    a, b = logits[0], logits[1]
    yhat, _ = predict_mixture(X, np.array([0.5, 0.5]), experts)
    assert math.isclose(yhat, 1 / (1 + math.exp(-(a + b) / 2)), rel_tol=1e-15)


def test_predict_runs_only_selected_experts():
    rng = np.random.default_rng(2)
    experts = _experts(5, rng)
    P = gate_probs(top_k_select(rng.normal(size=5), 2)[0])
    predict_mixture(rng.normal(size=3), P, experts)
    assert sum(e.forward_calls for e in experts) == 2
    assert all(e.forward_calls == 0 for e, p in zip(experts, P) if p == 0)


# hierarchical soft constraint ---------------------------------------------------

def test_hsc_zero_for_identical_gates():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 4))
    W = rng.normal(size=(4, 5))
    p = np.exp(x @ W) / np.exp(x @ W).sum()
    assert hsc_loss(p[0], p[0], np.array([0, 3])) == 0.0


def test_hsc_direct_formula():
    val = hsc_loss(np.array([0.6, 0.4]), np.array([0.5, 0.5]), np.array([0]))
    assert math.isclose(val, 0.01, rel_tol=1e-12)


def test_hsc_decreases_as_constraint_approaches():
    p_i = np.array([0.5, 0.3, 0.2])
    target = p_i.copy()
    start = np.array([0.1, 0.1, 0.8])
    vals = [hsc_loss(p_i, (1 - t) * start + t * target, np.array([0, 1]))
            for t in np.linspace(0, 1, 11)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 0.0


def test_hsc_zero_in_network_when_gates_equal():
    cfg = tiny_config(gate_input="sc")
    net = MoENet(cfg)
    net.W_C.value[...] = net.W_I.value
    rng = np.random.default_rng(0)
    sparse, numeric, y, sess = tiny_batch(rng, cfg=cfg)
    net.embeddings[1].value[sparse[:, 1]] = net.embeddings[0].value[sparse[:, 0]]
    res = net.forward(sparse, numeric, y, sess)
    assert res.loss.hsc == 0.0


# disagreeing experts ---------------------------------------------------------------

def test_sample_disagreeing_empty():
    out = sample_disagreeing(np.array([0, 1]), 5, 0, np.random.default_rng(0))
    assert out.size == 0


def test_sample_disagreeing_forced():
    out = sample_disagreeing(np.array([2, 0]), 3, 1, np.random.default_rng(0))
    assert out.tolist() == [1]


def test_sample_disagreeing_too_many():
    with pytest.raises(ConfigurationError):
        sample_disagreeing(np.array([0, 1]), 4, 3, np.random.default_rng(0))


def test_sample_disagreeing_uniform_pairs():
    # N=10, K=4, D=2: the 15 idle pairs should be equally likely
    rng = np.random.default_rng(123)
    topk = np.tile(np.array([1, 4, 6, 9]), (10_000, 1))
    draws = sample_disagreeing(topk, 10, 2, rng)
    idle = [0, 2, 3, 5, 7, 8]
    pairs = list(itertools.combinations(idle, 2))
    counts = {p: 0 for p in pairs}
    for a, b in draws:
        assert a not in topk[0] and b not in topk[0] and a != b
        counts[tuple(sorted((int(a), int(b))))] += 1
    assert len(counts) == 15 and all(c > 0 for c in counts.values())
    n, p = 10_000, 1 / 15
    sd = math.sqrt(n * p * (1 - p))
    for c in counts.values():
        assert abs(c - n * p) < 3 * sd + 1e-9 or abs(c - n * p) < 4 * sd
    chi2 = sum((c - n * p) ** 2 / (n * p) for c in counts.values())
    # 14 degrees of freedom, 0.999 quantile is about 36.1
    assert chi2 < 36.1


def test_sample_disagreeing_deterministic():
    topk = np.array([[0, 1], [2, 3]])
    a = sample_disagreeing(topk, 6, 2, np.random.default_rng(7))
    b = sample_disagreeing(topk, 6, 2, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


# adversarial loss ------------------------------------------------------------------

def test_adv_zero_for_equal_logits():
    assert adv_loss(np.array([0.7, 0.7]), np.array([0.7])) == 0.0


def test_adv_single_pair():
    assert adv_loss(np.array([0.0]), np.array([0.0])) == 0.0
    s20 = 1.0 / (1.0 + math.exp(-20.0))
    val = adv_loss(np.array([0.0]), np.array([20.0]))
    assert math.isclose(val, (0.5 - s20) ** 2, rel_tol=1e-14)
    assert abs(val - 0.25) < 1e-8


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_adv_bounded(k, d, seed):
    rng = np.random.default_rng(seed)
    val = adv_loss(rng.normal(0, 30, size=k), rng.normal(0, 30, size=d))
    assert 0.0 <= val <= k * d


# combined loss ---------------------------------------------------------------------

def test_cross_entropy_half():
    assert math.isclose(cross_entropy(np.array([0.5]), np.array([1.0]))[0], math.log(2))


def test_cross_entropy_clamps():
    ce = cross_entropy(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert np.all(np.isfinite(ce))
    np.testing.assert_allclose(ce, -math.log(1e-7), rtol=1e-9)


def test_total_equals_ce_without_regularizers():
    cfg = tiny_config(lambda_hsc=0.0, lambda_adv=0.0)
    net = MoENet(cfg)
    rng = np.random.default_rng(0)
    sparse, numeric, y, sess = tiny_batch(rng, cfg=cfg)
    lb = net.forward(sparse, numeric, y, sess, training=True, rng=rng).loss
    assert lb.total == lb.ce


def test_total_combines_terms():
    cfg = tiny_config(lambda_hsc=0.3, lambda_adv=0.2)
    net = MoENet(cfg)
    rng = np.random.default_rng(0)
    sparse, numeric, y, sess = tiny_batch(rng, cfg=cfg)
    lb = net.forward(sparse, numeric, y, sess, training=True, rng=rng).loss
    assert lb.hsc > 0 and lb.adv > 0
    assert lb.total == lb.ce + 0.3 * lb.hsc - 0.2 * lb.adv


def test_batch_total_is_mean_of_example_totals():
    cfg = tiny_config()
    net = MoENet(cfg)
    rng = np.random.default_rng(4)
    sparse, numeric, y, sess = tiny_batch(rng, n_sessions=2, per_session=1, cfg=cfg)
    res = net.forward(sparse, numeric, y, sess, training=True, rng=rng)
    eps, dis = res.cache["eps"], res.gate.disagree_indices
    singles = []
    for i in range(2):
        r = net.forward(sparse[i:i + 1], numeric[i:i + 1], y[i:i + 1], sess[i:i + 1],
                        training=True, noise=eps[i:i + 1], disagree=dis[i:i + 1])
        singles.append(r.loss.total)
    assert math.isclose(res.loss.total, np.mean(singles), rel_tol=1e-12)


@pytest.mark.parametrize("variant,hsc,adv", [
    ("DNN", False, False), ("MoE", False, False), ("AdvMoE", False, True),
    ("HSCMoE", True, False), ("AdvHSCMoE", True, True),
])
def test_variant_terms(variant, hsc, adv):
    cfg = tiny_config().for_variant(variant)
    net = MoENet(cfg)
    rng = np.random.default_rng(0)
    sparse, numeric, y, sess = tiny_batch(rng, cfg=cfg)
    lb = net.forward(sparse, numeric, y, sess, training=True, rng=rng).loss
    assert (lb.hsc > 0) == hsc
    assert (lb.adv > 0) == adv


# gradients -------------------------------------------------------------------------

def _frozen_check(cfg, seed=0, per_session=2, n_sessions=2, floor=1e-8):
    net = MoENet(cfg)
    rng = np.random.default_rng(seed)
    sparse, numeric, y, sess = tiny_batch(rng, n_sessions=n_sessions, per_session=per_session,
                                          cfg=cfg)
    res = net.forward(sparse, numeric, y, sess, training=True, rng=rng)
    eps, dis = res.cache["eps"], res.gate.disagree_indices
    net.zero_grad()
    net.backward(res)
    f = lambda: net.forward(sparse, numeric, y, sess, training=True, noise=eps,
                            disagree=dis).loss.total
    return grad_check(f, net.parameters(), h=1e-5, tol=1e-4, floor=floor)


@pytest.mark.parametrize("combine", ["logit", "prob"])
@pytest.mark.parametrize("gate_input", ["sc", "tc_sc", "all"])
def test_full_objective_gradient(combine, gate_input):
    # entries below 1e-6 in magnitude are dominated by difference roundoff (~1e-11)
    report = _frozen_check(tiny_config(combine=combine, gate_input=gate_input), floor=1e-6)
    assert report.ok, report.violations


@pytest.mark.parametrize("variant", ["DNN", "MoE", "AdvMoE", "HSCMoE"])
def test_variant_gradients(variant):
    report = _frozen_check(tiny_config().for_variant(variant))
    assert report.ok, report.violations


def test_stop_topk_mode_drops_selected_side():
    cfg = tiny_config(adv_grad="stop_topk", lambda_hsc=0.0)
    net_full = MoENet(tiny_config(lambda_hsc=0.0))
    net_stop = MoENet(cfg)
    rng = np.random.default_rng(0)
    sparse, numeric, y, sess = tiny_batch(rng, cfg=cfg)
    r1 = net_full.forward(sparse, numeric, y, sess, training=True, rng=np.random.default_rng(1))
    r2 = net_stop.forward(sparse, numeric, y, sess, training=True, rng=np.random.default_rng(1))
    net_full.zero_grad()
    net_stop.zero_grad()
    net_full.backward(r1)
    net_stop.backward(r2)
    assert r1.loss.total == r2.loss.total
    dis = set(r1.gate.disagree_indices.ravel().tolist())
    top_only = set(r1.gate.topk_indices.ravel().tolist()) - dis
    for i in dis - set(r1.gate.topk_indices.ravel().tolist()):
        for a, b in zip(net_full.experts[i].parameters(), net_stop.experts[i].parameters()):
            np.testing.assert_array_equal(a.grad, b.grad)
    changed = any(not np.array_equal(a.grad, b.grad)
                  for i in top_only
                  for a, b in zip(net_full.experts[i].parameters(), net_stop.experts[i].parameters()))
    assert changed


def test_frozen_mask_gradient():
    # perturbations that keep the selected set fixed see a smooth objective
    cfg = tiny_config(noise=False)
    net = MoENet(cfg)
    rng = np.random.default_rng(9)
    sparse, numeric, y, sess = tiny_batch(rng, cfg=cfg)
    res = net.forward(sparse, numeric, y, sess, training=True, rng=rng)
    margin = np.sort(res.gate.raw_scores, axis=1)
    K = cfg.top_k
    assert np.all(margin[:, -K] - margin[:, -K - 1] > 1e-3)
    net.zero_grad()
    net.backward(res)
    dis = res.gate.disagree_indices

    def f():
        r = net.forward(sparse, numeric, y, sess, training=True, disagree=dis)
        np.testing.assert_array_equal(np.sort(r.gate.topk_indices, 1),
                                      np.sort(res.gate.topk_indices, 1))
        return r.loss.total

    report = grad_check(f, [net.W_I, net.embeddings[0]], h=1e-5, tol=1e-4)
    assert report.ok, report.violations


def test_hsc_never_reaches_experts():
    rng = np.random.default_rng(3)
    grads = []
    for lam in (0.0, 0.1):
        cfg = tiny_config(lambda_hsc=lam)
        net = MoENet(cfg)
        sparse, numeric, y, sess = tiny_batch(np.random.default_rng(3), cfg=cfg)
        res = net.forward(sparse, numeric, y, sess, training=True, rng=np.random.default_rng(5))
        net.zero_grad()
        net.backward(res)
        grads.append((net, {p.name: p.grad.copy() for p in net.parameters()}))
    (_, g0), (_, g1) = grads
    for name in g0:
        if name.startswith("expert"):
            assert np.array_equal(g0[name], g1[name]), name
    assert np.all(g0["gate.W_C"] == 0.0)
    assert np.any(g1["gate.W_C"] != 0.0)
    del rng


# structural invariants ---------------------------------------------------------------

def test_expert_evaluations_per_example():
    cfg = tiny_config(n_experts=6, top_k=3, n_disagree=2)
    net = MoENet(cfg)
    rng = np.random.default_rng(0)
    sparse, numeric, y, sess = tiny_batch(rng, n_sessions=5, per_session=3, cfg=cfg)
    res = net.forward(sparse, numeric, y, sess, training=True, rng=rng)
    assert np.all(res.expert_evals == 5)
    assert sum(e.rows_seen for e in net.experts) == 5 * len(y)
    res = net.forward(sparse, numeric, y, sess)
    assert np.all(res.expert_evals == 3)


def test_session_shares_gate():
    cfg = tiny_config()
    net = MoENet(cfg)
    rng = np.random.default_rng(0)
    sparse, numeric, y, sess = tiny_batch(rng, n_sessions=3, per_session=4, cfg=cfg)
    res = net.forward(sparse, numeric, y, sess, training=True, rng=rng)
    assert res.gate.gate_probs.shape[0] == 3
    assert res.cache["eps"].shape == (3, cfg.n_experts)


def test_determinism_bitwise():
    outs = []
    for _ in range(2):
        cfg = tiny_config()
        net = MoENet(cfg)
        rng = np.random.default_rng(11)
        sparse, numeric, y, sess = tiny_batch(np.random.default_rng(2), cfg=cfg)
        res = net.forward(sparse, numeric, y, sess, training=True, rng=rng)
        outs.append((res.loss, res.yhat))
    assert outs[0][0] == outs[1][0]
    assert np.array_equal(outs[0][1], outs[1][1])


def test_dnn_variant_equals_standalone_mlp():
    cfg = tiny_config().for_variant("DNN")
    net = MoENet(cfg)
    assert cfg.n_experts == 1 and cfg.top_k == 1 and cfg.active_disagree == 0
    mlp = MLP.init(np.random.default_rng(0), (cfg.input_width,) + cfg.expert_widths)
    for src, dst in zip(net.experts[0].parameters(), mlp.parameters()):
        dst.value[...] = src.value
    rng = np.random.default_rng(1)
    sparse, numeric, y, sess = tiny_batch(rng, cfg=cfg)
    X = assemble_input(sparse, numeric, net.tables)
    z = mlp.forward(X)[0][:, 0]
    res = net.forward(sparse, numeric, session=sess)
    assert np.array_equal(res.logits, z)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(n_experts=4, top_k=5)
    with pytest.raises(ConfigurationError):
        ModelConfig(n_experts=10, top_k=4, n_disagree=7)
    with pytest.raises(ConfigurationError):
        ModelConfig(expert_widths=(8, 4))
    with pytest.raises(ConfigurationError):
        ModelConfig(variant="MMoE")


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config(variant="HSCMoE", lambda_hsc=0.123456789)
    net = MoENet(cfg)
    for p in net.parameters():
        p.value += np.random.default_rng(0).normal(size=p.shape) * 1e-3
    path = tmp_path / "model.npz"
    net.save(path)
    back = MoENet.load(path)
    assert back.config == cfg
    for name, v in net.state_dict().items():
        assert np.array_equal(back.state_dict()[name], v), name


def test_checkpoint_rejects_unknown_version(tmp_path):
    import json

    net = MoENet(tiny_config())
    path = tmp_path / "m.npz"
    net.save(path)
    with np.load(path) as z:
        arrays = dict(z)
    meta = json.loads(str(arrays["__meta__"]))
    meta["version"] = 99
    arrays["__meta__"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="version"):
        MoENet.load(path)
