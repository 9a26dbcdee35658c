"""End-to-end acceptance suite: one test per criterion, each printing a PASS/FAIL line in the summary.

Run alone with ``pytest tests/test_acceptance.py -v``; the default stack is
trained once per session (see conftest.py).
"""

import json
import time
import timeit
import zlib

import numpy as np
import pytest

from verinfer.attacks import Adapter
from verinfer.cli import main as cli_main
from verinfer.config import ExperimentConfig, substream
from verinfer.decision import em_infer, error_rates
from verinfer.experiments import (
    adapter_suite,
    inverse_suite,
    substitute_baseline,
)
from verinfer.labeling import LabelingNetwork, estimate_delta, labeler_loss_and_grads
from verinfer.models import ModelSpec, StandInModel, instantiate
from verinfer.numerics import MLP, ParameterSet, TransformerEncoder
from verinfer.pipeline import _per_secret_distances, build_corpus, train_labeler, train_proxy
from verinfer.proxy import _secret_step, bce_with_logits, compress_with_cache, create_bundle

from .helpers import fd_check

pytestmark = pytest.mark.slow


# ---------------------------------------------------------------------------
# 1. Hypothesis-testing exactness
# ---------------------------------------------------------------------------


def test_c01_error_rate_reference(criterion):
    r = error_rates(0.0081, 0.9687, 30, 0.5)
    per_call = min(timeit.repeat(lambda: error_rates(0.0081, 0.9687, 30, 0.5), number=100, repeat=5)) / 100
    ok = 1.7e-49 / 2 <= r.alpha <= 1.7e-49 * 2 and r.beta < 1e-100 and per_call < 1e-3
    criterion(1, "hypothesis-testing exactness", ok,
              f"alpha={r.alpha:.3e}, beta={r.beta:.3e}, {per_call * 1e6:.1f} us/call")
    assert ok


# ---------------------------------------------------------------------------
# 2. Gradient oracle for every trainable architecture
# ---------------------------------------------------------------------------


def _sq(y, target):
    r = y - target
    return float((r * r).sum()), 2 * r


def _grad_mlp(rng):
    net = MLP.create([6, 9, 8, 4], rng)
    x, t = rng.normal(size=(5, 6)), rng.normal(size=(5, 4))
    y, c = net.forward(x)
    _, g = net.backward(c, _sq(y, t)[1])
    fd_check(lambda: _sq(net(x), t)[0], [net.params], [g], rng, n_coords=100)


def _grad_transformer(rng):
    enc = TransformerEncoder.create(8, 2, 2, 12, 6, rng)
    for k, v in enc.params.tensors.items():
        enc.params[k] = v + rng.normal(0, 0.05, size=v.shape)
    x, t = rng.normal(size=(2, 5, 8)), rng.normal(size=(2, 5, 8))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    y, c = enc.forward(x, mask)
    _, g = enc.backward(c, _sq(y, t)[1])
    fd_check(lambda: _sq(enc(x, mask), t)[0], [enc.params], [g], rng, n_coords=150)


def _grad_secret_proxy(rng):
    b = create_bundle("secret", 8, 5, rng, d_g=6, d_s=4, n_heads=2, head_hidden=7, token_hidden=6)
    h, bits, t = rng.normal(size=(3, 4, 8)), rng.integers(0, 2, (3, 4)).astype(float), rng.normal(size=(3, 5))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 0, 0, 0]], dtype=bool)
    _, grads = _secret_step(b, h, mask, bits, t)
    sets = b.extractor.param_sets + [b.head.params, b.token_embedder.params]
    fd_check(lambda: _secret_step(b, h, mask, bits, t)[0], sets, grads, rng, n_coords=150)


def _grad_simple_proxy(rng):
    b = create_bundle("simple", 8, 5, rng, d_g=6, n_heads=2, head_hidden=7)
    h, y = rng.normal(size=(3, 4, 8)), rng.integers(0, 2, (3, 5)).astype(float)
    mask = np.ones((3, 4), dtype=bool)

    def loss():
        z, _, _ = compress_with_cache(b.extractor, None, h, mask)
        return bce_with_logits(b.head(z), y)[0]

    z, zc, _ = compress_with_cache(b.extractor, None, h, mask)
    logits, hc = b.head.forward(z)
    dz, g_head = b.head.backward(hc, bce_with_logits(logits, y)[1])
    _, g_enc, g_proj = b.extractor.backward(zc, dz)
    fd_check(loss, b.extractor.param_sets + [b.head.params], [g_enc, g_proj, g_head], rng, n_coords=120)


def _grad_labeler(rng):
    net = LabelingNetwork.create(4, 3, rng, d_text=5, d_secret=6, hidden=7)
    u = rng.normal(size=(6, 5))
    s1 = rng.integers(0, 2, (6, 4)).astype(float)
    s2 = 1 - s1
    perm = np.roll(np.arange(6), 1)
    _, _, g_sec, g_comb = labeler_loss_and_grads(net, u, s1, s2, perm, 0.5)
    fd_check(lambda: labeler_loss_and_grads(net, u, s1, s2, perm, 0.5)[0],
             [net.secret_embedder.params, net.combiner.params], [g_sec, g_comb], rng, n_coords=120)


def _grad_adapter(rng):
    b = create_bundle("secret", 8, 5, rng, d_g=6, d_s=4, n_heads=2, head_hidden=7, token_hidden=6)
    ad = Adapter.create(5, 8, rng, hidden=7, dropout=0.0)
    tok = b.token_embedder(np.ones((1, 4)))[0]
    h_alt, target = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 6))
    mask = np.ones((3, 4), dtype=bool)

    def loss():
        z, _, _ = compress_with_cache(b.extractor, tok, ad(h_alt), mask)
        return float(np.linalg.norm(z - target, axis=1).mean())

    a_out, ac = ad.mlp.forward(h_alt)
    z, zc, _ = compress_with_cache(b.extractor, tok, a_out, mask)
    r = z - target
    dz = r / np.linalg.norm(r, axis=1, keepdims=True) / len(r)
    dseq, _, _ = b.extractor.backward(zc, dz)
    _, g = ad.mlp.backward(ac, dseq[:, 1:, :])
    fd_check(loss, [ad.mlp.params], [g], rng, n_coords=100)


def _grad_finetune(rng):
    alt = StandInModel(ModelSpec("ft", 8, 1, seed=4, n_heads=2, max_len=8))
    b = create_bundle("simple", 8, 5, rng, d_g=6, n_heads=2, head_hidden=7)
    ids = rng.integers(0, 258, (3, 4))
    mask = np.ones((3, 4), dtype=bool)
    y = rng.integers(0, 2, (3, 5)).astype(float)
    emb = ParameterSet({"kind": "embedding"}, {"E": alt.embedding})

    def loss():
        h = alt.encoder(alt.embedding[ids], mask)
        z, _, _ = compress_with_cache(b.extractor, None, h, mask)
        return bce_with_logits(b.head(z), y)[0]

    h, hc = alt.encoder.forward(alt.embedding[ids], mask)
    z, zc, _ = compress_with_cache(b.extractor, None, h, mask)
    logits, pc = b.head.forward(z)
    dz, _ = b.head.backward(pc, bce_with_logits(logits, y)[1])
    dseq, _, _ = b.extractor.backward(zc, dz)
    dx, g_enc = alt.encoder.backward(hc, dseq)
    g_emb = np.zeros_like(alt.embedding)
    np.add.at(g_emb, ids, dx)
    fd_check(loss, [alt.encoder.params, emb], [g_enc, {"E": g_emb}], rng, n_coords=150)


def _grad_inverse(rng):
    net = MLP.create([6, 8, 8, 4], rng)
    x, y = rng.normal(size=(5, 6)), rng.integers(0, 2, (5, 4)).astype(float)
    logits, c = net.forward(x)
    _, g = net.backward(c, bce_with_logits(logits, y)[1])
    fd_check(lambda: bce_with_logits(net(x), y)[0], [net.params], [g], rng, n_coords=100)


GRADIENT_CHECKS = {
    "mlp": _grad_mlp,
    "transformer": _grad_transformer,
    "secret-proxy": _grad_secret_proxy,
    "simple-proxy": _grad_simple_proxy,
    "labeler": _grad_labeler,
    "adapter": _grad_adapter,
    "finetune": _grad_finetune,
    "inverse": _grad_inverse,
}


def test_c02_gradient_oracle(criterion):
    t0 = time.perf_counter()
    failed = []
    for name, check in GRADIENT_CHECKS.items():
        try:
            check(np.random.default_rng(zlib.crc32(name.encode())))
        except AssertionError as e:
            failed.append(f"{name}: {e}")
    secs = time.perf_counter() - t0
    ok = not failed and secs < 60
    criterion(2, "gradient oracle", ok, f"{len(GRADIENT_CHECKS)} architectures, {secs:.1f} s"
              + (f"; failed {failed}" if failed else ""))
    assert ok


# ---------------------------------------------------------------------------
# 3-5. Accuracy, calibration, secret distinguishability
# ---------------------------------------------------------------------------


def test_c03_accuracy(default_stack, evaluations, criterion):
    parts, ok = [], True
    for name, (rep, _) in evaluations.results.items():
        alts = [m.name for m in default_stack.stack.config.alternatives]
        good = rep.fnr <= 0.08 and all(rep.fpr[a] <= 0.10 and rep.auc[a] >= 0.95 for a in alts)
        ok &= good
        parts.append(f"{name}: FNR={rep.fnr:.3f} max FPR={max(rep.fpr[a] for a in alts):.3f} "
                     f"min AUC={min(rep.auc[a] for a in alts):.4f} random FPR={rep.fpr['random']:.3f}")
    secs = default_stack.train_seconds + evaluations.seconds
    ok &= secs < 1800
    criterion(3, "desk-scale accuracy", ok, "; ".join(parts) + f"; {secs / 60:.1f} min")
    assert ok


def test_c04_calibration(default_stack, evaluations, criterion):
    parts, ok = [], True
    for name, (rep, _) in evaluations.results.items():
        th = default_stack.stack.thresholds[name]
        cal = np.asarray(th.distances)
        cal_fnr = float(np.mean(cal > th.eta))
        gap = abs(cal_fnr - rep.fnr)
        ok &= cal_fnr <= 0.05 and gap <= 0.05
        parts.append(f"{name}: calibration FNR={cal_fnr:.4f} test FNR={rep.fnr:.4f}")
    criterion(4, "calibration guarantee", ok, "; ".join(parts))
    assert ok


def test_c05_delta(default_stack, criterion):
    stack = default_stack.stack
    ids, mask = stack.part("test")
    t0 = time.perf_counter()
    deltas = {name: estimate_delta(stack.labeler, ids, mask, th.eta, substream(stack.config.seed, "delta"))
              for name, th in stack.thresholds.items()}
    secs = time.perf_counter() - t0
    ok = min(deltas.values()) >= 0.95 and secs < 120
    criterion(5, "secret distinguishability", ok,
              ", ".join(f"{k}: delta={v:.4f}" for k, v in deltas.items()) + f"; {secs:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 6-8. Attacks
# ---------------------------------------------------------------------------


def test_c06_security_delta(direct_result, criterion):
    r, secs = direct_result.result, direct_result.seconds
    ok = r.simple_asr >= 0.95 and r.secret_asr <= 0.10 and secs < 600
    criterion(6, "security delta", ok,
              f"simple ASR={r.simple_asr:.4f}, guessed-secret ASR={r.secret_asr:.4f}, {secs:.0f} s")
    assert ok


def test_c07_adapter_shape(default_stack, criterion):
    stack = default_stack.stack
    spec = stack.config.specified[0]
    t0 = time.perf_counter()
    sweep = adapter_suite(stack, spec)
    baseline = substitute_baseline(stack, spec, stack.config.attacks.adapter_alt)
    secs = time.perf_counter() - t0
    budgets = sorted(sweep.same_secret)
    same = [float(np.median(sweep.same_secret[m])) for m in budgets]
    fresh = [float(np.median(sweep.fresh_secret[m])) for m in budgets]
    monotone = all(b >= a for a, b in zip(same, same[1:]))
    near_base = all(abs(f - baseline) <= 0.1 for f in fresh)
    ok = monotone and near_base and secs < 1200
    criterion(7, "adapter-attack shape", ok,
              "same-secret " + ", ".join(f"M={m}:{a:.3f}" for m, a in zip(budgets, same))
              + "; fresh " + ", ".join(f"{a:.3f}" for a in fresh) + f"; baseline {baseline:.3f}; {secs:.0f} s")
    assert ok


def test_c08_secret_recovery(criterion):
    # run at the reference secret width; see README for the narrower desk default
    cfg = ExperimentConfig(d_s=48)
    t0 = time.perf_counter()
    stack = build_corpus(cfg)
    train_labeler(stack)
    spec = cfg.specified[0]
    train_proxy(stack, spec, "secret")
    sweep = inverse_suite(stack, spec)
    secs = time.perf_counter() - t0
    budgets = sorted(sweep)
    med = {n: float(np.median(sweep[n])) for n in budgets}
    chance = 2.0 ** -cfg.d_s
    ok = med[100] <= 10 * chance and med[budgets[-1]] > med[100] and secs < 1200
    criterion(8, "secret-recovery shape", ok,
              f"d_s={cfg.d_s}; " + ", ".join(f"N={n}:{med[n]:.2e}" for n in budgets) + f"; {secs:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 9-12. Decisions, sessions, latency, determinism
# ---------------------------------------------------------------------------


def test_c09_em_recovery(criterion):
    t0 = time.perf_counter()
    p1, p0, pi = 0.95, 0.02, 0.7
    est, monotone = [], True
    for trial in range(20):
        rng = np.random.default_rng(trial)
        z = rng.random(1000) < pi
        v = np.where(z, rng.random(1000) < p1, rng.random(1000) < p0).astype(int)
        st = em_infer(v, init=(p1, p0, 0.5), fix_rates=True)
        free = em_infer(v, init=(0.9, 0.1, 0.5))
        for ll in (st.log_likelihood, free.log_likelihood):
            monotone &= all(b >= a - 1e-9 for a, b in zip(ll, ll[1:]))
        est.append(st.pi)
    secs = time.perf_counter() - t0
    ok = abs(np.median(est) - pi) <= 0.05 and monotone and secs < 60
    criterion(9, "EM recovery", ok, f"median pi={np.median(est):.4f}, log-likelihood monotone={monotone}, {secs:.1f} s")
    assert ok


def test_c10_session_verdicts(sessions, criterion):
    out, secs = sessions
    rates = {k: np.mean([tr.verdict.honest for tr in v]) for k, v in out.items()}
    ok = secs < 600
    parts = []
    for (spec, strat), r in sorted(rates.items()):
        ok &= r >= 0.99 if strat == "honest" else r <= 0.01
        parts.append(f"{spec}/{strat}: honest {r:.3f}")
    criterion(10, "session verdicts", ok, "; ".join(parts) + f"; {secs:.0f} s")
    assert ok


def test_c11_latency(sessions, criterion):
    out, _ = sessions
    per_query = np.array([r.provider_latency + r.user_latency for (_, s), v in out.items() if s == "honest"
                          for tr in v for r in tr.records])
    med, p95 = float(np.median(per_query)), float(np.percentile(per_query, 95))
    ok = med < 0.01
    criterion(11, "latency bound", ok, f"median {med * 1e3:.2f} ms, p95 {p95 * 1e3:.2f} ms per query")
    assert ok


def test_c12_simulate_determinism(default_stack, tmp_path, criterion):
    cfg_path = tmp_path / "sim.json"
    cfg_path.write_text(json.dumps({"session": {"n_sessions": 5}}), encoding="utf-8")
    outputs = []
    for k in range(2):
        dest = tmp_path / f"run{k}"
        code = cli_main(["simulate", "--config", str(cfg_path), "--stack", str(default_stack.dir), "--out", str(dest)])
        assert code == 0
        outputs.append({p.name: p.read_bytes() for p in sorted((dest / "simulate").iterdir())})
    ok = outputs[0] == outputs[1] and len(outputs[0]) == 3
    criterion(12, "simulate determinism", ok, f"{len(outputs[0])} report files compared byte for byte")
    assert ok


def test_calibration_distances_come_from_validation(default_stack):
    # sanity: the stored calibration set is what the validation split produces
    stack = default_stack.stack
    spec = stack.config.specified[0]
    ids, mask = stack.part("validation")
    h = instantiate(spec).hidden_states_batch(ids, mask)
    d = _per_secret_distances(stack.bundles[spec.name], stack.labeler, h, mask, ids, stack.config.eval_secrets,
                              substream(stack.config.seed, f"secrets:calibrate:{spec.name}"))
    assert np.allclose(d, stack.thresholds[spec.name].distances)
