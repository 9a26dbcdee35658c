import numpy as np
import pytest

from verinfer.attacks import (
    AdapterResult,
    ASRCurve,
    AttackConfig,
    ThreatModelViolation,
    check_access,
    direct_vector_attack,
    eval_asr,
    exact_match_rate,
    finetune_attack,
    train_adapter_label,
    train_adapter_mimic,
    train_inverse_model,
)
from verinfer.corpus import sample_secret_bits
from verinfer.labeling import LabelingNetwork
from verinfer.models import ModelSpec, StandInModel
from verinfer.numerics import MLP, ShapeError
from verinfer.proxy import compress, create_bundle
from verinfer.verify import distances_for


def test_linear_head_matches_least_squares():
    rng = np.random.default_rng(0)
    head = MLP.create([6, 6], rng)
    A, b = head.params["W0"], head.params["b0"]
    z_true = rng.normal(size=(4, 6))
    y = z_true @ A + b
    z, trace = direct_vector_attack(head, y, steps=3000, lr=0.05, rng=rng)
    oracle = np.linalg.lstsq(A.T, (y - b).T, rcond=None)[0].T
    assert trace[-1] < 1e-6
    assert np.allclose(z, oracle, atol=1e-3)


def test_direct_attack_rejects_bad_loss_and_width():
    head = MLP.create([3, 2], np.random.default_rng(0))
    with pytest.raises(ValueError):
        direct_vector_attack(head, np.zeros((1, 2)), loss="hinge", steps=1)
    with pytest.raises(ShapeError):
        direct_vector_attack(head, np.zeros((1, 5)), steps=1)


def test_leakage_model():
    check_access("direct", "simple", {"head", "labels"})
    check_access("adapter-mimic", "secret", {"extractor", "task-token", "targets", "alt-model"})
    with pytest.raises(ThreatModelViolation):
        check_access("direct", "secret", {"head"})
    with pytest.raises(ThreatModelViolation):
        check_access("adapter-mimic", "secret", {"extractor", "task-token", "labeler"})
    with pytest.raises(ThreatModelViolation):
        check_access("inverse", "secret", {"pairs", "secret-embedder"})
    # the guessed-secret experiment is an explicit white-box relaxation, and still excludes the real secret
    check_access("direct", "secret", {"head", "labeler", "guessed-secret"}, white_box=True)
    with pytest.raises(ThreatModelViolation):
        check_access("direct", "secret", {"head", "labeler", "secret"}, white_box=True)


def test_attack_config_rejects_negative_budget():
    with pytest.raises(ValueError):
        AttackConfig("adapter-mimic", budget=-1)


@pytest.fixture(scope="module")
def tiny():
    rng = np.random.default_rng(0)
    secret = create_bundle("secret", 16, 4, rng, d_g=6, d_s=5, n_heads=2, head_hidden=8, token_hidden=8)
    simple = create_bundle("simple", 16, 4, rng, d_g=6, n_heads=2, head_hidden=8)
    ids = rng.integers(0, 256, (20, 6))
    mask = np.ones((20, 6), dtype=bool)
    return secret, simple, ids, mask


def test_adapter_label_refused_in_secret_mode(tiny):
    secret, _, ids, mask = tiny
    with pytest.raises(ThreatModelViolation):
        train_adapter_label(secret, np.zeros((20, 6, 8)), mask, np.zeros((20, 4)), AttackConfig("adapter-label"),
                            np.random.default_rng(0))


def test_finetune_refused_in_secret_mode(tiny):
    secret, _, ids, mask = tiny
    alt = StandInModel(ModelSpec("alt", 16, 1, 5, role="alternative", n_heads=2))
    with pytest.raises(ThreatModelViolation):
        finetune_attack(alt, secret, ids, mask, np.zeros((20, 4)), AttackConfig("finetune"), np.random.default_rng(0))


def test_finetune_width_mismatch(tiny):
    _, simple, ids, mask = tiny
    alt = StandInModel(ModelSpec("alt", 8, 1, 5, role="alternative", n_heads=2))
    with pytest.raises(ShapeError):
        finetune_attack(alt, simple, ids, mask, np.zeros((20, 4)), AttackConfig("finetune"), np.random.default_rng(0))


def test_finetune_does_not_touch_original(tiny):
    _, simple, ids, mask = tiny
    alt = StandInModel(ModelSpec("alt", 16, 1, 5, role="alternative", n_heads=2))
    before = alt.encoder.params.copy()
    tuned, hist = finetune_attack(alt, simple, ids, mask, np.ones((20, 4)), AttackConfig("finetune", epochs=2,
                                  batch_size=8), np.random.default_rng(0))
    assert alt.encoder.params.allclose(before) and len(hist) == 2
    assert not tuned.encoder.params.allclose(before)


def test_adapter_zero_epochs_is_initialisation(tiny):
    secret, _, _, mask = tiny
    rng = np.random.default_rng(1)
    h_alt = rng.normal(size=(20, 6, 8))
    tok = secret.token_embedder(np.ones((1, 5)))[0]
    targets = compress(secret.extractor, tok, rng.normal(size=(20, 6, 16)), mask)
    res = train_adapter_mimic(secret.extractor, tok, h_alt, mask, targets, AttackConfig("adapter-mimic", epochs=0), rng)
    assert isinstance(res, AdapterResult) and res.history == [] and res.spec_queries == 20
    assert res.adapter.d_in == 8 and res.adapter.d_out == 16


def test_adapter_mimic_lowers_loss(tiny):
    secret, _, _, mask = tiny
    rng = np.random.default_rng(2)
    h_alt = rng.normal(size=(20, 6, 8))
    tok = secret.token_embedder(np.ones((1, 5)))[0]
    targets = compress(secret.extractor, tok, rng.normal(size=(20, 6, 16)), mask)
    cfg = AttackConfig("adapter-mimic", epochs=30, batch_size=10, lr=1e-2, hidden=16, dropout=0.0)
    res = train_adapter_mimic(secret.extractor, tok, h_alt, mask, targets, cfg, rng)
    assert res.history[-1] < res.history[0]


def test_adapter_needs_prompts(tiny):
    secret, _, _, _ = tiny
    with pytest.raises(ValueError):
        train_adapter_mimic(secret.extractor, None, np.zeros((0, 6, 8)), np.zeros((0, 6), bool), np.zeros((0, 6)),
                            AttackConfig("adapter-mimic"), np.random.default_rng(0))


def test_inverse_single_pair_is_chance_level():
    rng = np.random.default_rng(0)
    emb = MLP.create([16, 32, 24], rng)
    bits = sample_secret_bits(1, 16, rng)
    inv = train_inverse_model(bits, emb(bits), rng, epochs=100)
    test = sample_secret_bits(100_000, 16, rng)
    assert exact_match_rate(inv.predict_bits(emb(test)), test) <= 10 * 2.0**-16


def test_inverse_recovers_transparent_embedding():
    # tokens that are an invertible linear map of the bits are easy to invert with enough pairs
    rng = np.random.default_rng(1)
    emb = MLP.create([8, 12], rng)
    bits = sample_secret_bits(4000, 8, rng)
    inv = train_inverse_model(bits, emb(bits), rng, epochs=30, lr=3e-3)
    test = sample_secret_bits(2000, 8, rng)
    assert exact_match_rate(inv.predict_bits(emb(test)), test) > 0.9


def test_inverse_rejects_empty():
    with pytest.raises(ValueError):
        train_inverse_model(np.zeros((0, 4)), np.zeros((0, 4)), np.random.default_rng(0))


def test_replaying_honest_vectors_gives_one_minus_fnr(tiny):
    secret, _, ids, mask = tiny
    rng = np.random.default_rng(3)
    lab = LabelingNetwork.create(5, 4, rng)
    h = rng.normal(size=(20, 6, 16))
    secrets = sample_secret_bits(3, 5, rng)
    honest = [distances_for(secret, lab, h, mask, ids, np.tile(s, (20, 1))) for s in secrets]
    eta = float(np.median(np.concatenate(honest)))
    point = eval_asr(lambda bits, tok: compress(secret.extractor, tok, h, mask), secret, lab, ids, mask, eta, secrets)
    assert point.asr == pytest.approx(np.mean([np.mean(d <= eta) for d in honest]), abs=1e-12)


def test_asr_curve_bounds_and_csv():
    c = ASRCurve("x")
    c.add(10, 0.25, 0.01)
    with pytest.raises(ValueError):
        c.add(20, 1.5)
    assert c.to_csv().splitlines() == ["budget,asr,stderr", "10,0.25,0.01"]
