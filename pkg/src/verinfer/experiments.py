"""Experiment suites shared by the CLI and the acceptance tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .attacks import (
    AdapterSweep,
    ASRCurve,
    AttackConfig,
    adapter_sweep,
    direct_vector_attack,
    finetune_attack,
    inverse_sweep,
    sow_success,
    train_adapter_label,
    train_adapter_mimic,
)
from .config import ConfigError, ExperimentConfig, substream, substream_seed
from .corpus import encode_batch, generate_synthetic_corpus, sample_distinct_pairs
from .harness import ProviderStrategy, SecretLedger, SessionContext, SessionTranscript, run_session
from .labeling import sow_labels_batch
from .models import ModelSpec, instantiate
from .pipeline import Stack
from .proxy import compress, predict

log = logging.getLogger(__name__)


def attack_prompts(cfg: ExperimentConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Prompts the attacker owns, drawn separately from the protocol's training data."""
    prompts = generate_synthetic_corpus(n, substream(cfg.seed, "attack-corpus"), n_topics=cfg.corpus.n_topics)
    return encode_batch(prompts, cfg.corpus.T)


@dataclass
class DirectAttackResult:
    simple_asr: float
    secret_asr: float
    secret_per_secret: list[float]
    n_prompts: int


def direct_attack_suite(stack: Stack, spec: ModelSpec) -> DirectAttackResult:
    """Direct vector optimisation against both protocols on the same prompts.

    Simple protocol: the attacker knows the head and computes set-of-words
    labels itself. Secret protocol: it is additionally handed the head and the
    labeler but must guess the secret; success is judged under the real one.
    """
    cfg, a = stack.config, stack.config.attacks
    ids, mask = stack.part("test")
    ids, mask = ids[: a.direct_prompts], mask[: a.direct_prompts]
    rng = substream(cfg.seed, f"attacks:direct:{spec.name}")

    simple = stack.simple_bundles[spec.name]
    labels = sow_labels_batch(ids, mask, stack.vocab)
    z, _ = direct_vector_attack(simple.head, labels, steps=a.direct_steps, lr=a.direct_lr, loss="bce", rng=rng)
    simple_asr = float(sow_success(simple, z, labels).mean())

    bundle, labeler = stack.bundles[spec.name], stack.labeler
    eta = stack.thresholds[spec.name].eta
    true_bits, guess_bits = sample_distinct_pairs(a.guessed_secrets, labeler.d_s, rng)
    rates = []
    for s_true, s_guess in zip(true_bits, guess_bits):
        target = labeler.label_batch(ids, mask, s_guess)
        z, _ = direct_vector_attack(bundle.head, target, steps=a.direct_steps, lr=a.direct_lr, loss="mse", rng=rng)
        d = np.linalg.norm(predict(bundle, z) - labeler.label_batch(ids, mask, s_true), axis=1)
        rates.append(float(np.mean(d <= eta)))
    return DirectAttackResult(simple_asr, float(np.mean(rates)), rates, len(ids))


@dataclass
class SimpleAttackResult:
    """Exact-match ASR on the test split for the label-access attacks of the simple protocol."""

    adapter_label_asr: float
    finetune_asr: float
    frozen_asr: float
    finetune_alt: str
    n_prompts: int


def simple_attack_suite(stack: Stack, spec: ModelSpec) -> SimpleAttackResult:
    """Adapter-label and fine-tuning attacks against the simple-mode bundle of ``spec``.

    Labels are a public function of the prompt here, so the attacker labels its
    own prompts; the fine-tuning target is the first alternative as wide as ``spec``.
    """
    cfg, a = stack.config, stack.config.attacks
    bundle = stack.simple_bundles[spec.name]
    a_ids, a_mask = attack_prompts(cfg, a.simple_prompts)
    a_lab = sow_labels_batch(a_ids, a_mask, stack.vocab)
    t_ids, t_mask = stack.part("test")
    t_lab = sow_labels_batch(t_ids, t_mask, stack.vocab)

    def asr(h):
        return float(sow_success(bundle, compress(bundle.extractor, None, h, t_mask), t_lab).mean())

    alt = instantiate(cfg.spec(a.adapter_alt))
    res = train_adapter_label(bundle, alt.hidden_states_batch(a_ids, a_mask), a_mask, a_lab,
                              AttackConfig("adapter-label", budget=len(a_ids), epochs=a.label_adapter_epochs,
                                           batch_size=a.label_adapter_batch_size),
                              substream(cfg.seed, f"attacks:adapter-label:{spec.name}"))
    label_asr = asr(res.adapter(alt.hidden_states_batch(t_ids, t_mask)))

    matched = [m for m in cfg.alternatives if m.d_model == spec.d_model]
    if not matched:
        raise ConfigError(f"fine-tuning needs an alternative as wide as {spec.name} ({spec.d_model})")
    ft_model = instantiate(matched[0])
    tuned, _ = finetune_attack(ft_model, bundle, a_ids, a_mask, a_lab,
                               AttackConfig("finetune", epochs=a.finetune_epochs, batch_size=a.finetune_batch_size),
                               substream(cfg.seed, f"attacks:finetune:{spec.name}"))
    return SimpleAttackResult(label_asr, asr(tuned.hidden_states_batch(t_ids, t_mask)),
                              asr(ft_model.hidden_states_batch(t_ids, t_mask)), matched[0].name, len(a_ids))


def _attack_cfg(cfg: ExperimentConfig) -> AttackConfig:
    a = cfg.attacks
    return AttackConfig("adapter-mimic", epochs=a.adapter_epochs, batch_size=a.adapter_batch_size, lr=a.adapter_lr)


def adapter_suite(stack: Stack, spec: ModelSpec, budgets=None, seeds=None,
                  n_secrets: int | None = None) -> AdapterSweep:
    cfg, a = stack.config, stack.config.attacks
    budgets = list(budgets or a.adapter_budgets)
    ids_att, mask_att = attack_prompts(cfg, max(budgets))
    ids, mask = stack.part("test")
    ids, mask = ids[: a.adapter_test_prompts], mask[: a.adapter_test_prompts]
    alt = instantiate(cfg.spec(a.adapter_alt))
    seeds = [substream_seed(cfg.seed, f"attacks:adapter:{s}") for s in (seeds or a.adapter_seeds)]
    return adapter_sweep(stack.bundles[spec.name], stack.labeler, instantiate(spec), alt, ids_att, mask_att,
                         ids, mask, stack.thresholds[spec.name].eta, budgets, seeds,
                         n_secrets or a.adapter_secrets, _attack_cfg(cfg))


def substitute_baseline(stack: Stack, spec: ModelSpec, alt_name: str, n_secrets: int | None = None) -> float:
    """Acceptance rate of the alternative model with projection only (no adapter)."""
    from .pipeline import scenario_hidden
    from .verify import distances_for

    cfg, a = stack.config, stack.config.attacks
    ids, mask = stack.part("test")
    ids, mask = ids[: a.adapter_test_prompts], mask[: a.adapter_test_prompts]
    h = scenario_hidden(stack, spec, alt_name, ids, mask)
    rng = substream(cfg.seed, f"attacks:baseline:{spec.name}:{alt_name}")
    rates = []
    for _ in range(n_secrets or a.adapter_secrets):
        bits = np.broadcast_to(rng.integers(0, 2, size=stack.labeler.d_s).astype(float), (len(ids), stack.labeler.d_s))
        d = distances_for(stack.bundles[spec.name], stack.labeler, h, mask, ids, np.ascontiguousarray(bits))
        rates.append(float(np.mean(d <= stack.thresholds[spec.name].eta)))
    return float(np.mean(rates))


def inverse_suite(stack: Stack, spec: ModelSpec, budgets=None, seeds=None) -> dict[int, list[float]]:
    cfg, a = stack.config, stack.config.attacks
    seeds = [substream_seed(cfg.seed, f"attacks:inverse:{s}") for s in (seeds or a.inverse_seeds)]
    return inverse_sweep(stack.bundles[spec.name], list(budgets or a.inverse_budgets), seeds,
                         n_test=a.inverse_test_pairs, epochs=a.inverse_epochs)


def curve_from_sweep(name: str, sweep: dict[int, list[float]], n_secrets: int) -> ASRCurve:
    """Median over seeds per budget; stderr is the across-seed standard error of the mean."""
    c = ASRCurve(name, n_secrets=n_secrets)
    for m in sorted(sweep):
        v = np.asarray(sweep[m])
        se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
        c.add(m, float(np.median(v)), se)
    return c


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


def session_context(stack: Stack, spec: ModelSpec) -> SessionContext:
    cfg = stack.config
    stack.check()
    ids, mask = stack.part("test")
    tr_ids, tr_mask = stack.part("train")
    n_cache = cfg.session.replay_cache_size
    bundle = stack.bundles[spec.name]
    alt_name = cfg.attacks.adapter_alt

    def adapter_factory(token):
        # attacker serves honestly for `adapter_budget` prompts to collect targets, then fits an adapter
        a_ids, a_mask = attack_prompts(cfg, cfg.session.adapter_budget)
        targets = compress(bundle.extractor, token, instantiate(spec).hidden_states_batch(a_ids, a_mask), a_mask)
        alt = instantiate(cfg.spec(alt_name))
        res = train_adapter_mimic(bundle.extractor, token, alt.hidden_states_batch(a_ids, a_mask), a_mask, targets,
                                  _attack_cfg(cfg), substream(cfg.seed, "attacks:session-adapter"))
        return res.adapter

    return SessionContext(
        bundle=bundle,
        labeler=stack.labeler,
        eta=stack.thresholds[spec.name].eta,
        spec=spec,
        prompt_ids=ids,
        prompt_mask=mask,
        roster={m.name: m for m in cfg.roster},
        base_seed=cfg.seed,
        cache_prompts=(tr_ids[:n_cache], tr_mask[:n_cache]),
        adapter_factory=adapter_factory,
    )


def run_sessions(stack: Stack, spec: ModelSpec, strategy: str, n_sessions: int | None = None,
                 n_queries: int | None = None) -> list[SessionTranscript]:
    cfg = stack.config
    ctx = session_context(stack, spec)
    st = ProviderStrategy.parse(strategy)
    out = []
    for k in range(n_sessions if n_sessions is not None else cfg.session.n_sessions):
        seed = substream_seed(cfg.seed, f"session:{spec.name}:{st.label}:{k}")
        ledger = SecretLedger(cfg.m_star, cfg.n_star, cfg.rate_limit, training_seed=cfg.seed)
        out.append(run_session(ctx, st, n_queries or cfg.session.n_queries, cfg.session.tau, seed, ledger,
                               session_id=f"{spec.name}/{st.label}/{k:04d}"))
    return out
