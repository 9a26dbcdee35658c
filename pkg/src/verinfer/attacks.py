"""Dishonest-provider attacks and their success-rate evaluation.

Every attack declares which artifacts it holds; ``check_access`` rejects
combinations the threat model does not grant.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .corpus import sample_distinct_pairs, sample_secret_bits
from .labeling import LabelingNetwork
from .models import StandInModel
from .numerics import DTYPE, MLP, Adam, ParameterSet, ShapeError, check_finite
from .proxy import FeatureExtractor, ProxyBundle, bce_with_logits, compress, compress_with_cache, predict

log = logging.getLogger(__name__)


class ThreatModelViolation(PermissionError):
    pass


# (attack kind, protocol mode) -> artifacts the attacker may hold
LEAKAGE_MODEL: dict[tuple[str, str], frozenset[str]] = {
    ("direct", "simple"): frozenset({"head", "labels"}),
    ("adapter-mimic", "secret"): frozenset({"extractor", "task-token", "targets", "alt-model"}),
    ("adapter-mimic", "simple"): frozenset({"extractor", "targets", "alt-model"}),
    ("adapter-label", "simple"): frozenset({"extractor", "head", "labels", "alt-model"}),
    ("finetune", "simple"): frozenset({"extractor", "head", "labels", "alt-model"}),
    ("inverse", "secret"): frozenset({"pairs"}),
}

# Worst-case relaxation for the guessed-secret experiment: the attacker is
# handed the head and the labeler and only lacks the user's secret.
WHITE_BOX_GUESS = frozenset({"head", "labeler", "guessed-secret"})


def check_access(kind: str, mode: str, held, white_box: bool = False) -> None:
    held = frozenset(held)
    if white_box:
        allowed = WHITE_BOX_GUESS
    elif (kind, mode) in LEAKAGE_MODEL:
        allowed = LEAKAGE_MODEL[(kind, mode)]
    else:
        raise ThreatModelViolation(f"{kind} attack is not available against the {mode} protocol")
    extra = held - allowed
    if extra:
        raise ThreatModelViolation(f"{kind} attack ({mode}) may not hold {sorted(extra)}")


@dataclass
class AttackConfig:
    kind: str
    budget: int = 0
    steps: int = 100
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    hidden: int = 128
    dropout: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.budget < 0 or self.steps < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("attack budgets and step counts must be non-negative")


# ---------------------------------------------------------------------------
# Direct vector optimisation
# ---------------------------------------------------------------------------


def direct_vector_attack(head: MLP, targets: np.ndarray, steps: int = 100, lr: float = 0.1,
                         loss: str = "mse", rng: np.random.Generator | None = None,
                         z0: np.ndarray | None = None) -> tuple[np.ndarray, list[float]]:
    """Optimise one free vector per target so that ``head(z)`` reproduces it.

    ``loss`` is ``"bce"`` for binary set-of-words targets and ``"mse"`` for
    continuous labels. Rows are independent; Adam keeps per-coordinate state so
    optimising them jointly equals optimising each alone.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=DTYPE))
    if targets.shape[1] != head.sizes[-1]:
        raise ShapeError(f"target width {targets.shape[1]} != head output {head.sizes[-1]}")
    if z0 is None:
        rng = rng or np.random.default_rng(0)
        z0 = rng.standard_normal((targets.shape[0], head.sizes[0]))
    ps = ParameterSet({"kind": "free-vectors"}, {"z": np.array(z0, dtype=DTYPE)})
    opt = Adam([ps], lr=lr, weight_decay=0.0)
    trace = []
    for _ in range(steps):
        out, cache = head.forward(ps["z"])
        if loss == "bce":
            value, dout = bce_with_logits(out, targets)
        elif loss == "mse":
            r = out - targets
            value, dout = float((r * r).sum(axis=1).mean()), 2.0 * r / len(r)
        else:
            raise ValueError(f"unknown loss {loss!r}")
        check_finite(value, "direct attack loss")
        dz, _ = head.backward(cache, dout)
        opt.step([{"z": dz}])
        trace.append(value)
    return ps["z"], trace


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------


class Adapter:
    """Per-position MLP from alternative hidden states to specified width."""

    def __init__(self, mlp: MLP):
        self.mlp = mlp

    @classmethod
    def create(cls, d_in: int, d_out: int, rng: np.random.Generator, hidden: int = 128, dropout: float = 0.3):
        return cls(MLP.create([d_in, hidden, hidden, d_out], rng, dropout=dropout))

    @property
    def d_in(self) -> int:
        return self.mlp.sizes[0]

    @property
    def d_out(self) -> int:
        return self.mlp.sizes[-1]

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return self.mlp(h)


@dataclass
class AdapterResult:
    adapter: Adapter
    history: list[float] = field(default_factory=list)
    spec_queries: int = 0  # honest queries the attacker had to pay for to get targets


def _adapter_epochs(adapter: Adapter, n: int, cfg: AttackConfig, rng: np.random.Generator,
                    step_fn: Callable[[np.ndarray, Callable], float]) -> list[float]:
    opt = Adam([adapter.mlp.params], lr=cfg.lr, weight_decay=0.0)
    history = []
    for _ in range(cfg.epochs):
        losses = []
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads_box = {}

            def run(h):
                out, cache = adapter.mlp.forward(h, train=True, rng=rng)

                def back(dout):
                    _, g = adapter.mlp.backward(cache, dout)
                    grads_box["g"] = g

                return out, back

            losses.append(step_fn(idx, run))
            opt.step([grads_box["g"]])
        history.append(float(np.mean(losses)))
    return history


def train_adapter_mimic(extractor: FeatureExtractor, task_token: np.ndarray | None, h_alt: np.ndarray,
                        mask: np.ndarray, targets: np.ndarray, cfg: AttackConfig,
                        rng: np.random.Generator) -> AdapterResult:
    """Fit ``a`` so that ``g(t (+) a(h_alt))`` lands on honestly obtained vectors.

    ``targets`` are compressed vectors the attacker collected by serving the
    same prompts honestly, so each costs one specified-model query.
    """
    check_access("adapter-mimic", "secret" if task_token is not None else "simple",
                 {"extractor", "targets", "alt-model"} | ({"task-token"} if task_token is not None else set()))
    M = len(h_alt)
    if M < 1:
        raise ValueError("adapter attack needs at least one prompt")
    if len(targets) != M:
        raise ShapeError("one target vector per prompt is required")
    adapter = Adapter.create(h_alt.shape[-1], extractor.d_model, rng, cfg.hidden, cfg.dropout)

    def step(idx, run):
        a_out, back = run(h_alt[idx])
        z, zcache, _ = compress_with_cache(extractor, task_token, a_out, mask[idx])
        r = z - targets[idx]
        n = np.linalg.norm(r, axis=1)
        loss = float(n.mean())
        check_finite(loss, "adapter loss")
        dz = r / np.maximum(n, 1e-12)[:, None] / len(idx)
        dseq, _, _ = extractor.backward(zcache, dz)
        back(dseq[:, 1:, :] if task_token is not None else dseq)
        return loss

    history = _adapter_epochs(adapter, M, cfg, rng, step)
    return AdapterResult(adapter, history, spec_queries=M)


def train_adapter_label(bundle: ProxyBundle, h_alt: np.ndarray, mask: np.ndarray, labels: np.ndarray,
                        cfg: AttackConfig, rng: np.random.Generator) -> AdapterResult:
    """Fit ``a`` so the frozen simple-mode head emits the known set-of-words labels."""
    check_access("adapter-label", bundle.mode, {"extractor", "head", "labels", "alt-model"})
    adapter = Adapter.create(h_alt.shape[-1], bundle.d_model, rng, cfg.hidden, cfg.dropout)

    def step(idx, run):
        a_out, back = run(h_alt[idx])
        z, zcache, _ = compress_with_cache(bundle.extractor, None, a_out, mask[idx])
        logits, hcache = bundle.head.forward(z)
        loss, dlogits = bce_with_logits(logits, labels[idx])
        check_finite(loss, "adapter loss")
        dz, _ = bundle.head.backward(hcache, dlogits)
        dseq, _, _ = bundle.extractor.backward(zcache, dz)
        back(dseq)
        return loss

    history = _adapter_epochs(adapter, len(h_alt), cfg, rng, step) if len(h_alt) else []
    return AdapterResult(adapter, history)


def finetune_attack(alt: StandInModel, bundle: ProxyBundle, ids: np.ndarray, mask: np.ndarray,
                    labels: np.ndarray, cfg: AttackConfig, rng: np.random.Generator) -> tuple[StandInModel, list[float]]:
    """Unfreeze a same-width alternative model and train it against the simple-mode head."""
    check_access("finetune", bundle.mode, {"extractor", "head", "labels", "alt-model"})
    if alt.spec.d_model != bundle.d_model:
        raise ShapeError(f"fine-tuning needs matching widths: alt {alt.spec.d_model} vs spec {bundle.d_model}")
    tuned = StandInModel(alt.spec, alt.encoder.params.copy(), alt.embedding.copy())
    emb = ParameterSet({"kind": "embedding"}, {"E": tuned.embedding})
    opt = Adam([tuned.encoder.params, emb], lr=cfg.lr, weight_decay=0.0)
    history = []
    for _ in range(cfg.epochs):
        losses = []
        order = rng.permutation(len(ids))
        for start in range(0, len(ids), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = tuned.embedding[ids[idx]]
            h, hcache = tuned.encoder.forward(x, mask[idx])
            z, zcache, _ = compress_with_cache(bundle.extractor, None, h, mask[idx])
            logits, pcache = bundle.head.forward(z)
            loss, dlogits = bce_with_logits(logits, labels[idx])
            check_finite(loss, "fine-tune loss")
            dz, _ = bundle.head.backward(pcache, dlogits)
            dseq, _, _ = bundle.extractor.backward(zcache, dz)
            dx, g_enc = tuned.encoder.backward(hcache, dseq)
            g_emb = np.zeros_like(tuned.embedding)
            np.add.at(g_emb, ids[idx], dx)
            opt.step([g_enc, {"E": g_emb}])
            losses.append(loss)
        history.append(float(np.mean(losses)))
    tuned.embedding = emb["E"]
    return tuned, history


# ---------------------------------------------------------------------------
# Secret recovery
# ---------------------------------------------------------------------------


@dataclass
class InverseModel:
    mlp: MLP
    history: list[float] = field(default_factory=list)

    def predict_bits(self, tokens: np.ndarray) -> np.ndarray:
        # sigmoid output rounded at 0.5 is the sign of the pre-activation
        return (self.mlp(tokens) > 0).astype(DTYPE)


def train_inverse_model(secret_bits: np.ndarray, tokens: np.ndarray, rng: np.random.Generator,
                        epochs: int = 100, batch_size: int = 256, lr: float = 1e-3,
                        hidden: int = 128) -> InverseModel:
    """Map collected task tokens back to raw secrets (3-layer MLP, per-bit cross-entropy).

    The network emits logits; the sigmoid is folded into the loss and the
    rounding threshold, which is the same map.
    """
    check_access("inverse", "secret", {"pairs"})
    secret_bits = np.atleast_2d(secret_bits)
    tokens = np.atleast_2d(tokens)
    N = len(secret_bits)
    if N < 1 or len(tokens) != N:
        raise ValueError("need at least one (secret, token) pair, with matching counts")
    mlp = MLP.create([tokens.shape[1], hidden, hidden, secret_bits.shape[1]], rng)
    opt = Adam([mlp.params], lr=lr, weight_decay=0.0)
    history = []
    for _ in range(epochs):
        order = rng.permutation(N)
        losses = []
        for start in range(0, N, batch_size):
            idx = order[start : start + batch_size]
            logits, cache = mlp.forward(tokens[idx])
            loss, dl = bce_with_logits(logits, secret_bits[idx])
            _, g = mlp.backward(cache, dl)
            opt.step([g])
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return InverseModel(mlp, history)


def exact_match_rate(pred_bits: np.ndarray, true_bits: np.ndarray) -> float:
    return float(np.mean(np.all(pred_bits == true_bits, axis=1)))


# ---------------------------------------------------------------------------
# ASR evaluation
# ---------------------------------------------------------------------------


@dataclass
class ASRPoint:
    asr: float
    stderr: float
    per_secret: list[float]


def eval_asr(respond: Callable[[np.ndarray, np.ndarray], np.ndarray], bundle: ProxyBundle,
             labeler: LabelingNetwork, ids: np.ndarray, mask: np.ndarray, eta: float,
             secrets: np.ndarray) -> ASRPoint:
    """Mean over secrets of the fraction of prompts whose returned vector passes.

    ``respond(secret_bits, task_token)`` returns one compressed vector per test
    prompt; it is the whole attack artifact as seen from the user side.
    """
    rates = []
    for bits in np.atleast_2d(secrets):
        token = bundle.token_embedder(bits[None])[0]
        z = respond(bits, token)
        y = labeler.label_batch(ids, mask, bits)
        d = np.linalg.norm(predict(bundle, z) - y, axis=1)
        rates.append(float(np.mean(d <= eta)))
    r = np.array(rates)
    se = float(r.std(ddof=1) / np.sqrt(len(r))) if len(r) > 1 else 0.0
    return ASRPoint(float(r.mean()), se, rates)


def sow_success(bundle: ProxyBundle, z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Simple-protocol acceptance: the rounded head output equals the label exactly."""
    return np.all((predict(bundle, z) > 0) == (labels > 0.5), axis=1)


@dataclass
class ASRCurve:
    scenario: str
    budgets: list[int] = field(default_factory=list)
    asr: list[float] = field(default_factory=list)
    stderr: list[float] = field(default_factory=list)
    n_secrets: int = 30

    def add(self, budget: int, point: ASRPoint | float, stderr: float = 0.0) -> None:
        if isinstance(point, ASRPoint):
            point, stderr = point.asr, point.stderr
        if not 0.0 <= point <= 1.0:
            raise ValueError(f"ASR must lie in [0, 1], got {point}")
        self.budgets.append(int(budget))
        self.asr.append(float(point))
        self.stderr.append(float(stderr))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["budget", "asr", "stderr"])
        for b, a, s in zip(self.budgets, self.asr, self.stderr):
            w.writerow([b, repr(a), repr(s)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "budgets": self.budgets, "asr": self.asr, "stderr": self.stderr,
                "n_secrets": self.n_secrets}


# ---------------------------------------------------------------------------
# Sweeps used by the CLI and the acceptance suite
# ---------------------------------------------------------------------------


@dataclass
class AdapterSweep:
    """ASR per budget (one entry per seed) under the training secret and under a fresh one."""

    same_secret: dict[int, list[float]]
    fresh_secret: dict[int, list[float]]


def adapter_sweep(bundle: ProxyBundle, labeler: LabelingNetwork, spec_model: StandInModel,
                  alt_model: StandInModel, attack_ids: np.ndarray, attack_mask: np.ndarray,
                  test_ids: np.ndarray, test_mask: np.ndarray, eta: float, budgets, seeds, n_secrets: int,
                  cfg: AttackConfig) -> AdapterSweep:
    """Adapter attack over a budget grid, retraining the adapter for every secret.

    Each adapter is scored under the secret it was trained for and under a
    different, freshly drawn secret (the rotation defence).
    """
    h_spec_all = spec_model.hidden_states_batch(attack_ids, attack_mask)
    h_alt_all = alt_model.hidden_states_batch(attack_ids, attack_mask)
    h_alt_test = alt_model.hidden_states_batch(test_ids, test_mask)

    def asr(adapter, bits):
        tok = bundle.token_embedder(bits[None])[0]
        z = compress(bundle.extractor, tok, adapter(h_alt_test), test_mask)
        d = np.linalg.norm(predict(bundle, z) - labeler.label_batch(test_ids, test_mask, bits), axis=1)
        return float(np.mean(d <= eta))

    out = AdapterSweep({int(m): [] for m in budgets}, {int(m): [] for m in budgets})
    for seed in seeds:
        secrets, fresh = sample_distinct_pairs(n_secrets, labeler.d_s, np.random.default_rng(seed))
        # common random numbers: per (seed, secret) every budget shares the adapter
        # initialisation and sees a prefix of one prompt permutation
        perms = [np.random.default_rng([seed, k, 0]).permutation(len(attack_ids)) for k in range(len(secrets))]
        for m in budgets:
            same_rates, fresh_rates = [], []
            for k, bits in enumerate(secrets):
                arng = np.random.default_rng([seed, k])
                pick = perms[k][: int(m)]
                tok = bundle.token_embedder(bits[None])[0]
                targets = compress(bundle.extractor, tok, h_spec_all[pick], attack_mask[pick])
                res = train_adapter_mimic(bundle.extractor, tok, h_alt_all[pick], attack_mask[pick], targets, cfg, arng)
                same_rates.append(asr(res.adapter, bits))
                fresh_rates.append(asr(res.adapter, fresh[k]))
            out.same_secret[int(m)].append(float(np.mean(same_rates)))
            out.fresh_secret[int(m)].append(float(np.mean(fresh_rates)))
            log.info("adapter seed %s M=%d asr %.4f fresh %.4f", seed, m, out.same_secret[int(m)][-1],
                     out.fresh_secret[int(m)][-1])
    return out


def inverse_sweep(bundle: ProxyBundle, budgets, seeds, n_test: int = 100_000, epochs: int = 100,
                  batch_size: int = 256) -> dict[int, list[float]]:
    """Exact-match secret recovery rate per number of collected pairs and seed."""
    d_s = bundle.token_embedder.sizes[0]
    out: dict[int, list[float]] = {int(n): [] for n in budgets}
    for seed in seeds:
        rng = np.random.default_rng([seed, 7])
        test_bits = sample_secret_bits(n_test, d_s, rng)
        test_tok = bundle.token_embedder(test_bits)
        for n in budgets:
            bits = sample_secret_bits(int(n), d_s, rng)
            inv = train_inverse_model(bits, bundle.token_embedder(bits), rng, epochs=epochs, batch_size=batch_size)
            out[int(n)].append(exact_match_rate(inv.predict_bits(test_tok), test_bits))
            log.info("inverse seed %s N=%d asr %.6f", seed, n, out[int(n)][-1])
    return out
