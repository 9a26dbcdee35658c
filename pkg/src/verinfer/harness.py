"""Three-party protocol simulation: platform ledger, provider strategies, user verification.

Roles exchange messages through per-role mailboxes in one process. The
platform owns the secret ledger and the token embedder; the provider sees
only the extractor and the active task token; the user holds raw secrets,
the head and the labeler.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import substream, substream_seed
from .corpus import Secret, TokenSequence, sample_secret
from .decision import BatchVerdict, batch_decide
from .models import StandInModel, align_dims, instantiate, projection_for
from .numerics import DTYPE, ParameterSet, loads_params, save_params
from .proxy import ProxyBundle, compress, embed_secret
from .verify import VerificationOutcome, verify_query

log = logging.getLogger(__name__)

SENSITIVE_ROLES = ("secret-embedder", "head", "labeler")


class RotationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Secret ledger (platform side)
# ---------------------------------------------------------------------------


@dataclass
class LedgerEntry:
    secret_id: str
    secret: Secret
    token: np.ndarray
    activated_at: int
    count: int = 0


@dataclass
class RetrainJob:
    generation: int
    seed: int
    reason: str


@dataclass
class SecretLedger:
    m_star: int = 50
    n_star: int = 20
    rate_limit: int = 1
    training_seed: int = 0
    generation: int = 0
    entries: list[LedgerEntry] = field(default_factory=list)
    pending_retrain: RetrainJob | None = None

    def __post_init__(self):
        if self.m_star < 1 or self.n_star < 1 or self.rate_limit < 0:
            raise ValueError("m_star and n_star must be positive, rate_limit non-negative")

    @property
    def active(self) -> LedgerEntry | None:
        return self.entries[-1] if self.entries else None

    def needs_rotation(self) -> bool:
        return self.active is None or self.active.count >= self.m_star

    def record_query(self, secret_id: str) -> None:
        entry = self.active
        if entry is None or entry.secret_id != secret_id:
            raise RotationError(f"query verified against inactive secret {secret_id}")
        if entry.count >= self.m_star:
            raise RotationError(f"secret {secret_id} exhausted its {self.m_star} queries")
        entry.count += 1


def rotate_secret(ledger: SecretLedger, now: int, bundle: ProxyBundle, rng: np.random.Generator,
                  force: bool = False) -> LedgerEntry:
    """Activate the next secret.

    Allowed when the active secret has served ``m_star`` queries, or on an
    explicit operator request (``force``); either way no sooner than
    ``rate_limit`` time units after the previous activation.
    """
    act = ledger.active
    if act is not None:
        if not force and act.count < ledger.m_star:
            raise RotationError(f"active secret has served {act.count} < {ledger.m_star} queries")
        if now - act.activated_at < ledger.rate_limit:
            raise RotationError(f"rotation at t={now} inside the rate-limit window (last at t={act.activated_at})")
    if len(ledger.entries) >= ledger.n_star:
        raise RotationError(f"{ledger.n_star} secrets used; the protocol must be retrained")
    d_s = bundle.token_embedder.sizes[0]
    secret = sample_secret(d_s, rng)
    token = embed_secret(bundle, secret.as_array()[None])[0]
    entry = LedgerEntry(f"g{ledger.generation}-k{len(ledger.entries):04d}", secret, token, now)
    ledger.entries.append(entry)
    retrain_trigger(ledger)
    return entry


def retrain_trigger(ledger: SecretLedger) -> bool:
    """True once ``n_star`` secrets have been used; then a retrain job with a fresh seed is queued."""
    if len(ledger.entries) < ledger.n_star:
        return False
    if ledger.pending_retrain is None:
        seed = substream_seed(ledger.training_seed, f"retrain:{ledger.generation + 1}")
        if seed == ledger.training_seed:
            seed += 1
        ledger.pending_retrain = RetrainJob(ledger.generation + 1, seed, f"{ledger.n_star} secrets used")
    return True


# ---------------------------------------------------------------------------
# Provider side
# ---------------------------------------------------------------------------


STRATEGY_KINDS = ("honest", "substitute", "random", "replay-cache", "attack")


@dataclass(frozen=True)
class ProviderStrategy:
    kind: str
    model: str | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown provider strategy {self.kind!r}")
        if self.kind in ("substitute", "attack") and not self.model:
            raise ValueError(f"{self.kind} strategy needs an alternative model name")

    @classmethod
    def parse(cls, text: str) -> ProviderStrategy:
        kind, _, model = text.partition(":")
        return cls(kind, model or None)

    @property
    def label(self) -> str:
        return f"{self.kind}:{self.model}" if self.model else self.kind


@dataclass
class Query:
    query_id: str
    prompt_id: int
    tokens: TokenSequence


@dataclass
class Response:
    query_id: str
    completion: str
    z: np.ndarray
    latency: float


@dataclass
class ProviderState:
    """Everything the provider legitimately holds."""

    extractor: ParameterSet
    tokens: dict[str, np.ndarray] = field(default_factory=dict)
    active: str | None = None

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_params(d / "extractor.svip", self.extractor, "extractor")
        tok = ParameterSet({"kind": "task-tokens", "order": sorted(self.tokens)},
                           {k: np.asarray(v) for k, v in sorted(self.tokens.items())})
        save_params(d / "task-tokens.svip", tok, "task-tokens")
        (d / "state.json").write_text(json.dumps({"active": self.active, "token_ids": sorted(self.tokens)}),
                                      encoding="utf-8")


class Provider:
    def __init__(self, strategy: ProviderStrategy, spec_model: StandInModel, bundle_extractor, seed: int,
                 alt_model: StandInModel | None = None, projection=None, cache_prompts=None, adapter_factory=None):
        self.strategy = strategy
        self.spec_model = spec_model
        self.extractor = bundle_extractor
        self.alt_model = alt_model
        self.projection = projection
        self.seed = seed
        self.state = ProviderState(bundle_extractor.params())
        self.cache_prompts = cache_prompts  # (ids, mask) the replay provider answered honestly before
        self._cache: dict[str, np.ndarray] = {}
        self.adapter_factory = adapter_factory
        self._adapters: dict[str, object] = {}
        self.inbox: deque = deque()

    def receive_token(self, secret_id: str, token: np.ndarray) -> None:
        self.state.tokens[secret_id] = np.array(token, dtype=DTYPE)
        self.state.active = secret_id

    def compute_units(self, T: int) -> float:
        k = self.strategy.kind
        if k == "honest":
            return self.spec_model.compute_units(T)
        if k in ("substitute", "attack"):
            return self.alt_model.compute_units(T)
        if k == "replay-cache":
            n = 0 if self.cache_prompts is None else len(self.cache_prompts[0])
            return self.spec_model.compute_units(T) * n / max(1, len(self.state.tokens) * 50)
        return 0.0

    def _hidden(self, q: Query) -> np.ndarray:
        k = self.strategy.kind
        ids, mask = q.tokens.ids[None], q.tokens.mask[None]
        if k == "honest":
            return self.spec_model.hidden_states_batch(ids, mask)
        if k == "random":
            rng = np.random.default_rng([self.seed, int(q.prompt_id), len(self.state.tokens)])
            return rng.standard_normal((1, ids.shape[1], self.spec_model.spec.d_model))
        h = self.alt_model.hidden_states_batch(ids, mask)
        if k == "attack":
            return self._adapter()(h)
        return h if self.projection is None else align_dims(h, self.projection)

    def _adapter(self):
        sid = self.state.active
        if sid not in self._adapters:
            self._adapters[sid] = self.adapter_factory(self.state.tokens[sid])
        return self._adapters[sid]

    def respond(self, q: Query) -> Response:
        t0 = time.perf_counter()
        token = self.state.tokens[self.state.active]
        if self.strategy.kind == "replay-cache":
            sid = self.state.active
            if sid not in self._cache:
                ids, mask = self.cache_prompts
                self._cache[sid] = compress(self.extractor, token, self.spec_model.hidden_states_batch(ids, mask), mask)
            cached = self._cache[sid]
            z = cached[int(q.prompt_id) % len(cached)]
        else:
            z = compress(self.extractor, token, self._hidden(q), q.tokens.mask[None])[0]
        latency = time.perf_counter() - t0
        return Response(q.query_id, "<completion>", z, latency)


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


@dataclass
class QueryRecord:
    query_id: str
    prompt_id: int
    secret_id: str
    z: np.ndarray
    completion: str
    outcome: VerificationOutcome
    provider_latency: float
    user_latency: float


@dataclass
class SessionTranscript:
    session_id: str
    spec_name: str
    strategy: str
    seed: int
    records: list[QueryRecord] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    verdict: BatchVerdict | None = None
    compute_units: float = 0.0
    halted: bool = False

    @property
    def bits(self) -> list[int]:
        return [r.outcome.bit for r in self.records]


@dataclass
class SessionContext:
    """Trained, calibrated artifacts a session needs; validated before any query runs."""

    bundle: ProxyBundle
    labeler: object
    eta: float
    spec: object
    prompt_ids: np.ndarray
    prompt_mask: np.ndarray
    roster: dict
    base_seed: int = 0
    cache_prompts: tuple | None = None
    adapter_factory: object = None

    def validate(self) -> None:
        if self.bundle is None or self.labeler is None or self.eta is None:
            raise ValueError("session needs a bundle, a labeler and a threshold")
        if self.bundle.mode != "secret":
            raise ValueError("sessions run the secret-based protocol")
        if self.bundle.d_out != self.labeler.d_y:
            raise ValueError("bundle head and labeler disagree on the label dimension")


def make_provider(ctx: SessionContext, strategy: ProviderStrategy, seed: int) -> Provider:
    spec_model = instantiate(ctx.spec)
    alt = proj = None
    if strategy.kind in ("substitute", "attack"):
        if strategy.model not in ctx.roster:
            raise ValueError(f"strategy references unknown model {strategy.model!r}")
        alt_spec = ctx.roster[strategy.model]
        alt = instantiate(alt_spec)
        proj = projection_for(alt_spec, ctx.spec, ctx.base_seed)
    if strategy.kind == "attack" and ctx.adapter_factory is None:
        raise ValueError("attack strategy needs an adapter factory")
    if strategy.kind == "replay-cache" and ctx.cache_prompts is None:
        raise ValueError("replay-cache strategy needs cached prompts")
    return Provider(strategy, spec_model, ctx.bundle.extractor, seed, alt, proj, ctx.cache_prompts,
                    ctx.adapter_factory)


def run_session(ctx: SessionContext, strategy: ProviderStrategy, n_queries: int, tau: float, seed: int,
                ledger: SecretLedger | None = None, session_id: str = "s0", clock_start: int = 0) -> SessionTranscript:
    """One user, one provider, ``n_queries`` verified queries, then a batch verdict."""
    ctx.validate()
    if n_queries < 1:
        raise ValueError("a session needs at least one query")
    ledger = ledger or SecretLedger(training_seed=ctx.base_seed)
    provider = make_provider(ctx, strategy, substream_seed(seed, "provider"))
    user_rng = substream(seed, "user")
    platform_rng = substream(seed, "platform")
    tr = SessionTranscript(session_id, ctx.spec.name, strategy.label, seed)
    user_secrets: dict[str, Secret] = {}
    mail = {"provider": provider.inbox, "user": deque()}
    for i in range(n_queries):
        now = clock_start + i
        if ledger.needs_rotation():
            try:
                entry = rotate_secret(ledger, now, ctx.bundle, platform_rng)
            except RotationError as e:
                tr.events.append({"t": now, "event": "halt", "reason": str(e)})
                tr.halted = True
                break
            tr.events.append({"t": now, "event": "rotate", "secret_id": entry.secret_id})
            if ledger.pending_retrain is not None and not any(ev["event"] == "retrain" for ev in tr.events):
                tr.events.append({"t": now, "event": "retrain", "seed": ledger.pending_retrain.seed})
            # platform -> provider: token only; platform -> user: raw secret only
            mail["provider"].append(("token", entry.secret_id, entry.token))
            user_secrets[entry.secret_id] = entry.secret
        while mail["provider"] and mail["provider"][0][0] == "token":
            _, sid, tok = mail["provider"].popleft()
            provider.receive_token(sid, tok)
        active = ledger.active.secret_id
        pid = int(user_rng.integers(len(ctx.prompt_ids)))
        q = Query(f"{session_id}-q{i:04d}", pid, TokenSequence(ctx.prompt_ids[pid], ctx.prompt_mask[pid]))
        mail["provider"].append(("query", q))
        _, q_in = mail["provider"].popleft()
        resp = provider.respond(q_in)
        tr.compute_units += provider.compute_units(ctx.prompt_ids.shape[1])
        mail["user"].append(resp)
        r = mail["user"].popleft()
        t0 = time.perf_counter()
        outcome = verify_query(ctx.bundle, ctx.labeler, q.tokens, user_secrets[active], r.z, ctx.eta,
                               query_id=q.query_id, secret_id=active)
        user_latency = time.perf_counter() - t0
        ledger.record_query(active)
        tr.records.append(QueryRecord(q.query_id, pid, active, r.z, r.completion, outcome, r.latency, user_latency))
    if tr.records:
        tr.verdict = batch_decide(tr.bits, tau)
    return tr


def replay_transcript(ctx: SessionContext, tr: SessionTranscript, tau: float) -> SessionTranscript:
    """Re-run a transcript's inputs under its recorded seed."""
    strategy = ProviderStrategy.parse(tr.strategy)
    return run_session(ctx, strategy, len(tr.records), tau, tr.seed, session_id=tr.session_id)


# ---------------------------------------------------------------------------
# Trust boundary
# ---------------------------------------------------------------------------


def scan_provider_state(directory, ledger: SecretLedger | None = None) -> list[str]:
    """Violations found in persisted provider artifacts (empty list == clean).

    Flags containers tagged with platform/user-only roles, and any string in
    JSON files that contains a raw secret from ``ledger``.
    """
    problems = []
    raw = [e.secret.to_hex() for e in ledger.entries] if ledger else []
    for path in sorted(Path(directory).rglob("*")):
        if not path.is_file():
            continue
        data = path.read_bytes()
        if data[:4] == b"SVIP":
            _, role = loads_params(data)
            if role in SENSITIVE_ROLES:
                problems.append(f"{path.name}: container role {role!r} must not leave the platform")
        elif path.suffix == ".json":
            for s in _json_strings(json.loads(data.decode("utf-8"))):
                for r in raw:
                    if r in s:
                        problems.append(f"{path.name}: contains raw secret {r}")
        for role in SENSITIVE_ROLES:
            if path.stem.startswith(role):
                problems.append(f"{path.name}: file named after a sensitive role")
    return problems


def _json_strings(obj):
    if isinstance(obj, str):
        yield obj
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield str(k)
            yield from _json_strings(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from _json_strings(v)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def session_summary(transcripts: list[SessionTranscript]) -> dict:
    out: dict[str, dict] = {}
    for tr in transcripts:
        key = f"{tr.spec_name}/{tr.strategy}"
        s = out.setdefault(key, {"sessions": 0, "judged_honest": 0, "queries": 0, "accepted": 0, "halted": 0})
        s["sessions"] += 1
        s["judged_honest"] += int(bool(tr.verdict and tr.verdict.honest))
        s["queries"] += len(tr.records)
        s["accepted"] += sum(tr.bits)
        s["halted"] += int(tr.halted)
    for s in out.values():
        s["honest_rate"] = s["judged_honest"] / s["sessions"]
        s["acceptance_rate"] = s["accepted"] / s["queries"] if s["queries"] else 0.0
    return dict(sorted(out.items()))


def export_report(out_dir, transcripts=(), eval_reports=(), asr_curves=(), extra: dict | None = None) -> list[Path]:
    """Write a JSON summary plus CSV tables; identical inputs give identical bytes.

    Wall-clock latency is excluded here; see ``export_timing``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise OSError(f"report directory {out} is not writable")
    written = []

    def put(name: str, text: str):
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)

    transcripts = list(transcripts)
    eval_reports = list(eval_reports)
    asr_curves = list(asr_curves)
    summary = {
        "evaluation": {
            r.specified_model: {"eta": r.eta, "fnr": r.fnr, "fpr": dict(sorted(r.fpr.items())),
                                "auc": dict(sorted(r.auc.items())), "n_samples": dict(sorted(r.n_samples.items()))}
            for r in eval_reports
        },
        "sessions": session_summary(transcripts),
        "attacks": {c.scenario: c.to_dict() for c in asr_curves},
    }
    if extra:
        summary["extra"] = extra
    put("summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")

    if eval_reports:
        rows = []
        for r in eval_reports:
            rows.append([r.specified_model, "honest", "fnr", _fmt(r.fnr), ""])
            for sc in sorted(r.fpr):
                rows.append([r.specified_model, sc, "fpr", _fmt(r.fpr[sc]), _fmt(r.auc[sc])])
            for sc, h in sorted(r.histograms.items()):
                put(f"hist_{r.specified_model}_{sc}.csv", h.to_csv())
        put("accuracy.csv", _csv(rows, ["specified_model", "scenario", "metric", "rate", "auc"]))
    for c in asr_curves:
        put(f"asr_{c.scenario.replace('/', '_').replace(':', '_')}.csv", c.to_csv())
    if transcripts:
        srows, qrows = [], []
        for tr in transcripts:
            v = tr.verdict
            srows.append([tr.session_id, tr.spec_name, tr.strategy, tr.seed, len(tr.records),
                          _fmt(v.mean) if v else "", v.decision if v else "", int(tr.halted), _fmt(tr.compute_units)])
            for rec in tr.records:
                qrows.append([tr.session_id, rec.query_id, rec.prompt_id, rec.secret_id,
                              _fmt(rec.outcome.distance), rec.outcome.bit])
        put("sessions.csv", _csv(srows, ["session", "spec", "strategy", "seed", "queries", "mean_v", "verdict",
                                         "halted", "compute_units"]))
        put("queries.csv", _csv(qrows, ["session", "query", "prompt_id", "secret_id", "distance", "bit"]))
    return written


def export_timing(out_dir, transcripts) -> Path:
    """Latency statistics per strategy (wall clock, so not reproducible byte for byte)."""
    by: dict[str, dict[str, list[float]]] = {}
    for tr in transcripts:
        d = by.setdefault(f"{tr.spec_name}/{tr.strategy}", {"provider": [], "user": []})
        d["provider"] += [r.provider_latency for r in tr.records]
        d["user"] += [r.user_latency for r in tr.records]
    stats = {
        k: {role: {"median_s": float(np.median(v)), "p95_s": float(np.percentile(v, 95)), "n": len(v)}
            for role, v in d.items() if v}
        for k, d in sorted(by.items())
    }
    p = Path(out_dir) / "timing.json"
    p.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return p
