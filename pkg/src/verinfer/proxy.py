"""The proxy task: feature extractor, head and secret task-token embedder.

Platform side trains everything. The provider only ever receives the feature
extractor and per-secret task tokens; the head and the token embedder stay
with the platform (head also with the user).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import sample_secret_bits
from .labeling import LabelingNetwork, sow_labels_batch
from .numerics import (
    DTYPE,
    MLP,
    Adam,
    ParameterSet,
    ShapeError,
    TransformerEncoder,
    check_finite,
    load_params,
    masked_mean,
    merge_params,
    save_params,
    sigmoid,
    split_params,
)

log = logging.getLogger(__name__)

MODES = ("simple", "secret")


class FeatureExtractor:
    """Transformer over hidden states, masked mean pooling, linear map to ``d_g``."""

    def __init__(self, encoder: TransformerEncoder, projection: MLP):
        if projection.sizes[0] != encoder.d_model:
            raise ShapeError(f"projection input {projection.sizes[0]} != encoder width {encoder.d_model}")
        self.encoder = encoder
        self.projection = projection

    @classmethod
    def create(cls, d_model: int, d_g: int, n_layers: int, n_heads: int, max_len: int,
               rng: np.random.Generator) -> FeatureExtractor:
        enc = TransformerEncoder.create(d_model, n_layers, n_heads, 2 * d_model, max_len, rng)
        proj = MLP.create([d_model, d_g], rng, activation="linear", output_activation="linear")
        return cls(enc, proj)

    @property
    def d_model(self) -> int:
        return self.encoder.d_model

    @property
    def d_g(self) -> int:
        return self.projection.sizes[-1]

    @property
    def param_sets(self) -> list[ParameterSet]:
        return [self.encoder.params, self.projection.params]

    def params(self) -> ParameterSet:
        return merge_params({"encoder": self.encoder.params, "projection": self.projection.params})

    @classmethod
    def from_params(cls, ps: ParameterSet) -> FeatureExtractor:
        parts = split_params(ps)
        return cls(TransformerEncoder(parts["encoder"]), MLP(parts["projection"]))

    def forward(self, seq: np.ndarray, mask: np.ndarray):
        enc, ecache = self.encoder.forward(seq, mask)
        pooled, weights = masked_mean(enc, mask)
        z, pcache = self.projection.forward(pooled)
        return z, (ecache, weights, pcache)

    def backward(self, cache, dz: np.ndarray):
        ecache, weights, pcache = cache
        dpooled, g_proj = self.projection.backward(pcache, dz)
        denc = weights[:, :, None] * dpooled[:, None, :]
        dseq, g_enc = self.encoder.backward(ecache, denc)
        return dseq, g_enc, g_proj


@dataclass
class ProxyBundle:
    mode: str
    extractor: FeatureExtractor
    head: MLP
    token_embedder: MLP | None = None
    spec_name: str = ""
    history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.head.sizes[0] != self.extractor.d_g:
            raise ShapeError(f"head input {self.head.sizes[0]} != d_g {self.extractor.d_g}")
        if self.mode == "secret":
            if self.token_embedder is None:
                raise ShapeError("secret mode needs a task-token embedder")
            if self.token_embedder.sizes[-1] != self.extractor.d_model:
                raise ShapeError(
                    f"task token width {self.token_embedder.sizes[-1]} != extractor width {self.extractor.d_model}"
                )
        elif self.token_embedder is not None:
            raise ShapeError("simple mode has no task-token embedder")

    @property
    def d_g(self) -> int:
        return self.extractor.d_g

    @property
    def d_model(self) -> int:
        return self.extractor.d_model

    @property
    def d_out(self) -> int:
        return self.head.sizes[-1]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        ex = self.extractor.params()
        ex.arch = {**ex.arch, "mode": self.mode, "spec": self.spec_name}
        save_params(d / "extractor.svip", ex, "extractor")
        save_params(d / "head.svip", self.head.params, "head")
        if self.token_embedder is not None:
            save_params(d / "secret-embedder.svip", self.token_embedder.params, "secret-embedder")

    @classmethod
    def load(cls, directory) -> ProxyBundle:
        d = Path(directory)
        ex = load_params(d / "extractor.svip", "extractor")
        head = MLP(load_params(d / "head.svip", "head"))
        tok = None
        if (d / "secret-embedder.svip").exists():
            tok = MLP(load_params(d / "secret-embedder.svip", "secret-embedder"))
        return cls(ex.arch.get("mode", "secret"), FeatureExtractor.from_params(ex), head, tok, ex.arch.get("spec", ""))


def create_bundle(mode: str, d_model: int, d_out: int, rng: np.random.Generator, d_g: int = 64, d_s: int = 16,
                  extractor_layers: int = 2, n_heads: int = 4, max_len: int = 64, head_hidden: int = 128,
                  token_hidden: int = 64, spec_name: str = "") -> ProxyBundle:
    extractor = FeatureExtractor.create(d_model, d_g, extractor_layers, n_heads, max_len, rng)
    head = MLP.create([d_g, head_hidden, head_hidden, d_out], rng)
    tok = None
    if mode == "secret":
        tok = MLP.create([d_s, token_hidden, token_hidden, token_hidden, d_model], rng)
    return ProxyBundle(mode, extractor, head, tok, spec_name)


# ---------------------------------------------------------------------------
# Provider / user side operations
# ---------------------------------------------------------------------------


def embed_secret(bundle: ProxyBundle, secret_bits: np.ndarray) -> np.ndarray:
    if bundle.mode != "secret" or bundle.token_embedder is None:
        raise ValueError("task tokens exist only in secret mode")
    return bundle.token_embedder(np.asarray(secret_bits, dtype=DTYPE))


def _assemble(task_token, h, mask):
    h = np.asarray(h, dtype=DTYPE)
    single = h.ndim == 2
    if single:
        h = h[None]
    b, L, _ = h.shape
    mask = np.ones((b, L), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(b, L)
    if task_token is None:
        return h, mask, single
    tok = np.broadcast_to(np.atleast_2d(task_token), (b, h.shape[2]))
    seq = np.concatenate([tok[:, None, :], h], axis=1)
    return seq, np.concatenate([np.ones((b, 1), dtype=bool), mask], axis=1), single


def compress_with_cache(extractor: FeatureExtractor, task_token, h, mask=None):
    """``z = g(t (+) h)`` where the task token (if any) is prepended as position 0."""
    h = np.asarray(h)
    if h.shape[-1] != extractor.d_model:
        raise ShapeError(f"hidden width {h.shape[-1]} != extractor width {extractor.d_model}")
    seq, full_mask, single = _assemble(task_token, h, mask)
    z, cache = extractor.forward(seq, full_mask)
    return (z[0] if single else z), cache, single


def compress(extractor: FeatureExtractor | ProxyBundle, task_token, h, mask=None) -> np.ndarray:
    if isinstance(extractor, ProxyBundle):
        if extractor.mode == "secret" and task_token is None:
            raise ValueError("secret mode needs a task token")
        extractor = extractor.extractor
    return compress_with_cache(extractor, task_token, h, mask)[0]


def predict(bundle: ProxyBundle, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    if z.shape[-1] != bundle.d_g:
        raise ShapeError(f"compressed vector length {z.shape[-1]} != d_g {bundle.d_g}")
    return bundle.head(z)


# ---------------------------------------------------------------------------
# Hidden-state cache
# ---------------------------------------------------------------------------


class HiddenStateCache:
    """Runs the specified model once per prompt and keeps the result."""

    def __init__(self, model, ids: np.ndarray, mask: np.ndarray):
        self.model_calls = 0
        self.ids = ids
        self.mask = mask
        self._states: np.ndarray | None = None
        self._model = model

    @property
    def states(self) -> np.ndarray:
        if self._states is None:
            self._states = self._model.hidden_states_batch(self.ids, self.mask)
            self.model_calls += len(self.ids)
        return self._states

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class ProxyConfig:
    d_g: int = 64
    extractor_layers: int = 2
    n_heads: int = 4
    head_hidden: int = 128
    token_hidden: int = 64
    epochs: int = 8
    # the set-of-words head needs longer to drive all bits right at once
    simple_epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 200
    secrets_per_prompt: int = 4


def _smoothed_final(losses: list[float], window: int = 10) -> float:
    tail = losses[-window:]
    return float(np.mean(tail)) if tail else float("nan")


def train_secret_proxy(cache: HiddenStateCache, labeler: LabelingNetwork, config: ProxyConfig,
                       rng: np.random.Generator, spec_name: str = "", val: tuple | None = None,
                       bundle: ProxyBundle | None = None) -> ProxyBundle:
    """Jointly fit extractor, head and token embedder to the frozen labeler.

    Loss is the batch mean of squared L2 distance between ``f(g(t(s) (+) h(x)))``
    and ``y(x, s)``; secrets are resampled for every pass over the data.
    ``val`` is an optional ``(hidden, mask, ids)`` triple for validation tracking.
    """
    H = cache.states
    d_model = H.shape[-1]
    if bundle is None:
        bundle = create_bundle("secret", d_model, labeler.d_y, rng, d_g=config.d_g, d_s=labeler.d_s,
                               extractor_layers=config.extractor_layers, n_heads=config.n_heads,
                               max_len=H.shape[1] + 1, head_hidden=config.head_hidden,
                               token_hidden=config.token_hidden, spec_name=spec_name)
    u_all = labeler.text_embedder(cache.ids, cache.mask)
    n = len(cache)
    sets = bundle.extractor.param_sets + [bundle.head.params, bundle.token_embedder.params]
    opt = Adam(sets, lr=config.lr, weight_decay=config.weight_decay, warmup_steps=config.warmup_steps)
    for epoch in range(config.epochs):
        losses = []
        order = np.concatenate([rng.permutation(n) for _ in range(config.secrets_per_prompt)])
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            bits = sample_secret_bits(len(idx), labeler.d_s, rng)
            target = labeler.from_embeddings(u_all[idx], bits)
            loss, grads = _secret_step(bundle, H[idx], cache.mask[idx], bits, target)
            opt.step(grads)
            losses.append(loss)
        bundle.history.append(_smoothed_final(losses))
        if val is not None:
            bundle.val_history.append(float(honest_distances(bundle, labeler, *val, rng=np.random.default_rng(0)).mean()))
        log.info("proxy[%s] epoch %d loss %.4f", spec_name, epoch, bundle.history[-1])
    return bundle


def _secret_step(bundle: ProxyBundle, h, mask, bits, target):
    tok, tcache = bundle.token_embedder.forward(bits)
    z, zcache, _ = compress_with_cache(bundle.extractor, tok, h, mask)
    pred, hcache = bundle.head.forward(z)
    r = pred - target
    loss = float((r * r).sum(axis=1).mean())
    check_finite(loss, "proxy loss")
    dz, g_head = bundle.head.backward(hcache, 2.0 * r / len(r))
    dseq, g_enc, g_proj = bundle.extractor.backward(zcache, dz)
    _, g_tok = bundle.token_embedder.backward(tcache, dseq[:, 0, :])
    return loss, [g_enc, g_proj, g_head, g_tok]


def honest_distances(bundle: ProxyBundle, labeler: LabelingNetwork, hidden, mask, ids, secret_bits=None,
                     rng: np.random.Generator | None = None, batch: int = 256) -> np.ndarray:
    """``d(x, s)`` for honest hidden states, one secret per prompt."""
    if secret_bits is None:
        secret_bits = sample_secret_bits(len(ids), labeler.d_s, rng or np.random.default_rng(0))
    out = np.empty(len(ids))
    for i in range(0, len(ids), batch):
        sl = slice(i, i + batch)
        tok = embed_secret(bundle, secret_bits[sl])
        z = compress(bundle.extractor, tok, hidden[sl], mask[sl])
        y = labeler.label_batch(ids[sl], mask[sl], secret_bits[sl])
        out[sl] = np.linalg.norm(predict(bundle, z) - y, axis=1)
    return out


def train_simple_proxy(cache: HiddenStateCache, vocab: list[int], config: ProxyConfig, rng: np.random.Generator,
                       spec_name: str = "", bundle: ProxyBundle | None = None) -> ProxyBundle:
    """Fit extractor and head to set-of-words labels with per-bit cross-entropy."""
    H = cache.states
    if bundle is None:
        bundle = create_bundle("simple", H.shape[-1], len(vocab), rng, d_g=config.d_g,
                               extractor_layers=config.extractor_layers, n_heads=config.n_heads,
                               max_len=H.shape[1], head_hidden=config.head_hidden, spec_name=spec_name)
    labels = sow_labels_batch(cache.ids, cache.mask, vocab)
    n = len(cache)
    sets = bundle.extractor.param_sets + [bundle.head.params]
    opt = Adam(sets, lr=config.lr, weight_decay=config.weight_decay, warmup_steps=config.warmup_steps)
    for epoch in range(config.simple_epochs):
        losses = []
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            z, zcache, _ = compress_with_cache(bundle.extractor, None, H[idx], cache.mask[idx])
            logits, hcache = bundle.head.forward(z)
            loss, dlogits = bce_with_logits(logits, labels[idx])
            check_finite(loss, "simple proxy loss")
            dz, g_head = bundle.head.backward(hcache, dlogits)
            _, g_enc, g_proj = bundle.extractor.backward(zcache, dz)
            opt.step([g_enc, g_proj, g_head])
            losses.append(loss)
        bundle.history.append(_smoothed_final(losses))
        log.info("simple proxy[%s] epoch %d loss %.4f", spec_name, epoch, bundle.history[-1])
    return bundle


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over examples of the summed per-bit binary cross-entropy."""
    n = logits.shape[0]
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return float(loss.sum() / n), (sigmoid(logits) - targets) / n


def sow_predict(bundle: ProxyBundle, z: np.ndarray) -> np.ndarray:
    """Binary prediction of the simple-mode head (logit > 0)."""
    return (predict(bundle, z) > 0).astype(DTYPE)
