"""Self-labeling functions: set-of-words labels and the secret-conditioned labeler."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import PAD_ID, VOCAB_SIZE, Secret, TokenSequence, sample_distinct_pairs
from .numerics import (
    DTYPE,
    MLP,
    Adam,
    ParameterSet,
    check_finite,
    load_params,
    save_params,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Set-of-words
# ---------------------------------------------------------------------------


def sow_label(x: TokenSequence, vocab: list[int]) -> np.ndarray:
    if not vocab:
        raise ValueError("SoW vocabulary must be non-empty")
    present = set(x.real_ids().tolist())
    return np.array([1.0 if t in present else 0.0 for t in vocab], dtype=DTYPE)


def sow_labels_batch(ids: np.ndarray, mask: np.ndarray, vocab: list[int]) -> np.ndarray:
    onehot = np.zeros((ids.shape[0], VOCAB_SIZE + 1), dtype=bool)
    rows = np.repeat(np.arange(ids.shape[0]), ids.shape[1])
    onehot[rows, np.where(mask, ids, VOCAB_SIZE).reshape(-1)] = True
    return onehot[:, vocab].astype(DTYPE)


def top_k_vocab(ids: np.ndarray, mask: np.ndarray, k: int = 100) -> list[int]:
    """The ``k`` most frequent real tokens, ties broken by token id."""
    counts = Counter(ids[mask].tolist())
    counts.pop(PAD_ID, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in ranked[:k]]


# ---------------------------------------------------------------------------
# Text embedder u(x)
# ---------------------------------------------------------------------------


class TextEmbedder:
    """Frozen stand-in sentence embedder: mean-pooled token embedding, 2-layer MLP, unit norm."""

    def __init__(self, params: ParameterSet):
        self.params = params
        sizes = params.arch["sizes"]
        mlp_ps = ParameterSet(
            {"kind": "mlp", "sizes": sizes, "activation": "gelu", "output_activation": "linear", "dropout": 0.0},
            {k[4:]: v for k, v in params.tensors.items() if k.startswith("mlp.")},
        )
        self.mlp = MLP(mlp_ps)
        self.scale = float(params.arch.get("scale", 1.0))

    @classmethod
    def create(cls, rng: np.random.Generator, d_embed: int = 64, d_out: int = 64, scale: float = 1.0) -> TextEmbedder:
        E = rng.normal(0.0, 1.0, size=(VOCAB_SIZE, d_embed))
        mlp = MLP.create([d_embed, 2 * d_embed, d_out], rng)
        arch = {"kind": "text-embedder", "vocab": VOCAB_SIZE, "sizes": mlp.sizes, "scale": scale}
        ps = ParameterSet(arch, {"E": E})
        for k, v in mlp.params.tensors.items():
            ps["mlp." + k] = v
        return cls(ps)

    @property
    def d_out(self) -> int:
        return self.mlp.sizes[-1]

    def __call__(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        ids = np.atleast_2d(ids)
        mask = np.atleast_2d(mask).astype(DTYPE)
        counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        pooled = np.einsum("bl,bld->bd", mask, self.params["E"][ids]) / counts
        out = self.mlp(pooled)
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        return self.scale * out / np.maximum(norm, 1e-12)


# ---------------------------------------------------------------------------
# Labeling network y(x, s)
# ---------------------------------------------------------------------------


@dataclass
class LabelingNetwork:
    text_embedder: TextEmbedder
    secret_embedder: MLP
    combiner: MLP
    seed: int = 0
    trained: bool = False
    history: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, d_s: int, d_y: int, rng: np.random.Generator, seed: int = 0, d_text: int = 64,
               d_secret: int = 64, hidden: int = 128, text_scale: float = 1.0,
               output_activation: str = "linear") -> LabelingNetwork:
        text = TextEmbedder.create(rng, d_embed=d_text, d_out=d_text, scale=text_scale)
        sec = MLP.create([d_s, d_secret, d_secret], rng)
        comb = MLP.create([d_text + d_secret, hidden, hidden, d_y], rng, output_activation=output_activation)
        return cls(text, sec, comb, seed=seed)

    @property
    def d_y(self) -> int:
        return self.combiner.sizes[-1]

    @property
    def d_s(self) -> int:
        return self.secret_embedder.sizes[0]

    def from_embeddings(self, u: np.ndarray, secret_bits: np.ndarray) -> np.ndarray:
        e = self.secret_embedder(secret_bits)
        return self.combiner(np.concatenate([u, e], axis=-1))

    def label_batch(self, ids: np.ndarray, mask: np.ndarray, secret_bits: np.ndarray) -> np.ndarray:
        u = self.text_embedder(ids, mask)
        bits = np.broadcast_to(np.atleast_2d(secret_bits), (u.shape[0], self.d_s))
        return self.from_embeddings(u, bits)

    def save(self, directory) -> None:
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for part, ps in self._parts().items():
            ps.arch = {**ps.arch, "labeler_part": part, "seed": self.seed, "trained": self.trained}
            save_params(d / f"labeler-{part}.svip", ps, "labeler")

    @classmethod
    def load(cls, directory) -> LabelingNetwork:
        from pathlib import Path

        d = Path(directory)
        text = TextEmbedder(load_params(d / "labeler-text.svip", "labeler"))
        sec = load_params(d / "labeler-secret.svip", "labeler")
        comb = load_params(d / "labeler-combiner.svip", "labeler")
        return cls(text, MLP(sec), MLP(comb), seed=int(sec.arch.get("seed", 0)), trained=bool(sec.arch.get("trained")))

    def _parts(self) -> dict[str, ParameterSet]:
        return {"text": self.text_embedder.params, "secret": self.secret_embedder.params, "combiner": self.combiner.params}


def label(net: LabelingNetwork, x: TokenSequence, s: Secret) -> np.ndarray:
    return net.label_batch(x.ids[None], x.mask[None], s.as_array()[None])[0]


def _norm_grad(diff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(diff, axis=1)
    return n, diff / np.maximum(n, 1e-12)[:, None]


def labeler_loss_and_grads(net: LabelingNetwork, u: np.ndarray, s1: np.ndarray, s2: np.ndarray,
                           perm: np.ndarray, w: float):
    """Contrastive secret term plus the anti-collapse prompt term, with gradients.

    Returns ``(loss, (secret_term, prompt_term), grads_secret_embedder, grads_combiner)``.
    """
    B = u.shape[0]
    e_all, e_cache = net.secret_embedder.forward(np.concatenate([s1, s2], axis=0))
    e1, e2 = e_all[:B], e_all[B:]
    u_p = u[perm]
    inp = np.concatenate(
        [np.concatenate([u, e1], 1), np.concatenate([u, e2], 1), np.concatenate([u_p, e1], 1)], axis=0
    )
    y_all, c_cache = net.combiner.forward(inp)
    y1, y2, y3 = y_all[:B], y_all[B : 2 * B], y_all[2 * B :]

    d12, g12 = _norm_grad(y1 - y2)
    d13, g13 = _norm_grad(y1 - y3)
    target = np.linalg.norm(u - u_p, axis=1)
    secret_term = float(d12.mean())
    prompt_term = float(np.abs(d13 - target).mean())
    loss = -w * secret_term + (1.0 - w) * prompt_term
    check_finite(loss, "labeler loss")

    dy1 = -w * g12 / B
    dy2 = w * g12 / B
    sgn = np.sign(d13 - target)[:, None]
    dy1 = dy1 + (1.0 - w) * sgn * g13 / B
    dy3 = -(1.0 - w) * sgn * g13 / B
    d_inp, g_comb = net.combiner.backward(c_cache, np.concatenate([dy1, dy2, dy3], axis=0))
    d_u = u.shape[1]
    de1 = d_inp[:B, d_u:] + d_inp[2 * B :, d_u:]
    de2 = d_inp[B : 2 * B, d_u:]
    _, g_sec = net.secret_embedder.backward(e_cache, np.concatenate([de1, de2], axis=0))
    return loss, (secret_term, prompt_term), g_sec, g_comb


@dataclass
class LabelerConfig:
    d_s: int = 16
    d_y: int = 32
    w: float = 0.5
    epochs: int = 6
    batch_size: int = 256
    lr: float = 3e-4
    weight_decay: float = 0.01
    secrets_per_prompt: int = 2
    # prompt-dependent label spread must exceed honest proxy error, or replayed answers pass
    text_scale: float = 10.0
    output_activation: str = "linear"


def train_labeling_network(ids: np.ndarray, mask: np.ndarray, config: LabelerConfig, rng: np.random.Generator,
                           seed: int = 0, net: LabelingNetwork | None = None) -> LabelingNetwork:
    """Train secret embedder and combiner; the text embedder stays frozen."""
    if not 0.0 <= config.w <= 1.0:
        raise ValueError(f"w must lie in [0, 1], got {config.w}")
    if net is None:
        net = LabelingNetwork.create(config.d_s, config.d_y, rng, seed=seed, text_scale=config.text_scale,
                                     output_activation=config.output_activation)
    u_all = net.text_embedder(ids, mask)
    n = u_all.shape[0]
    opt = Adam([net.secret_embedder.params, net.combiner.params], lr=config.lr, weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        losses = []
        # each prompt appears once per secret pairing slot
        order = np.concatenate([rng.permutation(n) for _ in range(max(1, config.secrets_per_prompt // 2))])
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            u = u_all[idx]
            s1, s2 = sample_distinct_pairs(len(idx), config.d_s, rng)
            perm = np.roll(np.arange(len(idx)), 1 + int(rng.integers(len(idx) - 1)))
            loss, _, g_sec, g_comb = labeler_loss_and_grads(net, u, s1, s2, perm, config.w)
            opt.step([g_sec, g_comb])
            losses.append(loss)
        net.history.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("labeler epoch %d loss %.4f", epoch, net.history[-1])
    net.trained = net.trained or config.epochs > 0
    return net


def secret_pair_distances(net: LabelingNetwork, ids: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                          pairs_per_prompt: int = 30) -> np.ndarray:
    """``||y(x,s) - y(x,s')||`` for ``pairs_per_prompt`` distinct-secret pairs per prompt."""
    u = net.text_embedder(ids, mask)
    u_rep = np.repeat(u, pairs_per_prompt, axis=0)
    s1, s2 = sample_distinct_pairs(u_rep.shape[0], net.d_s, rng)
    return np.linalg.norm(net.from_embeddings(u_rep, s1) - net.from_embeddings(u_rep, s2), axis=1)


def estimate_delta(net: LabelingNetwork, ids: np.ndarray, mask: np.ndarray, eta: float, rng: np.random.Generator,
                   pairs_per_prompt: int = 30) -> float:
    """Fraction of same-prompt, different-secret label pairs at distance >= eta."""
    if len(ids) == 0:
        raise ValueError("estimate_delta needs a non-empty test set")
    d = secret_pair_distances(net, ids, mask, rng, pairs_per_prompt)
    return float(np.mean(d >= eta))
