"""Seeded stand-in language models that expose last-layer hidden states.

Each stand-in is a frozen, randomly initialised transformer encoder over the
byte vocabulary. Different seeds give different representation distributions,
which is all the verification protocol relies on.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .corpus import VOCAB_SIZE, TokenSequence
from .numerics import DTYPE, ParameterSet, ShapeError, TransformerEncoder

ROLES = ("specified", "alternative")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    d_model: int
    depth: int
    seed: int
    family: str = "toy"
    role: str = "specified"
    n_heads: int = 4
    max_len: int = 64

    def __post_init__(self):
        if self.d_model < 1 or self.depth < 1:
            raise ValueError(f"{self.name}: d_model and depth must be >= 1")
        if self.role not in ROLES:
            raise ValueError(f"{self.name}: role must be one of {ROLES}, got {self.role!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def default_roster(d_spec: int = 64) -> list[ModelSpec]:
    """Two specified models and three smaller alternatives."""
    return [
        ModelSpec("spec-a", d_spec, 3, seed=1001, family="toy-a", role="specified"),
        ModelSpec("spec-b", d_spec, 4, seed=1002, family="toy-b", role="specified"),
        ModelSpec("alt-small", 32, 2, seed=2001, family="toy-a", role="alternative"),
        ModelSpec("alt-mid", 48, 2, seed=2002, family="toy-b", role="alternative"),
        ModelSpec("alt-matched", d_spec, 2, seed=2003, family="toy-c", role="alternative"),
    ]


def validate_roster(roster: list[ModelSpec]) -> None:
    names = [m.name for m in roster]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate model names in roster: {names}")
    if not any(m.role == "specified" for m in roster):
        raise ValueError("roster needs at least one specified model")


class StandInModel:
    """Frozen random transformer; ``hidden_states`` is pure given (spec, tokens)."""

    def __init__(self, spec: ModelSpec, params: ParameterSet | None = None, embedding: np.ndarray | None = None):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        emb = rng.normal(0.0, 1.0, size=(VOCAB_SIZE, spec.d_model))
        enc = TransformerEncoder.create(
            spec.d_model, spec.depth, spec.n_heads, 2 * spec.d_model, spec.max_len, rng
        )
        self.embedding = emb if embedding is None else np.asarray(embedding, dtype=DTYPE)
        self.encoder = enc if params is None else TransformerEncoder(params)

    @property
    def num_params(self) -> int:
        return self.encoder.params.num_params() + self.embedding.size

    def embed(self, ids: np.ndarray) -> np.ndarray:
        return self.embedding[ids]

    def hidden_states_batch(self, ids: np.ndarray, mask: np.ndarray, chunk: int = 256) -> np.ndarray:
        ids = np.asarray(ids)
        out = np.empty((ids.shape[0], ids.shape[1], self.spec.d_model), dtype=DTYPE)
        for i in range(0, ids.shape[0], chunk):
            out[i : i + chunk] = self.encoder(self.embed(ids[i : i + chunk]), mask[i : i + chunk])
        return out

    def hidden_states(self, tokens: TokenSequence) -> np.ndarray:
        return self.hidden_states_batch(tokens.ids[None], tokens.mask[None])[0]

    def compute_units(self, T: int) -> float:
        """Rough per-query cost: two flops per parameter per position."""
        return 2.0 * self.encoder.params.num_params() * T


@lru_cache(maxsize=32)
def instantiate(spec: ModelSpec) -> StandInModel:
    return StandInModel(spec)


def hidden_states(spec: ModelSpec, tokens: TokenSequence) -> np.ndarray:
    return instantiate(spec).hidden_states(tokens)


# ---------------------------------------------------------------------------
# Dimension alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProjectionMatrix:
    W: np.ndarray  # (d_alt, d_spec)
    seed: int

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]


def pair_seed(base_seed: int, source: str, target: str) -> int:
    return int(zlib.crc32(f"{base_seed}:{source}->{target}".encode()))


def sample_projection(d_alt: int, d_spec: int, seed: int) -> ProjectionMatrix:
    """Standard-normal ``W`` mapping alternative width onto specified width."""
    return ProjectionMatrix(np.random.default_rng(seed).standard_normal((d_alt, d_spec)), seed)


def align_dims(h: np.ndarray, W: ProjectionMatrix) -> np.ndarray:
    h = np.asarray(h, dtype=DTYPE)
    if h.shape[-1] != W.d_in:
        raise ShapeError(f"hidden width {h.shape[-1]} does not match projection input {W.d_in}")
    return h @ W.W


def projection_for(alt: ModelSpec, spec: ModelSpec, base_seed: int) -> ProjectionMatrix | None:
    """The fixed projection for an (alternative, specified) pair, or None when widths match."""
    if alt.d_model == spec.d_model:
        return None
    return sample_projection(alt.d_model, spec.d_model, pair_seed(base_seed, alt.name, spec.name))


def mean_cosine(h_a: np.ndarray, h_b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean per-position cosine similarity of two equal-shape hidden-state stacks."""
    num = (h_a * h_b).sum(-1)
    den = np.linalg.norm(h_a, axis=-1) * np.linalg.norm(h_b, axis=-1) + 1e-12
    cos = num / den
    if mask is not None:
        return float(cos[mask].mean())
    return float(cos.mean())
