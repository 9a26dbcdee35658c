"""Prompts, byte-level tokenization, dataset splits and secret sampling."""

from __future__ import annotations

import math
import unicodedata
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD_ID = 256
UNK_ID = 257
VOCAB_SIZE = 258


@dataclass(frozen=True)
class Prompt:
    text: str
    source_id: str = ""

    @property
    def is_empty(self) -> bool:
        return not self.text


def normalize_text(text: str) -> str:
    return " ".join(unicodedata.normalize("NFC", text).split())


def make_prompt(text: str, source_id: str = "") -> Prompt:
    return Prompt(normalize_text(text), source_id)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray  # int64, length T
    mask: np.ndarray  # bool, True on real tokens

    def __post_init__(self):
        if self.ids.shape != self.mask.shape or self.ids.ndim != 1:
            raise ValueError("ids and mask must be equal-length vectors")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())

    def real_ids(self) -> np.ndarray:
        return self.ids[: self.n_real]


def tokenize_and_pad(prompt: Prompt | str, T: int) -> TokenSequence:
    """UTF-8 bytes truncated or padded to exactly ``T`` positions."""
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    text = prompt.text if isinstance(prompt, Prompt) else prompt
    raw = text.encode("utf-8", errors="surrogateescape")[:T]
    ids = np.full(T, PAD_ID, dtype=np.int64)
    ids[: len(raw)] = np.frombuffer(raw, dtype=np.uint8)
    mask = np.zeros(T, dtype=bool)
    mask[: len(raw)] = True
    return TokenSequence(ids, mask)


def detokenize(seq: TokenSequence) -> str:
    return bytes(seq.real_ids().astype(np.uint8)).decode("utf-8", errors="surrogateescape")


def encode_batch(prompts: list[Prompt], T: int) -> tuple[np.ndarray, np.ndarray]:
    """Token ids ``(N, T)`` and masks ``(N, T)`` for a prompt list."""
    seqs = [tokenize_and_pad(p, T) for p in prompts]
    if not seqs:
        return np.zeros((0, T), dtype=np.int64), np.zeros((0, T), dtype=bool)
    return np.stack([s.ids for s in seqs]), np.stack([s.mask for s in seqs])


# ---------------------------------------------------------------------------
# Corpus I/O and synthetic generation
# ---------------------------------------------------------------------------


def read_corpus(path: str | Path) -> list[Prompt]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [make_prompt(line, f"{Path(path).name}:{i}") for i, line in enumerate(lines)]


def write_corpus(path: str | Path, prompts: list[Prompt]) -> None:
    body = "".join(p.text.replace("\n", " ") + "\n" for p in prompts)
    Path(path).write_bytes(body.encode("utf-8"))


_ALPHABET = "abcdefghijklmnopqrstuvwxyz ,.?"


def generate_synthetic_corpus(
    n: int,
    rng: np.random.Generator,
    n_topics: int = 12,
    min_len: int = 8,
    max_len: int = 60,
    concentration: float = 0.15,
) -> list[Prompt]:
    """Seeded Markov babble: each topic is a first-order chain over a small alphabet.

    Sparse Dirichlet transition rows make topics statistically distinct, so
    prompts from different topics have visibly different byte content.
    """
    k = len(_ALPHABET)
    chains = []
    for _ in range(n_topics):
        start = rng.dirichlet(np.full(k, concentration))
        trans = rng.dirichlet(np.full(k, concentration), size=k)
        chains.append((start, trans))
    prompts = []
    for i in range(n):
        t = int(rng.integers(n_topics))
        start, trans = chains[t]
        length = int(rng.integers(min_len, max_len + 1))
        c = int(rng.choice(k, p=start))
        out = [c]
        for _ in range(length - 1):
            c = int(rng.choice(k, p=trans[c]))
            out.append(c)
        text = "".join(_ALPHABET[j] for j in out)
        prompt = make_prompt(text, f"synthetic:{i}:topic{t}")
        if prompt.is_empty:
            prompt = Prompt(_ALPHABET[out[0]] if _ALPHABET[out[0]].strip() else "a", prompt.source_id)
        prompts.append(prompt)
    return prompts


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: list[int]
    validation: list[int]
    test: list[int]
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": self.train, "validation": self.validation, "test": self.test}

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSplit:
        return cls(list(d["train"]), list(d["validation"]), list(d["test"]), int(d["seed"]))


def split_dataset(n_items: int, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    if n_items < 3:
        raise ValueError(f"need at least 3 items to split, got {n_items}")
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    perm = np.random.default_rng(seed).permutation(n_items)
    n_train = int(round(ratios[0] * n_items))
    n_val = int(round(ratios[1] * n_items))
    n_train = min(n_train, n_items)
    n_val = min(n_val, n_items - n_train)
    return DatasetSplit(
        train=sorted(perm[:n_train].tolist()),
        validation=sorted(perm[n_train : n_train + n_val].tolist()),
        test=sorted(perm[n_train + n_val :].tolist()),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Secrets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Secret:
    bits: tuple[int, ...]

    def __post_init__(self):
        if not self.bits or any(b not in (0, 1) for b in self.bits):
            raise ValueError("secret bits must be a non-empty 0/1 vector")

    @property
    def d_s(self) -> int:
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.float64)

    def to_hex(self) -> str:
        """Lowercase hex, ceil(d_s/4) digits, most significant bit first."""
        value = 0
        for b in self.bits:
            value = (value << 1) | b
        return format(value, f"0{math.ceil(self.d_s / 4)}x")

    @classmethod
    def from_hex(cls, text: str, d_s: int) -> Secret:
        value = int(text, 16)
        if value >> d_s:
            raise ValueError(f"hex {text!r} does not fit in {d_s} bits")
        return cls(tuple((value >> (d_s - 1 - i)) & 1 for i in range(d_s)))


def sample_secret(d_s: int, rng: np.random.Generator) -> Secret:
    if d_s < 1:
        raise ValueError(f"d_s must be >= 1, got {d_s}")
    return Secret(tuple(int(b) for b in rng.integers(0, 2, size=d_s)))


def sample_secret_bits(n: int, d_s: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, d_s)`` float array of i.i.d. fair bits, for batched training."""
    return rng.integers(0, 2, size=(n, d_s)).astype(np.float64)


def sample_distinct_pairs(n: int, d_s: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two ``(n, d_s)`` secret batches with every row pair different."""
    a = sample_secret_bits(n, d_s, rng)
    b = sample_secret_bits(n, d_s, rng)
    same = np.all(a == b, axis=1)
    while same.any():
        b[same] = sample_secret_bits(int(same.sum()), d_s, rng)
        same = np.all(a == b, axis=1)
    return a, b
