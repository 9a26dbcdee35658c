"""Threshold calibration, per-query verification and FNR/FPR evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Secret, TokenSequence
from .labeling import LabelingNetwork, label
from .proxy import ProxyBundle, compress, embed_secret, predict

MIN_CALIBRATION = 20


@dataclass(frozen=True)
class Threshold:
    eta: float
    percentile: float
    n: int
    bundle_id: str = ""
    distances: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "percentile": self.percentile,
            "n": self.n,
            "bundle_id": self.bundle_id,
            "distances": list(self.distances),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Threshold:
        return cls(float(d["eta"]), float(d["percentile"]), int(d["n"]), d.get("bundle_id", ""),
                   tuple(float(x) for x in d.get("distances", ())))


def nearest_rank(values, percentile: float) -> float:
    """Smallest sample value with at least ``percentile`` of the samples at or below it."""
    xs = np.sort(np.asarray(values, dtype=float))
    rank = max(1, math.ceil(percentile * len(xs) - 1e-9))
    return float(xs[rank - 1])


def calibrate_threshold(distances, percentile: float = 0.95, bundle_id: str = "") -> Threshold:
    d = [float(x) for x in distances]
    if len(d) < MIN_CALIBRATION:
        raise ValueError(f"need at least {MIN_CALIBRATION} calibration distances, got {len(d)}")
    if not 0.0 < percentile <= 1.0:
        raise ValueError(f"percentile must lie in (0, 1], got {percentile}")
    if min(d) < 0:
        raise ValueError("distances must be non-negative")
    return Threshold(nearest_rank(d, percentile), percentile, len(d), bundle_id, tuple(d))


@dataclass(frozen=True)
class VerificationOutcome:
    bit: int
    distance: float
    query_id: str = ""
    secret_id: str = ""


def accept(distance: float, eta: float) -> int:
    return int(distance <= eta)


def verify_query(bundle: ProxyBundle, labeler: LabelingNetwork, x: TokenSequence, s: Secret, z: np.ndarray,
                 eta: float, query_id: str = "", secret_id: str = "") -> VerificationOutcome:
    """User side: ``V = 1`` iff ``||f(z) - y(x, s)|| <= eta``."""
    if s.d_s != labeler.d_s:
        raise ValueError(f"secret has {s.d_s} bits, labeler expects {labeler.d_s}")
    if bundle.d_out != labeler.d_y:
        raise ValueError(f"head output {bundle.d_out} != label dimension {labeler.d_y}")
    d = float(np.linalg.norm(predict(bundle, z) - label(labeler, x, s)))
    return VerificationOutcome(accept(d, eta), d, query_id, secret_id or s.to_hex())


def distances_for(bundle: ProxyBundle, labeler: LabelingNetwork, hidden: np.ndarray, mask: np.ndarray,
                  ids: np.ndarray, secret_bits: np.ndarray, batch: int = 512) -> np.ndarray:
    """Vectorised ``d(x, s)`` for rows of (hidden states, prompt, secret)."""
    out = np.empty(len(ids))
    for i in range(0, len(ids), batch):
        sl = slice(i, i + batch)
        z = compress(bundle.extractor, embed_secret(bundle, secret_bits[sl]), hidden[sl], mask[sl])
        y = labeler.label_batch(ids[sl], mask[sl], secret_bits[sl])
        out[sl] = np.linalg.norm(predict(bundle, z) - y, axis=1)
    return out


# ---------------------------------------------------------------------------
# Histograms and reports
# ---------------------------------------------------------------------------


@dataclass
class Histogram:
    edges: list[float]
    counts: list[int]
    threshold: float | None = None

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            w.writerow([f"{lo:.6g}", f"{hi:.6g}", c])
        return buf.getvalue()


def distance_distribution(distances, eta: float | None = None, bins: int = 40,
                          upper: float | None = None) -> Histogram:
    d = np.asarray(distances, dtype=float)
    hi = float(upper if upper is not None else (d.max() if d.size else 1.0))
    hi = hi if hi > 0 else 1.0
    counts, edges = np.histogram(np.minimum(d, hi), bins=bins, range=(0.0, hi))
    return Histogram([float(e) for e in edges], [int(c) for c in counts], eta)


def roc_auc(honest, dishonest) -> float:
    """P(dishonest distance > honest distance), ties counted half (Mann-Whitney)."""
    from scipy.stats import rankdata

    h = np.asarray(honest, dtype=float)
    o = np.asarray(dishonest, dtype=float)
    ranks = rankdata(np.concatenate([h, o]))
    r_o = ranks[len(h):].sum()
    return float((r_o - len(o) * (len(o) + 1) / 2) / (len(h) * len(o)))


@dataclass
class EvalReport:
    specified_model: str
    eta: float
    fnr: float
    fpr: dict[str, float]
    auc: dict[str, float]
    n_samples: dict[str, int]
    medians: dict[str, float]
    histograms: dict[str, Histogram] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "specified_model": self.specified_model,
            "eta": self.eta,
            "fnr": self.fnr,
            "fpr": self.fpr,
            "auc": self.auc,
            "n_samples": self.n_samples,
            "medians": self.medians,
            "histograms": {k: {"edges": h.edges, "counts": h.counts} for k, h in self.histograms.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def summarize_scenarios(specified_model: str, eta: float, distances: dict[str, np.ndarray],
                        bins: int = 40) -> EvalReport:
    """Build an EvalReport from per-scenario distance samples; ``honest`` is required."""
    honest = np.asarray(distances["honest"])
    upper = float(max(np.percentile(np.asarray(d), 99) for d in distances.values()))
    fpr, auc, hists, n, med = {}, {}, {}, {}, {}
    for name, d in distances.items():
        d = np.asarray(d)
        n[name] = int(d.size)
        med[name] = float(np.median(d))
        hists[name] = distance_distribution(d, eta, bins, upper)
        if name != "honest":
            fpr[name] = float(np.mean(d <= eta))
            auc[name] = roc_auc(honest, d)
    return EvalReport(specified_model, float(eta), float(np.mean(honest > eta)), fpr, auc, n, med, hists)
