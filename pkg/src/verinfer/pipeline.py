"""Platform-side pipeline: corpus, labeler, per-model proxy bundles, thresholds, evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, substream
from .corpus import DatasetSplit, Prompt, encode_batch, generate_synthetic_corpus, read_corpus, sample_secret_bits, split_dataset, write_corpus
from .labeling import LabelingNetwork, top_k_vocab, train_labeling_network
from .models import ModelSpec, align_dims, instantiate, projection_for
from .numerics import dumps_params
from .proxy import HiddenStateCache, ProxyBundle, train_secret_proxy, train_simple_proxy
from .verify import EvalReport, Threshold, calibrate_threshold, distances_for, summarize_scenarios

log = logging.getLogger(__name__)


class StackInconsistency(RuntimeError):
    """Artifacts that do not belong to one training run (or are missing)."""


def bundle_id(bundle: ProxyBundle) -> str:
    h = hashlib.sha256()
    h.update(dumps_params(bundle.extractor.params(), "extractor"))
    h.update(dumps_params(bundle.head.params, "head"))
    if bundle.token_embedder is not None:
        h.update(dumps_params(bundle.token_embedder.params, "secret-embedder"))
    return h.hexdigest()[:16]


@dataclass
class Stack:
    config: ExperimentConfig
    prompts: list[Prompt]
    ids: np.ndarray
    mask: np.ndarray
    split: DatasetSplit
    labeler: LabelingNetwork | None = None
    bundles: dict[str, ProxyBundle] = field(default_factory=dict)
    simple_bundles: dict[str, ProxyBundle] = field(default_factory=dict)
    thresholds: dict[str, Threshold] = field(default_factory=dict)
    vocab: list[int] = field(default_factory=list)
    hidden_calls: dict[str, int] = field(default_factory=dict)

    def part(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(getattr(self.split, which), dtype=int)
        return self.ids[idx], self.mask[idx]

    def check(self) -> None:
        if self.labeler is None:
            raise StackInconsistency("labeler missing")
        for name, b in self.bundles.items():
            if b.d_out != self.labeler.d_y or b.token_embedder.sizes[0] != self.labeler.d_s:
                raise StackInconsistency(f"bundle {name} does not match the labeler dimensions")
            th = self.thresholds.get(name)
            if th is not None and th.bundle_id != bundle_id(b):
                raise StackInconsistency(f"threshold for {name} was calibrated on a different bundle")


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------


def build_corpus(cfg: ExperimentConfig) -> Stack:
    c = cfg.corpus
    if c.path:
        prompts = read_corpus(c.path)
    else:
        prompts = generate_synthetic_corpus(c.n_prompts, substream(cfg.seed, "corpus"), n_topics=c.n_topics)
    ids, mask = encode_batch(prompts, c.T)
    split = split_dataset(len(prompts), c.ratios, seed=int(substream(cfg.seed, "split").integers(2**31)))
    return Stack(cfg, prompts, ids, mask, split)


def train_labeler(stack: Stack) -> LabelingNetwork:
    ids, mask = stack.part("train")
    stack.labeler = train_labeling_network(ids, mask, stack.config.labeler, substream(stack.config.seed, "init:labeler"),
                                           seed=stack.config.seed)
    return stack.labeler


def train_proxy(stack: Stack, spec: ModelSpec, mode: str = "secret") -> ProxyBundle:
    cfg = stack.config
    ids, mask = stack.part("train")
    model = instantiate(spec)
    cache = HiddenStateCache(model, ids, mask)
    rng = substream(cfg.seed, f"init:proxy:{mode}:{spec.name}")
    if mode == "secret":
        if stack.labeler is None:
            raise StackInconsistency("train the labeler before the secret proxy")
        bundle = train_secret_proxy(cache, stack.labeler, cfg.proxy, rng, spec.name)
        stack.bundles[spec.name] = bundle
        stack.thresholds.pop(spec.name, None)
    else:
        if not stack.vocab:
            stack.vocab = top_k_vocab(ids, mask, 100)
        bundle = train_simple_proxy(cache, stack.vocab, cfg.proxy, rng, spec.name)
        stack.simple_bundles[spec.name] = bundle
    stack.hidden_calls[f"{mode}:{spec.name}"] = cache.model_calls
    return bundle


def _per_secret_distances(bundle, labeler, hidden, mask, ids, n_secrets, rng):
    """Distances for ``n_secrets`` independent secrets per prompt, secret-major order."""
    out = []
    for _ in range(n_secrets):
        bits = sample_secret_bits(len(ids), labeler.d_s, rng)
        out.append(distances_for(bundle, labeler, hidden, mask, ids, bits))
    return np.concatenate(out)


def calibrate(stack: Stack, spec: ModelSpec) -> Threshold:
    cfg = stack.config
    bundle = stack.bundles[spec.name]
    ids, mask = stack.part("validation")
    hidden = instantiate(spec).hidden_states_batch(ids, mask)
    d = _per_secret_distances(bundle, stack.labeler, hidden, mask, ids, cfg.eval_secrets,
                              substream(cfg.seed, f"secrets:calibrate:{spec.name}"))
    th = calibrate_threshold(d, cfg.percentile, bundle_id(bundle))
    stack.thresholds[spec.name] = th
    return th


def scenario_hidden(stack: Stack, spec: ModelSpec, scenario: str, ids, mask, rng=None) -> np.ndarray:
    """Hidden states a provider following ``scenario`` would feed to the extractor."""
    if scenario == "honest":
        return instantiate(spec).hidden_states_batch(ids, mask)
    if scenario == "random":
        return (rng or np.random.default_rng(0)).standard_normal((len(ids), ids.shape[1], spec.d_model))
    alt = stack.config.spec(scenario)
    h = instantiate(alt).hidden_states_batch(ids, mask)
    W = projection_for(alt, spec, stack.config.seed)
    return h if W is None else align_dims(h, W)


def evaluate(stack: Stack, spec: ModelSpec, which: str = "test") -> tuple[EvalReport, dict[str, np.ndarray]]:
    cfg = stack.config
    stack.check()
    bundle = stack.bundles[spec.name]
    eta = stack.thresholds[spec.name].eta
    ids, mask = stack.part(which)
    scenarios = ["honest"] + [m.name for m in cfg.alternatives] + ["random"]
    dists = {}
    for sc in scenarios:
        hidden = scenario_hidden(stack, spec, sc, ids, mask, substream(cfg.seed, f"random-provider:{spec.name}"))
        # identical secrets across scenarios: paired comparison
        rng = substream(cfg.seed, f"secrets:eval:{which}:{spec.name}")
        dists[sc] = _per_secret_distances(bundle, stack.labeler, hidden, mask, ids, cfg.eval_secrets, rng)
    return summarize_scenarios(spec.name, eta, dists), dists


def train_all(cfg: ExperimentConfig, simple: bool = False) -> Stack:
    stack = build_corpus(cfg)
    train_labeler(stack)
    for spec in cfg.specified:
        train_proxy(stack, spec, "secret")
        calibrate(stack, spec)
        if simple:
            train_proxy(stack, spec, "simple")
    return stack


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_stack(stack: Stack, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(out / "corpus.txt", stack.prompts)
    (out / "split.json").write_text(json.dumps(stack.split.to_dict()), encoding="utf-8")
    (out / "config.json").write_text(json.dumps(stack.config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    if stack.labeler is not None:
        stack.labeler.save(out / "labeler")
    for name, b in stack.bundles.items():
        b.save(out / "proxy" / name)
    for name, b in stack.simple_bundles.items():
        b.save(out / "simple" / name)
    if stack.vocab:
        (out / "vocab.json").write_text(json.dumps(stack.vocab), encoding="utf-8")
    for name, th in stack.thresholds.items():
        (out / "thresholds").mkdir(exist_ok=True)
        (out / "thresholds" / f"{name}.json").write_text(json.dumps(th.to_dict()), encoding="utf-8")


def load_stack(cfg: ExperimentConfig, out: str | Path, need: tuple[str, ...] = ()) -> Stack:
    """Reload saved artifacts. ``need`` lists required parts: corpus, labeler, proxy, thresholds."""
    out = Path(out)
    if not (out / "corpus.txt").exists():
        raise StackInconsistency(f"no corpus in {out}; run gen-corpus first")
    prompts = read_corpus(out / "corpus.txt")
    ids, mask = encode_batch(prompts, cfg.corpus.T)
    split = DatasetSplit.from_dict(json.loads((out / "split.json").read_text(encoding="utf-8")))
    if max(max(split.train, default=0), max(split.validation, default=0), max(split.test, default=0)) >= len(prompts):
        raise StackInconsistency("split indices exceed the corpus size")
    stack = Stack(cfg, prompts, ids, mask, split)
    if (out / "labeler").exists():
        stack.labeler = LabelingNetwork.load(out / "labeler")
    for d in sorted((out / "proxy").glob("*")) if (out / "proxy").exists() else []:
        stack.bundles[d.name] = ProxyBundle.load(d)
    for d in sorted((out / "simple").glob("*")) if (out / "simple").exists() else []:
        stack.simple_bundles[d.name] = ProxyBundle.load(d)
    if (out / "vocab.json").exists():
        stack.vocab = json.loads((out / "vocab.json").read_text(encoding="utf-8"))
    for f in sorted((out / "thresholds").glob("*.json")) if (out / "thresholds").exists() else []:
        stack.thresholds[f.stem] = Threshold.from_dict(json.loads(f.read_text(encoding="utf-8")))
    if "labeler" in need and stack.labeler is None:
        raise StackInconsistency(f"no labeler in {out}; run train-labeler first")
    if "proxy" in need and not stack.bundles:
        raise StackInconsistency(f"no proxy bundles in {out}; run train-proxy first")
    if "thresholds" in need:
        missing = [n for n in stack.bundles if n not in stack.thresholds]
        if missing or not stack.thresholds:
            raise StackInconsistency(f"no threshold for {missing or 'any model'}; run calibrate first")
    if stack.labeler is not None:
        stack.check()
    return stack
