"""Command-line entry point: ``verinfer <subcommand> --config cfg.yaml --out runs/x``.

Exit codes: 0 success, 2 configuration error, 3 inconsistent or missing
verification-stack artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .decision import error_rate_curve
from .pipeline import (
    StackInconsistency,
    build_corpus,
    calibrate,
    evaluate,
    load_stack,
    save_stack,
    train_labeler,
    train_proxy,
)

log = logging.getLogger("verinfer")

EXIT_OK, EXIT_CONFIG, EXIT_STACK = 0, 2, 3


def _specified(cfg: ExperimentConfig, name: str | None):
    if name is None:
        return cfg.specified
    spec = cfg.spec(name)
    if spec.role != "specified":
        raise ConfigError(f"{name} is not a specified model")
    return [spec]


def cmd_gen_corpus(cfg, args) -> int:
    stack = build_corpus(cfg)
    save_stack(stack, args.out)
    print(f"wrote {len(stack.prompts)} prompts to {Path(args.out) / 'corpus.txt'}")
    return EXIT_OK


def cmd_train_labeler(cfg, args) -> int:
    stack = load_stack(cfg, args.stack)
    net = train_labeler(stack)
    save_stack(stack, args.out)
    print(f"labeler trained, final loss {net.history[-1]:.4f}" if net.history else "labeler initialised (0 epochs)")
    return EXIT_OK


def cmd_train_proxy(cfg, args) -> int:
    stack = load_stack(cfg, args.stack, need=("labeler",) if args.mode == "secret" else ())
    for spec in _specified(cfg, args.model):
        b = train_proxy(stack, spec, args.mode)
        print(f"{args.mode} proxy for {spec.name}: final loss {b.history[-1]:.4f}" if b.history else spec.name)
    save_stack(stack, args.out)
    return EXIT_OK


def cmd_calibrate(cfg, args) -> int:
    stack = load_stack(cfg, args.stack, need=("labeler", "proxy"))
    for name in sorted(stack.bundles):
        th = calibrate(stack, cfg.spec(name))
        print(f"{name}: eta={th.eta:.6g} from {th.n} validation distances")
    save_stack(stack, args.out)
    return EXIT_OK


def cmd_evaluate(cfg, args) -> int:
    from .harness import export_report

    stack = load_stack(cfg, args.stack, need=("labeler", "proxy", "thresholds"))
    reports = []
    for name in sorted(stack.bundles):
        rep, _ = evaluate(stack, cfg.spec(name))
        reports.append(rep)
        (Path(args.out) / "evaluate").mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "evaluate" / f"eval_{name}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        fpr = ", ".join(f"{k}={v:.3f}" for k, v in sorted(rep.fpr.items()))
        print(f"{name}: FNR={rep.fnr:.3f} FPR: {fpr}")
    export_report(Path(args.out) / "evaluate", eval_reports=reports)
    return EXIT_OK


def cmd_attack(cfg, args) -> int:
    from .experiments import adapter_suite, curve_from_sweep, direct_attack_suite, inverse_suite, simple_attack_suite
    from .harness import export_report

    stack = load_stack(cfg, args.stack, need=("labeler", "proxy", "thresholds"))
    out = Path(args.out) / "attacks"
    curves, extra = [], {}
    for name in sorted(stack.bundles):
        spec = cfg.spec(name)
        if args.kind in ("direct", "all"):
            if name not in stack.simple_bundles:
                train_proxy(stack, spec, "simple")
            r = direct_attack_suite(stack, spec)
            extra[f"direct/{name}"] = {"simple_asr": r.simple_asr, "secret_guess_asr": r.secret_asr,
                                       "prompts": r.n_prompts}
            print(f"{name}: direct attack ASR simple={r.simple_asr:.3f} secret(guessed)={r.secret_asr:.3f}")
        if args.kind in ("simple", "all"):
            if name not in stack.simple_bundles:
                train_proxy(stack, spec, "simple")
            r = simple_attack_suite(stack, spec)
            extra[f"simple/{name}"] = {"adapter_label_asr": r.adapter_label_asr, "finetune_asr": r.finetune_asr,
                                       "frozen_asr": r.frozen_asr, "finetune_alt": r.finetune_alt,
                                       "prompts": r.n_prompts}
            print(f"{name}: simple-protocol ASR adapter-label={r.adapter_label_asr:.3f} "
                  f"finetune={r.finetune_asr:.3f} (frozen {r.frozen_asr:.3f})")
        if args.kind in ("adapter", "all"):
            sw = adapter_suite(stack, spec)
            n = cfg.attacks.adapter_secrets
            curves.append(curve_from_sweep(f"adapter/{name}/same-secret", sw.same_secret, n))
            curves.append(curve_from_sweep(f"adapter/{name}/fresh-secret", sw.fresh_secret, n))
            print(f"{name}: adapter ASR " + ", ".join(f"M={m}:{a:.3f}" for m, a in zip(curves[-2].budgets, curves[-2].asr)))
        if args.kind in ("inverse", "all"):
            sw = inverse_suite(stack, spec)
            curves.append(curve_from_sweep(f"inverse/{name}", sw, len(cfg.attacks.inverse_seeds)))
            print(f"{name}: secret recovery ASR " + ", ".join(f"N={m}:{a:.4g}" for m, a in zip(curves[-1].budgets, curves[-1].asr)))
    export_report(out, asr_curves=curves, extra=extra)
    save_stack(stack, args.stack)
    return EXIT_OK


def cmd_simulate(cfg, args) -> int:
    from .experiments import run_sessions
    from .harness import export_report, export_timing

    stack = load_stack(cfg, args.stack, need=("labeler", "proxy", "thresholds"))
    transcripts = []
    for name in sorted(stack.bundles):
        for strategy in cfg.session.strategies:
            transcripts += run_sessions(stack, cfg.spec(name), strategy)
    out = Path(args.out) / "simulate"
    export_report(out, transcripts=transcripts)
    timing_dir = Path(args.out) / "timing"
    timing_dir.mkdir(parents=True, exist_ok=True)
    export_timing(timing_dir, transcripts)
    from .harness import session_summary

    for key, s in session_summary(transcripts).items():
        print(f"{key}: judged honest {s['judged_honest']}/{s['sessions']}, per-query acceptance {s['acceptance_rate']:.3f}")
    return EXIT_OK


def cmd_report(cfg, args) -> int:
    from .attacks import ASRCurve
    from .harness import export_report

    stack = load_stack(cfg, args.stack, need=("labeler", "proxy", "thresholds"))
    reports = [evaluate(stack, cfg.spec(name))[0] for name in sorted(stack.bundles)]
    curves, extra = [], {}
    attacks = Path(args.out) / "attacks" / "summary.json"
    if attacks.exists():
        data = json.loads(attacks.read_text(encoding="utf-8"))
        for c in data.get("attacks", {}).values():
            curve = ASRCurve(c["scenario"], n_secrets=c["n_secrets"])
            for b, a, s in zip(c["budgets"], c["asr"], c["stderr"]):
                curve.add(b, a, s)
            curves.append(curve)
        extra["direct_attacks"] = data.get("extra", {})
    sessions = Path(args.out) / "simulate" / "summary.json"
    if sessions.exists():
        extra["sessions"] = json.loads(sessions.read_text(encoding="utf-8")).get("sessions", {})
    fnr = sum(r.fnr for r in reports) / len(reports)
    fpr = max(max(r.fpr.values()) for r in reports)
    extra["error_rate_curve"] = error_rate_curve(min(max(fpr, 1e-6), 0.5), min(1 - fnr, 1 - 1e-6),
                                                 [10, 30, 100], [0.3, 0.5, 0.7])
    written = export_report(Path(args.out) / "report", eval_reports=reports, asr_curves=curves, extra=extra)
    print(f"wrote {len(written)} report files to {Path(args.out) / 'report'}")
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-labeler": cmd_train_labeler,
    "train-proxy": cmd_train_proxy,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="runs/default", help="output directory (default: runs/default)")
    common.add_argument("--stack", help="directory holding trained artifacts (default: --out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="verinfer", description="Hidden-state proxy-task verification toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "train-proxy":
            sp.add_argument("--model", help="specified model name (default: all)")
            sp.add_argument("--mode", choices=("secret", "simple"), default="secret")
        if name == "attack":
            sp.add_argument("--kind", choices=("direct", "simple", "adapter", "inverse", "all"), default="all")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    args.stack = args.stack or args.out
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StackInconsistency as e:
        print(f"verification stack error: {e}", file=sys.stderr)
        return EXIT_STACK


if __name__ == "__main__":
    sys.exit(main())
