"""Command line entry point: ``glta <command> [--config FILE] [--section.key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .metrics import InvariantError

log = logging.getLogger("glta")

# shorthand switches that map onto config keys
FLAG_ALIASES = {
    "no_item_align": "ablation.no_item_align",
    "no_user_align": "ablation.no_user_align",
    "no_profile": "ablation.no_profile",
    "no_prediction": "ablation.no_prediction",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glta", description="Graph-aligned LLM recommendation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        return sp

    sp = common(sub.add_parser("pretrain", help="stage 1: graph pretraining and frozen LM"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")

    for name, inp, helptext in (("align-items", "--stage1", "stage 2: item-text alignment"),
                                ("align-users", "--stage2", "stage 3: user-item alignment")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument(inp)
        sp.add_argument("--out", required=True)
        sp.add_argument("--force", action="store_true")
        sp.add_argument("--resume", help="continue training from this checkpoint of the same stage")

    sp = common(sub.add_parser("gen-profiles", help="generate or reuse user profile/prediction text"))
    sp.add_argument("--out", help="cache file (defaults to gen.cache)")

    sp = common(sub.add_parser("evaluate", help="metric report for a stage-3 checkpoint"))
    sp.add_argument("--stage3", required=True)
    sp.add_argument("--all-modes", action="store_true", help="firstk, fl and ar plus the dot-product baseline")
    sp.add_argument("--out", help="also write the report JSON here")

    sp = common(sub.add_parser("ablate", help="train and evaluate every ablation variant"))
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--force", action="store_true")
    return p


def parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--key=value`` / ``--key value`` / ``--flag`` pairs into a dotted-key dict."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            key, value = body, extra[i + 1]
            i += 1
        else:
            key, value = body, "true"
        key = key.replace("-", "_")
        out[FLAG_ALIASES.get(key, key)] = value
        i += 1
    return out


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, parse_overrides(extra))
        return _run(args, cfg)
    except (ConfigError, CheckpointError, FileExistsError, FileNotFoundError) as exc:
        print(f"glta: error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"glta: invariant violated: {exc}", file=sys.stderr)
        return 3


def _run(args, cfg) -> int:
    cmd = args.command
    if cmd == "pretrain":
        ckpt = pipeline.cmd_pretrain(cfg, args.out, args.force)
        print(json.dumps({"stage": ckpt.stage, "out": args.out, "seed": cfg.seed,
                          "E_u": list(ckpt.arrays["graph.E_u"].shape),
                          "E_i": list(ckpt.arrays["graph.E_i"].shape)}))
    elif cmd == "align-items":
        if args.resume is None and args.stage1 is None:
            raise ConfigError("align-items needs --stage1 (or --resume)")
        ckpt = pipeline.cmd_align_items(cfg, args.stage1, args.out, args.force, args.resume)
        print(json.dumps({"stage": ckpt.stage, "out": args.out, "log": str(pipeline.training_log_path(args.out))}))
    elif cmd == "align-users":
        if args.resume is None and args.stage2 is None:
            raise ConfigError("align-users needs --stage2 (or --resume)")
        ckpt = pipeline.cmd_align_users(cfg, args.stage2, args.out, args.force, args.resume)
        print(json.dumps({"stage": ckpt.stage, "out": args.out, "log": str(pipeline.training_log_path(args.out))}))
    elif cmd == "gen-profiles":
        assets = pipeline.cmd_gen_profiles(cfg, args.out)
        counts: dict[str, int] = {}
        for a in assets.values():
            counts[a.provenance] = counts.get(a.provenance, 0) + 1
        print(json.dumps({"users": len(assets), "provenance": counts}, sort_keys=True))
    elif cmd == "evaluate":
        modes = pipeline.INFERENCE_MODES if args.all_modes else None
        reports = pipeline.cmd_evaluate(cfg, args.stage3, modes, baseline=args.all_modes)
        payload = [r.to_dict() for r in reports]
        text = json.dumps(payload if len(payload) > 1 else payload[0], indent=2, sort_keys=True)
        print(text)
        if args.out:
            Path(args.out).write_text(text + "\n")
    elif cmd == "ablate":
        rows = pipeline.cmd_ablate(cfg, args.workdir, args.force)
        print(pipeline.format_table(rows), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
