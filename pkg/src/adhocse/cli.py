"""Command-line entry point: ``adhocse {generate,train,sweep,ablate,enhance}``."""
import argparse
import json
import logging
import sys

from . import experiment as X
from .danse import LinkFailurePlan
from .errors import AdhocSEError

log = logging.getLogger("adhocse")


def _value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args):
    cfg = X.ExperimentConfig.load(args.config) if args.config else X.ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = _value(v)
    if args.run_dir:
        overrides["run_dir"] = args.run_dir
    return cfg.replace(**overrides) if overrides else cfg


def cmd_generate(args):
    cfg = load_config(args)
    rows = X.cmd_generate(cfg)
    log.info("wrote %d scenes under %s", len(rows), cfg.run_dir)


def cmd_train(args):
    cfg = load_config(args)
    variants = args.variants or [v for v in cfg.variants if v != X.ORACLE]
    data = X.TrainingSet(cfg)
    for v in X.train_order(variants):
        res = X.cmd_train(cfg, v, data)
        log.info("%s: loss %.5f -> %.5f", v, res.initial_loss, res.losses[-1] if res.losses else res.initial_loss)


def cmd_sweep(args):
    cfg = load_config(args)
    recs = X.cmd_sweep(cfg, args.variants)
    log.info("wrote %d records to %s", len(recs), cfg.path("results.csv"))


def cmd_ablate(args):
    cfg = load_config(args)
    recs = X.cmd_ablate(cfg)
    log.info("wrote %d records to %s", len(recs), cfg.path("ablation.csv"))


def cmd_enhance(args):
    plan = None
    if args.plan:
        with open(args.plan) as fh:
            plan = LinkFailurePlan.from_json(fh.read())
    if args.oracle:
        sn = mn = None
    else:
        if not args.sn_model:
            raise SystemExit("give --sn-model, or --oracle with --speech/--noise component WAVs")
        sn, mn = args.sn_model, args.mn_model
    paths = X.cmd_enhance(args.mixtures, args.out_dir, sn, mn, plan, args.speech, args.noise, args.ref_mic)
    for p in paths:
        print(p)


def build_parser():
    p = argparse.ArgumentParser(prog="adhocse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON or TOML experiment config")
        sp.add_argument("--run-dir", help="override the run directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field (value parsed as JSON when possible)")
        return sp

    with_config(sub.add_parser("generate", help="render train and test scenes")).set_defaults(func=cmd_generate)
    sp = with_config(sub.add_parser("train", help="train mask estimators"))
    sp.add_argument("--variants", nargs="+", choices=list(X.VARIANTS))
    sp.set_defaults(func=cmd_train)
    sp = with_config(sub.add_parser("sweep", help="link-failure sweep over test scenes"))
    sp.add_argument("--variants", nargs="+", choices=list(X.VARIANTS) + [X.ORACLE])
    sp.set_defaults(func=cmd_sweep)
    with_config(sub.add_parser("ablate", help="sweep of the gate ablation variants")).set_defaults(func=cmd_ablate)

    sp = sub.add_parser("enhance", help="enhance per-node mixture recordings")
    sp.add_argument("mixtures", nargs="+", help="one multichannel 16 kHz WAV per node")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--sn-model")
    sp.add_argument("--mn-model")
    sp.add_argument("--plan", help="link failure plan JSON")
    sp.add_argument("--oracle", action="store_true", help="use ideal ratio masks from component WAVs")
    sp.add_argument("--speech", nargs="+", help="speech component WAV per node (oracle mode)")
    sp.add_argument("--noise", nargs="+", help="noise component WAV per node (oracle mode)")
    sp.add_argument("--ref-mic", type=int, default=0)
    sp.set_defaults(func=cmd_enhance)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except AdhocSEError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
