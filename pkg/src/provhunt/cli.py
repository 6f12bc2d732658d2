"""Command-line entry point.

Exit codes: 0 for a clean run, 2 when ``detect`` raised at least one alert,
1 for configuration, input or output errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .cdr import EventStream, ParseError, StreamOrderError, merge_streams
from .config import ConfigError, EngineConfig, load_config, parse_weights
from .engine import Engine
from .harness import (BenignProfile, UnknownScenario, gen_benign, gen_scenario, interleave,
                      load_scenario, write_ground_truth)
from .harness.scenario import ScenarioError
from .hsg import ThreatTuple, export_hsg, normalized_score, threat_score
from .noise import ModelFormatError, NoiseModel, learn, load_model, save_model
from .ttp import RuleLoadError, RuleSet, load_rules

EXIT_OK, EXIT_ERROR, EXIT_ALERT = 0, 1, 2
logger = logging.getLogger("provhunt")


class CliError(Exception):
    pass


def _config(args: argparse.Namespace) -> EngineConfig:
    cfg = load_config(args.config)
    cfg.override(
        rules=args.rules, lists=args.lists, noise_model=getattr(args, "noise_model", None),
        tau=args.tau, path_thres=args.path_thres,
        weights=parse_weights(args.weights) if args.weights else None,
        out_alerts=getattr(args, "out_alerts", None), out_hsg=getattr(args, "out_hsg", None),
        format=getattr(args, "format", None),
    )
    return cfg.validate()


def _rules(cfg: EngineConfig) -> RuleSet:
    return load_rules(cfg.rules, cfg.lists)


def _streams(inputs: Sequence[str]) -> list[EventStream]:
    return [EventStream(source=p) for p in (inputs or ["-"])]


def _engine(cfg: EngineConfig, model: NoiseModel | None) -> Engine:
    return Engine(_rules(cfg), cfg.score_params(), model, cfg.path_thres)


def cmd_detect(args: argparse.Namespace) -> int:
    cfg = _config(args)
    model = load_model(cfg.noise_model) if cfg.noise_model else None
    engine = _engine(cfg, model)
    out = open(cfg.out_alerts, "w", encoding="utf-8", newline="\n") if cfg.out_alerts else sys.stdout
    try:
        for e in merge_streams(_streams(args.inputs)):
            for alert in engine.process(e):
                out.write(json.dumps(alert.to_json(), sort_keys=True) + "\n")
        out.flush()
    finally:
        if out is not sys.stdout:
            out.close()
    if cfg.out_hsg:
        roots = {engine.hsg.find(a.hsg_id) for a in engine.alerts}
        hsgs = [h for h in engine.hsg.hsgs() if args.all_hsgs or h.id in roots]
        _write_hsgs(hsgs, cfg.out_hsg, cfg.format)
    summary = engine.summary()
    print("summary " + " ".join(f"{k}={v}" for k, v in sorted(summary.items())), file=sys.stderr)
    return EXIT_ALERT if engine.alerts else EXIT_OK


def _write_hsgs(hsgs: list, path: Path, fmt: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if fmt == "json":
            json.dump({"hsgs": [h.to_json() for h in hsgs]}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        else:
            fh.write("".join(export_hsg(h, "dot") for h in hsgs))


def cmd_learn(args: argparse.Namespace) -> int:
    cfg = _config(args)
    engine = _engine(cfg, None)
    for e in merge_streams(_streams(args.inputs)):
        engine.process(e)
    meta = {"inputs": [str(p) for p in args.inputs], "events": engine.stats["events"]}
    model = learn(engine.training_matches(), meta=meta, min_count=args.min_count)
    save_model(model, args.out)
    print(f"entries {len(model)}")
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    cfg = _config(args)
    params = cfg.score_params()
    try:
        t = ThreatTuple.parse(args.tuple)
    except (ValueError, KeyError) as exc:
        raise CliError(f"bad threat tuple {args.tuple!r}: {exc}") from None
    score = threat_score(t, params)
    n = args.n if args.n is not None else params.active_weight_sum(not args.single_host)
    print(f"score {score:.1f}")
    print(f"normalized {normalized_score(score, n):.4f}")
    print(f"threshold {params.threshold(not args.single_host):.1f}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    script = load_scenario(args.scenario)
    if args.no_attack:
        if args.benign <= 0:
            raise CliError("--no-attack needs --benign SECONDS")
        stream = EventStream.from_events([])
    else:
        stream = gen_scenario(args.scenario, seed=args.seed, start_ts=args.start_ts + int(args.offset * 1e6))
    if args.benign > 0:
        profile = BenignProfile.for_platform(script.platform, script.host, start_ts=args.start_ts)
        stream = interleave(gen_benign(profile, args.benign, args.seed), stream)
    stream.write(args.out)
    if args.truth:
        write_ground_truth(stream, args.truth)
    print(f"events {len(stream.events or [])}")
    return EXIT_OK


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (default: $HOLMESLIKE_CONFIG)")
    p.add_argument("--rules", help="TTP rule file")
    p.add_argument("--lists", help="named list file")
    p.add_argument("--tau", type=float, help="fixed alert threshold")
    p.add_argument("--path-thres", dest="path_thres", type=int, help="maximum path_factor for prerequisites")
    p.add_argument("--weights", help="seven comma-separated stage weights")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="provhunt", description="Streaming provenance-based APT detection.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="run detection over jsonl event streams")
    _add_engine_flags(p)
    p.add_argument("inputs", nargs="*", help="event files; '-' or none reads standard input")
    p.add_argument("--noise-model", dest="noise_model", help="learned noise model file")
    p.add_argument("--out-alerts", dest="out_alerts", help="alert JSONL output (default: stdout)")
    p.add_argument("--out-hsg", dest="out_hsg", help="write final HSGs here")
    p.add_argument("--format", choices=("dot", "json"), help="HSG export format")
    p.add_argument("--all-hsgs", action="store_true", help="export non-alerting HSGs too")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("learn", help="train a noise model from benign streams")
    _add_engine_flags(p)
    p.add_argument("inputs", nargs="*")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--min-count", dest="min_count", type=int, default=1)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("score", help="score a threat tuple such as C,M,-,H,-,H,M")
    _add_engine_flags(p)
    p.add_argument("tuple")
    p.add_argument("--n", type=float, help="root for the normalized score (default: sum of active weights)")
    p.add_argument("--single-host", dest="single_host", action="store_true",
                   help="use the single-host weight sum (no lateral movement)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("simulate", help="generate a scenario stream")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="ground-truth JSONL sidecar")
    p.add_argument("--benign", type=float, default=0.0, help="seconds of benign traffic to mix in")
    p.add_argument("--no-attack", dest="no_attack", action="store_true",
                   help="benign traffic only, on the scenario's platform and host (training data)")
    p.add_argument("--offset", type=float, default=0.0, help="attack start, seconds after the benign start")
    p.add_argument("--start-ts", dest="start_ts", type=int, default=1_600_000_000_000_000)
    p.set_defaults(func=cmd_simulate)
    return ap


_TUPLE_ARG = re.compile(r"^<?\s*-\s*(,\s*[-LMHClmhc]?\s*){6}>?$")


def _protect_tuple(argv: list[str]) -> list[str]:
    # a tuple such as "-,-,-,-,-,-,-" would otherwise parse as an option
    if "score" in argv and "--" not in argv:
        tuples = [x for x in argv if _TUPLE_ARG.match(x)]
        if tuples:
            return [x for x in argv if x not in tuples] + ["--", *tuples]
    return argv


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(_protect_tuple(argv))
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UnknownScenario as exc:
        print(f"error: unknown scenario {exc.args[0]!r}", file=sys.stderr)
    except (CliError, ConfigError, RuleLoadError, ParseError, StreamOrderError,
            ModelFormatError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
