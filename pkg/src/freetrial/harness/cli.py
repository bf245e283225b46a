"""Command-line entry point: ``freetrial <subcommand> --config FILE``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from ..action_tree import audit
from ..agent import PolicySet, config_dict, evaluate_policy, train
from ..errors import FreeTrialError
from ..factorization import rmse
from .baselines import BASELINES, run_baseline
from .config import Config, ConfigError
from .experiments import RQ1_HEADER, RQ3_HEADER, rq1_sweep, rq3_depth_sweep, write_csv
from .metrics import TABLE2_REFERENCE, TABLE3_REFERENCE, MetricsReport, eval_ranking, summarize_rewards
from .pipeline import Workspace

log = logging.getLogger("freetrial")

SUBCOMMANDS = ("prepare", "train-mf", "train-bpr", "build-tree", "train-agent", "baseline",
               "eval", "rq1", "rq3", "report")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else None


def cmd_prepare(ws: Workspace, args) -> None:
    out = ws.write_prepared()
    r = ws.ratings
    print(f"users={r.num_users} items={r.num_items} rows={len(r)} density={r.density:.4%}")
    print(f"promoted={len(ws.promoted)} low_exposure_rows={len(ws.low_table)} -> {out}")


def cmd_train_mf(ws: Workspace, args) -> None:
    mf = ws.mf
    print(f"train_rmse={mf.rmse_history[-1] if mf.rmse_history else float('nan'):.4f} "
          f"test_rmse={rmse(mf, ws.test_table):.4f}")


def cmd_train_bpr(ws: Workspace, args) -> None:
    bpr = ws.bpr
    auc = bpr.auc_history[-1] if bpr.auc_history else float("nan")
    print(f"bpr trained on {bpr.trained_on_rows} rows, sampled_auc={auc:.4f}")


def cmd_build_tree(ws: Workspace, args) -> None:
    tree = ws.build_tree()
    problems = audit(tree)
    if problems:
        raise FreeTrialError("tree audit failed: " + "; ".join(problems))
    print(f"depth={tree.depth} arity={tree.arity} nodes={tree.num_nodes} "
          f"policies={tree.num_policies} -> {ws.run_dir / 'tree.bin'}")


def _evaluate(ws: Workspace, agent, env) -> tuple[MetricsReport, list[list[float]]]:
    c = ws.cfg
    per_ep = evaluate_policy(agent, env, c.int("harness", "eval_episodes"),
                             c.int("harness", "eval_seed"))
    avg, mx = summarize_rewards(per_ep)
    return MetricsReport(avg_reward=avg, max_reward=mx, k=env.k), per_ep


def cmd_train_agent(ws: Workspace, args) -> None:
    tree = ws.tree
    policies = ws.policies(tree)
    env = ws.environment()
    agent = ws.agent(tree, policies)
    out = ws.run_dir / "agent"
    out.mkdir(exist_ok=True)
    ws.cfg.write(out / "config.ini")
    policies, training = train(env, tree, policies, ws.sru, ws.mf, ws.train_config,
                               promoted=ws.promoted, encoding=ws.encoding, log_dir=out,
                               agent=agent)
    policies.save(out / "policies.bin", tree, ws.sru.d_s)
    summary = {"train_config": config_dict(ws.train_config),
               "episodes": len(training.episodes)}
    if not args.no_eval and ws.cfg.int("harness", "eval_episodes") > 0:
        report, per_ep = _evaluate(ws, agent, env)
        summary["eval"] = json.loads(report.to_json())
        print(f"smile avg_reward={report.avg_reward:.4f} max_reward={report.max_reward:.4f}")
    _write_json(out / "metrics.json", summary)
    tail = training.avg_rewards()[-max(1, len(training.episodes) // 10):]
    print(f"trained {len(training.episodes)} episodes; last-decile avg_reward={np.mean(tail):.4f}")


def cmd_baseline(ws: Workspace, args) -> None:
    c = ws.cfg
    kinds = args.kind or c.str_list("harness", "baselines")
    env = ws.environment()
    n = ws.train_config.episode_length(ws.ratings.num_users)
    passes = ws.passes
    rows, results = [], {}
    for kind in kinds:
        report, _ = run_baseline(env, ws.train_table, ws.mf, kind,
                                 c.int("harness", "eval_episodes"),
                                 c.int("harness", "eval_seed"), n, passes)
        results[kind] = json.loads(report.to_json())
        ref = TABLE2_REFERENCE.get(kind, (math.nan, math.nan))
        rows.append((kind, report.avg_reward, report.max_reward, ref[0], ref[1]))
        print(f"{kind:12s} avg={report.avg_reward:8.4f} max={report.max_reward:8.4f} "
              f"(reference {ref[0]} / {ref[1]})")
    write_csv(ws.run_dir / "baselines.csv",
              ("baseline", "avg_reward", "max_reward", "reference_avg", "reference_max"), rows)
    merged = _read_json(ws.run_dir / "baselines.json") or {}
    merged.update(results)
    _write_json(ws.run_dir / "baselines.json", merged)


def refreshed_ranker(ws: Workspace):
    """Ranker after one evaluation episode of the trained policy."""
    path = ws.run_dir / "agent" / "policies.bin"
    if not path.exists():
        raise FreeTrialError(f"no trained policies at {path}; run train-agent first")
    tree, policies = PolicySet.load(path)
    env = ws.environment()
    agent = ws.agent(tree, policies)
    evaluate_policy(agent, env, 1, ws.cfg.int("harness", "eval_seed"))
    return env.ranker


def cmd_eval(ws: Workspace, args) -> None:
    c = ws.cfg
    k, thr = c.int("harness", "metric_k"), c.float("harness", "relevance_threshold")
    results = _read_json(ws.run_dir / "ranking.json") or {}
    which = [w for w, on in (("before", args.before), ("after", args.after)) if on]
    for w in which or ["before", "after"]:
        model = ws.bpr if w == "before" else refreshed_ranker(ws)
        p, r = eval_ranking(model, ws.test_table, k, thr, exclude=ws.train_table)
        results[w] = json.loads(MetricsReport(precision_at_k=p, recall_at_k=r, k=k).to_json())
        print(f"{w:6s} precision@{k}={p:.4f} recall@{k}={r:.4f}")
    if "before" in results and "after" in results:
        b, a = results["before"], results["after"]
        results["relative_gain"] = {
            "precision": a["precision_at_k"] / b["precision_at_k"] - 1.0,
            "recall": a["recall_at_k"] / b["recall_at_k"] - 1.0}
    _write_json(ws.run_dir / "ranking.json", results)


def cmd_rq1(ws: Workspace, args) -> None:
    c = ws.cfg
    rows = rq1_sweep(ws.environment(), ws.mf, c.int_list("harness", "rq1_counts"),
                     c.int("harness", "rq1_seed"))
    path = write_csv(ws.run_dir / "rq1.csv", RQ1_HEADER, rows)
    for count, _, gain in rows:
        print(f"{count:5d} {gain:10.3f}")
    print(f"-> {path}")


def cmd_rq3(ws: Workspace, args) -> None:
    c = ws.cfg
    episodes = c.int("harness", "rq3_train_episodes")
    train_fn = None
    if episodes > 0:
        def train_fn(tree, policies):
            cfg = ws.train_config
            cfg.episodes = episodes
            env = ws.environment()
            agent = ws.agent(tree, policies)
            train(env, tree, policies, ws.sru, ws.mf, cfg, promoted=ws.promoted,
                  encoding=ws.encoding, agent=agent)
            return _evaluate(ws, agent, env)[0].avg_reward
    rows = rq3_depth_sweep(ws.mf.U, c.int_list("harness", "rq3_depths"),
                           c.int("harness", "rq3_trials"), ws.sru.d_s,
                           c.int("tree", "seed"), train_fn)
    path = write_csv(ws.run_dir / "rq3.csv", RQ3_HEADER, rows)
    for d, arity, t, reward in rows:
        print(f"depth={d} arity={arity} sample_time={t * 1e6:.1f}us avg_reward={reward:.4f}")
    print(f"-> {path}")


def cmd_report(ws: Workspace, args) -> None:
    baselines = _read_json(ws.run_dir / "baselines.json") or {}
    agent = _read_json(ws.run_dir / "agent" / "metrics.json") or {}
    ranking = _read_json(ws.run_dir / "ranking.json") or {}
    print(f"{'policy':12s} {'avg':>9s} {'max':>9s} {'ref avg':>9s} {'ref max':>9s}")
    for kind in BASELINES:
        if kind in baselines:
            b, ref = baselines[kind], TABLE2_REFERENCE[kind]
            print(f"{kind:12s} {b['avg_reward']:9.3f} {b['max_reward']:9.3f} "
                  f"{ref[0]:9.2f} {ref[1]:9.2f}")
    smile = agent.get("eval")
    if smile:
        ref = TABLE2_REFERENCE["smile"]
        print(f"{'smile':12s} {smile['avg_reward']:9.3f} {smile['max_reward']:9.3f} "
              f"{ref[0]:9.2f} {ref[1]:9.2f}")
        if baselines:
            best = max(b["avg_reward"] for b in baselines.values())
            print(f"smile / best baseline avg_reward = {smile['avg_reward'] / best:.2f}x")
    if ranking:
        for w in ("before", "after"):
            if w in ranking:
                print(f"{w:6s} precision={ranking[w]['precision_at_k']:.4f} "
                      f"recall={ranking[w]['recall_at_k']:.4f}")
        if "relative_gain" in ranking:
            g, ref = ranking["relative_gain"], TABLE3_REFERENCE["relative_gain"]
            print(f"relative gain precision={g['precision']:+.2%} recall={g['recall']:+.2%} "
                  f"(reference {ref[0]:+.2%} / {ref[1]:+.2%})")
    if not (baselines or agent or ranking):
        print(f"nothing to report in {ws.run_dir}")


COMMANDS = {"prepare": cmd_prepare, "train-mf": cmd_train_mf, "train-bpr": cmd_train_bpr,
            "build-tree": cmd_build_tree, "train-agent": cmd_train_agent,
            "baseline": cmd_baseline, "eval": cmd_eval, "rq1": cmd_rq1, "rq3": cmd_rq3,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freetrial", description="Free-trial adopter selection")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--run-dir", help="override [run] dir")
        p.add_argument("--seed", type=int, help="override [agent] seed")
        p.add_argument("--episodes", type=int, help="override [agent] episodes")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config value (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train-agent":
            p.add_argument("--no-eval", action="store_true",
                           help="skip the post-training evaluation episodes")
        if name == "baseline":
            p.add_argument("--kind", action="append", choices=BASELINES,
                           help="baseline to run (repeatable; default all)")
        if name == "eval":
            p.add_argument("--before", action="store_true", help="pristine ranker")
            p.add_argument("--after", action="store_true", help="ranker refreshed by SMILE")
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config.load(args.config)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            cfg.set(key.strip(), value.strip())
        if args.seed is not None:
            cfg.set("agent.seed", args.seed)
        if args.episodes is not None:
            cfg.set("agent.episodes", args.episodes)
        if args.run_dir:
            cfg.set("run.dir", args.run_dir)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        ws = Workspace(cfg)
        cfg.write(ws.run_dir / "config.ini")
        COMMANDS[args.command](ws, args)
    except (FreeTrialError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main())
