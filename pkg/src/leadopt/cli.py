"""Command-line interface tying banks, environment, search, and metrics
together. Outputs are written atomically (temp file, then rename); errors
leave a machine-readable JSON object on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional

import yaml

from . import exembank, skillbank
from .credit import AdvantageInput, gae
from .env import read_trajectories
from .harness import (
    SearchConfig,
    get_policy,
    metrics,
    optimize_lead,
    report_to_json,
    report_to_tsv,
)
from .molgraph import parse
from .oracles import Objective, builtin_oracle, load_objective

__all__ = ["main"]


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _resolve(cli_value, config: dict, key: str, default):
    if cli_value is not None:
        return cli_value
    if key in config:
        return config[key]
    return default


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError("run config must be a mapping")
    return data


def _objective_with_gamma(obj: Objective, gamma: Optional[float]) -> Objective:
    if gamma is None or gamma == obj.gamma:
        return obj
    return dataclasses.replace(obj, gamma=gamma)


def _read_leads(path: str) -> list[str]:
    leads = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                leads.append(line)
    if not leads:
        raise ValueError(f"no leads in {path}")
    return leads


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_build_bank(args) -> int:
    oracles = [builtin_oracle(name) for name in (args.oracle or [])]
    if args.objective:
        obj = load_objective(args.objective)
        known = {oracle.name for oracle in oracles}
        oracles.extend(
            term.oracle for term in obj.terms if term.oracle.name not in known
        )
    bank = exembank.build_bank(args.corpus, oracles=oracles)
    jsonl_path, fp_path = exembank.save_bank(bank, args.out)
    print(
        json.dumps(
            {
                "records": len(bank),
                "files": [str(jsonl_path), str(fp_path)],
            },
            sort_keys=True,
        )
    )
    return 0


def cmd_retrieve(args) -> int:
    bank = exembank.load_bank(args.bank)
    obj = _objective_with_gamma(load_objective(args.objective), args.gamma_sim)
    query = parse(args.query)
    lead = parse(args.lead)
    exemplars = exembank.retrieve_exemplars(
        bank, query, lead, obj,
        k=args.k, gamma_ex=args.gamma_ex, pool_size=args.pool,
    )
    if not exemplars:
        print(json.dumps({"error": "NoExemplars",
                          "message": "no exemplar passed the lead filter"}),
              file=sys.stderr)
        return 1
    sys.stdout.write(exembank.render_exemplar_block(exemplars, obj, lead))
    return 0


def cmd_skills(args) -> int:
    capacity = args.capacity if args.capacity is not None else 1000
    if args.skills_command == "harvest":
        obj = load_objective(args.objective)
        bank = (
            skillbank.load_skills(args.bank, capacity)
            if Path(args.bank).exists()
            else skillbank.SkillBank(capacity)
        )
        trajectories = read_trajectories(args.trajectories)
        cards = []
        for trajectory in trajectories:
            cards.extend(skillbank.harvest(trajectory, obj, args.delta))
        summarizer, endpoint = "template", None
        if args.summarizer and args.summarizer.startswith("external:"):
            summarizer = "external"
            endpoint = args.summarizer[len("external:"):]
        skills = [
            skillbank.make_skill_card(card, obj.name, summarizer, endpoint)
            for card in cards
        ]
        report = bank.insert(skills) if skills else None
        skillbank.save_skills(bank, args.bank)
        print(json.dumps(
            {
                "trajectories": len(trajectories),
                "cards": len(cards),
                "inserted": report.inserted if report else 0,
                "merged": report.merged if report else 0,
                "evicted": list(report.evicted_keys) if report else [],
                "bank_size": bank.size(obj.name),
            },
            sort_keys=True,
        ))
        return 0
    if args.skills_command == "list":
        bank = skillbank.load_skills(args.bank, capacity)
        for task in bank.tasks():
            if args.task and task != args.task:
                continue
            for skill in bank.cards(task):
                print(json.dumps(
                    {"task": task, "delta_r": skill.delta_r,
                     "before": skill.card.before, "after": skill.card.after,
                     "text": skill.text},
                    sort_keys=True,
                ))
        return 0
    if args.skills_command == "insert":
        bank = (
            skillbank.load_skills(args.bank, capacity)
            if Path(args.bank).exists()
            else skillbank.SkillBank(capacity)
        )
        incoming = skillbank.load_skills(args.cards, capacity)
        reports = {}
        for task in incoming.tasks():
            report = bank.insert(incoming.cards(task))
            reports[task] = {
                "inserted": report.inserted,
                "merged": report.merged,
                "evicted": list(report.evicted_keys),
                "retained": report.retained,
            }
        skillbank.save_skills(bank, args.bank)
        print(json.dumps(reports, sort_keys=True))
        return 0
    # evict-report: show what a capacity bound would remove, don't write
    loose = skillbank.load_skills(args.bank, capacity=10**9)
    bounded = skillbank.SkillBank(capacity)
    summary = {}
    for task in loose.tasks():
        report = bounded.insert(loose.cards(task))
        summary[task] = {
            "cards": loose.size(task),
            "capacity": capacity,
            "evicted": list(report.evicted_keys),
            "retained": report.retained,
        }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    config = _load_config(args.config)
    obj = _objective_with_gamma(
        load_objective(args.objective),
        _resolve(args.gamma_sim, config, "gamma_sim", None),
    )
    cfg = SearchConfig(
        generations=_resolve(args.generations, config, "generations", 20),
        rollouts_per_gen=_resolve(args.rollouts, config, "rollouts", 32),
        temp0=_resolve(args.temp0, config, "temp0", 0.9),
        temp_step=_resolve(args.temp_step, config, "temp_step", 0.1),
        temp_max=_resolve(args.temp_max, config, "temp_max", 2.0),
        budget=_resolve(args.budget, config, "budget", 500),
        budget_unit=_resolve(args.budget_unit, config, "budget_unit",
                             "per_candidate"),
        seed=_resolve(args.seed, config, "seed", 0),
        max_turns=_resolve(args.turns, config, "turns", 5),
        plateau_patience=_resolve(args.plateau, config, "plateau", 2),
        warm_start_incumbent=bool(args.warm_start_incumbent),
        harvest_skills=bool(args.harvest_skills),
    )
    policy_spec = _resolve(args.policy, config, "policy", "random")
    policy = get_policy(policy_spec, timeout=args.wire_timeout)

    exemplar_bank = exembank.load_bank(args.exemplar_bank) if args.exemplar_bank else None
    capacity = args.skill_capacity if args.skill_capacity is not None else 1000
    skill_bank = None
    if args.skill_bank:
        skill_bank = (
            skillbank.load_skills(args.skill_bank, capacity)
            if Path(args.skill_bank).exists()
            else skillbank.SkillBank(capacity)
        )

    out_dir = Path(args.out)
    results = []
    all_trajectories = []
    for lead_smiles in _read_leads(args.leads):
        lead = parse(lead_smiles)
        result, trajectories = optimize_lead(
            lead, cfg, policy, obj,
            exemplar_bank=exemplar_bank, skill_bank=skill_bank,
        )
        results.append(result)
        all_trajectories.extend(trajectories)

    report = metrics(results, obj)
    _atomic_write(out_dir / "report.json", report_to_json(report))
    _atomic_write(out_dir / "report.tsv", report_to_tsv(report))
    trajectory_lines = []
    for idx, trajectory in enumerate(all_trajectories):
        for turn, record in enumerate(trajectory.steps, start=1):
            trajectory_lines.append(json.dumps(
                {
                    "trajectory": idx,
                    "lead": trajectory.lead,
                    "lead_score": trajectory.lead_score,
                    "turn": turn,
                    "action": record.action,
                    "reward": record.reward,
                    "score": record.score,
                    "valid": record.valid,
                    "injected_source": record.injected_source,
                    "terminal_reason": trajectory.terminal_reason,
                },
                sort_keys=True,
            ))
    _atomic_write(out_dir / "trajectories.jsonl",
                  "\n".join(trajectory_lines) + ("\n" if trajectory_lines else ""))
    if skill_bank is not None and args.skill_bank:
        skillbank.save_skills(skill_bank, args.skill_bank)
    print(report_to_tsv(report), end="")
    return 0


def cmd_eval(args) -> int:
    report_path = Path(args.report)
    if report_path.is_dir():
        report_path = report_path / "report.json"
    with open(report_path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    leads = payload.get("leads", [])
    if not leads:
        raise ValueError("no leads in report")
    n = len(leads)
    aggregates = {
        "SR": sum(1 for r in leads if r["success"]) / n,
        "Sim": sum(r["sim"] for r in leads) / n,
        "RI": sum(r["ri"] for r in leads) / n,
    }
    stored = payload.get("aggregates", {})
    drift = {
        key: abs(aggregates[key] - stored.get(key, aggregates[key]))
        for key in aggregates
    }
    print(json.dumps(
        {"task": payload.get("task", ""), "aggregates": aggregates,
         "recomputation_drift": drift, "leads": n},
        sort_keys=True,
    ))
    return 0


def cmd_credit(args) -> int:
    rewards = tuple(float(x) for x in args.rewards.split(",") if x != "")
    values = tuple(float(x) for x in args.values.split(",") if x != "")
    advantages = gae(AdvantageInput(rewards, values, args.gamma, args.lam))
    print(",".join(repr(float(a)) for a in advantages))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leadopt",
        description="Budgeted, memory-augmented lead-molecule optimization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-bank", help="ingest a corpus into an exemplar bank")
    p.add_argument("--corpus", required=True, help="SMILES/TSV/JSONL corpus file")
    p.add_argument("--out", required=True, help="output base path (no extension)")
    p.add_argument("--oracle", action="append",
                   help="builtin oracle to precompute (repeatable)")
    p.add_argument("--objective", help="objective file/preset whose term "
                                       "oracles fill missing properties")
    p.set_defaults(fn=cmd_build_bank)

    p = sub.add_parser("retrieve", help="print the exemplar reference block")
    p.add_argument("--bank", required=True, help="bank base path")
    p.add_argument("--query", required=True, help="current molecule SMILES")
    p.add_argument("--lead", required=True, help="lead molecule SMILES")
    p.add_argument("--objective", required=True, help="objective file or preset")
    p.add_argument("-K", "--k", type=int, default=3,
                   help="exemplars to return (default: 3)")
    p.add_argument("--gamma-ex", type=float, default=None,
                   help="lead-similarity filter (default: objective gamma)")
    p.add_argument("--gamma-sim", type=float, default=None,
                   help="override the objective similarity threshold "
                        "(default: 0.4)")
    p.add_argument("--pool", type=int, default=200,
                   help="broad-recall pool size (default: 200)")
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("skills", help="skill-bank operations")
    skills_sub = p.add_subparsers(dest="skills_command", required=True)
    sp = skills_sub.add_parser("harvest", help="extract skills from trajectories")
    sp.add_argument("--trajectories", required=True, help="trajectory JSONL")
    sp.add_argument("--objective", required=True)
    sp.add_argument("--bank", required=True, help="skill bank JSONL to update")
    sp.add_argument("--delta", type=float, default=0.05,
                    help="minimum improvement to harvest (default: 0.05)")
    sp.add_argument("--capacity", type=int, default=None,
                    help="skill bank capacity (default: 1000)")
    sp.add_argument("--summarizer", default="template",
                    help="'template' or 'external:<endpoint>' "
                         "(default: template)")
    sp.set_defaults(fn=cmd_skills)
    sp = skills_sub.add_parser("list", help="print stored skills")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--task", default=None, help="filter by task name")
    sp.add_argument("--capacity", type=int, default=None)
    sp.set_defaults(fn=cmd_skills)
    sp = skills_sub.add_parser("insert", help="merge a card file into a bank")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--cards", required=True, help="skill JSONL to merge in")
    sp.add_argument("--capacity", type=int, default=None,
                    help="skill bank capacity (default: 1000)")
    sp.set_defaults(fn=cmd_skills)
    sp = skills_sub.add_parser("evict-report",
                               help="preview capacity-bound evictions")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--capacity", type=int, default=None,
                    help="capacity to apply (default: 1000)")
    sp.set_defaults(fn=cmd_skills)

    p = sub.add_parser("run", help="optimize a file of leads and write a report")
    p.add_argument("--leads", required=True, help="one SMILES per line")
    p.add_argument("--objective", required=True, help="objective file or preset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--policy", default=None,
                   help="random | greedy | wire:<endpoint> (default: random)")
    p.add_argument("--config", default=None,
                   help="YAML run config merged under CLI overrides")
    p.add_argument("--budget", type=int, default=None,
                   help="oracle-call budget per lead (default: 500)")
    p.add_argument("--budget-unit", default=None,
                   choices=["per_candidate", "per_term"],
                   help="budget accounting unit (default: per_candidate)")
    p.add_argument("--gamma-sim", type=float, default=None,
                   help="similarity threshold (default: 0.4)")
    p.add_argument("--turns", type=int, default=None,
                   help="max turns per rollout (default: 5)")
    p.add_argument("--generations", type=int, default=None,
                   help="search generations (default: 20)")
    p.add_argument("--rollouts", type=int, default=None,
                   help="rollouts per generation (default: 32)")
    p.add_argument("--temp0", type=float, default=None,
                   help="base temperature (default: 0.9)")
    p.add_argument("--temp-step", type=float, default=None,
                   help="temperature increment per generation (default: 0.1)")
    p.add_argument("--temp-max", type=float, default=None,
                   help="temperature ceiling (default: 2.0)")
    p.add_argument("--plateau", type=int, default=None,
                   help="stalled turns before memory injection (default: 2)")
    p.add_argument("--seed", type=int, default=None, help="seed (default: 0)")
    p.add_argument("--exemplar-bank", default=None, help="bank base path")
    p.add_argument("--skill-bank", default=None, help="skill JSONL path")
    p.add_argument("--skill-capacity", type=int, default=None,
                   help="skill bank capacity (default: 1000)")
    p.add_argument("--warm-start-incumbent", action="store_true",
                   help="start rollouts from the incumbent instead of the lead")
    p.add_argument("--harvest-skills", action="store_true",
                   help="harvest skills between generations")
    p.add_argument("--wire-timeout", type=float, default=10.0,
                   help="wire policy timeout in seconds (default: 10)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="recompute SR/Sim/RI from a report")
    p.add_argument("--report", required=True,
                   help="report.json path or a run output directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("credit", help="credit-assignment numerics")
    credit_sub = p.add_subparsers(dest="credit_command", required=True)
    cp = credit_sub.add_parser("gae", help="advantages from rewards/values")
    cp.add_argument("--rewards", required=True, help="comma-separated rewards")
    cp.add_argument("--values", required=True,
                    help="comma-separated values (one more than rewards)")
    cp.add_argument("--gamma", type=float, default=0.99,
                    help="discount factor (default: 0.99)")
    cp.add_argument("--lambda", dest="lam", type=float, default=0.95,
                    help="GAE lambda (default: 0.95)")
    cp.set_defaults(fn=cmd_credit)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # surfaced as machine-readable JSON
        print(
            json.dumps(
                {"error": type(exc).__name__, "message": str(exc)},
                sort_keys=True,
            ),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
