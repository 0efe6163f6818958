"""Command-line entry point: ``viewdrift <verb> --config FILE --out DIR --seed N``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..attack import AttackTarget, search_target
from ..errors import ViewDriftError
from ..surrogate import SurrogateDetector, read_texture
from .config import experiment_config, load_config, resolve_out_dir
from .experiments import (
    ABLATIONS,
    SWEEP_LEVELS,
    ExperimentRecord,
    ablation_table,
    evaluate,
    run_ablation,
    run_cross_validation,
    run_factor_sweep,
    run_suite,
    run_training_size_sweep,
    run_transfer,
    seeded_suite,
    select_window,
)
from .report import records_from_csv, report
from .scenarios import (
    BANK_COUNTS,
    CANNED,
    default_template,
    generate_scenarios,
    read_scenario,
    scenario_bank,
    write_scenario,
)

log = logging.getLogger("viewdrift")

VERBS = ("generate", "attack", "eval", "cv", "sweep", "ablate", "transfer", "report")


def load_scenarios(section: dict | None, config) -> list:
    """Scenarios named by a config section; defaults to the seeded suite."""
    section = dict(section or {})
    seed = int(section.get("seed", config.seeds[0]))
    out = []
    if section.get("bank"):
        bank = scenario_bank(seed)
        cats = section.get("categories")
        out.extend(s for s in bank if not cats or s.category in cats)
    if "category" in section:
        out.extend(generate_scenarios(default_template(section["category"]),
                                      int(section.get("count", config.suite_size)), seed))
    for name in section.get("canned", []):
        if name not in CANNED:
            raise ViewDriftError(f"unknown canned scenario {name!r}")
        out.append(CANNED[name]())
    for path in section.get("files", []):
        out.append(read_scenario(path))
    if "suite" in section or not out:
        out.extend(seeded_suite(int(section.get("suite", config.suite_size)), seed))
    return out


def _cmd_generate(config, extras, out: Path, args) -> list:
    scenarios = load_scenarios(extras.get("scenarios") or {"bank": True}, config)
    for seq in scenarios:
        write_scenario(out / "scenarios" / f"{seq.scenario_id}.scn", seq)
    log.info("wrote %d scenario files", len(scenarios))
    return []


def _cmd_attack(config, extras, out, args) -> list:
    scenarios = load_scenarios(extras.get("scenarios"), config)
    records = []
    for seed in config.seeds:
        for det in config.detector_seeds:
            records += run_suite(scenarios, config, args.jobs, seed=seed, detector_seed=det)
    return records


def _cmd_eval(config, extras, out, args) -> list:
    section = extras.get("scenarios") or {}
    texture = read_texture(section["texture"]) if "texture" in section else None
    if texture is None:
        raise ViewDriftError("eval needs scenarios.texture pointing at a texture file")
    fixed = section.get("target")
    records = []
    for seq in load_scenarios(section, config):
        rec = ExperimentRecord("eval", seq.scenario_id, seq.category, seed=config.seeds[0],
                               detector_seed=config.detector_seeds[0], pipeline=config.pipeline.name)
        window, reason = select_window(seq, config)
        if window is None:
            rec.status, rec.reason = "rejected", reason
        else:
            target = (AttackTarget(tuple(fixed["u"]), float(fixed["s"])) if fixed
                      else search_target(window, config.directions, config.step_sizes, config.pipeline))
            ev = evaluate(window, texture, target, SurrogateDetector.create(config.detector_seeds[0]),
                          config.pipeline, perturbations=config.perturbation_samples,
                          seed=config.seeds[0], eot=config.attack.eot)
            rec.target, rec.report = target, ev.report
            rec.hard_brake, rec.overtake_abandoned = ev.hard_brake, ev.overtake_abandoned
        records.append(rec)
    return records


def _cmd_cv(config, extras, out, args) -> list:
    scenarios = load_scenarios(extras.get("scenarios") or {"bank": True}, config)
    by_cat: dict = {}
    for seq in scenarios:
        by_cat.setdefault(seq.category, []).append(seq)
    records = []
    for cat in sorted(by_cat, key=lambda c: list(BANK_COUNTS).index(c) if c in BANK_COUNTS else 99):
        group = by_cat[cat]
        if len(group) < config.folds:
            log.warning("category %s has %d scenarios, fewer than %d folds; skipped", cat,
                        len(group), config.folds)
            records.append(ExperimentRecord("cross-validation", "*", cat, status="skipped",
                                            reason="fewer scenarios than folds"))
            continue
        records += run_cross_validation(group, config.folds, config)
    return records


def _cmd_sweep(config, extras, out, args) -> list:
    section = extras.get("sweep") or {}
    factors = section.get("factors") or ([section["factor"]] if "factor" in section else list(SWEEP_LEVELS))
    records = []
    for factor in factors:
        levels = section.get("levels") if len(factors) == 1 else None
        groups = run_factor_sweep(factor, levels, config, count=int(section.get("count", 20)),
                                  jobs=args.jobs)
        for recs in groups.values():
            records += recs
    return records


def _cmd_ablate(config, extras, out, args) -> list:
    section = extras.get("ablate") or {}
    toggles = section.get("toggles", list(ABLATIONS))
    scenarios = load_scenarios(extras.get("scenarios"), config)
    rows = run_ablation(toggles, config, scenarios, args.jobs)
    for name, stats in ablation_table(rows).items():
        log.info("%-12s d3=%.3f cv=%.3f pdr=%.1f bfs=%.3f asr=%.1f", name, stats["d3"],
                 stats["cv"], stats["pdr"], stats["bfs"], stats["asr"])
    return [r for recs in rows.values() for r in recs]


def _cmd_transfer(config, extras, out, args) -> list:
    section = extras.get("transfer") or {}
    source, target = section.get("source", 42), section.get("target", 7)
    scen = extras.get("scenarios")
    _, records = run_transfer(source, target, config, load_scenarios(scen, config) if scen else None)
    return records


def _cmd_training_size(config, extras, out, args) -> list:
    section = extras.get("training_size") or {}
    rows = run_training_size_sweep(int(section.get("test", 15)), section.get("sizes", [5, 15, 45]),
                                   config)
    with (out / "training_size.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["seed", "size", "d3", "pdr", "test_ids"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return []


COMMANDS = {
    "generate": _cmd_generate,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "cv": _cmd_cv,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "transfer": _cmd_transfer,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewdrift", description=__doc__)
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", help="YAML or JSON experiment configuration")
    parser.add_argument("--out", help="output directory (VIEWDRIFT_OUT overrides)")
    parser.add_argument("--seed", type=int, help="replace the configured seed list with this seed")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    out = resolve_out_dir(args.out)
    try:
        config, extras = experiment_config(load_config(args.config), str(out))
        if args.seed is not None:
            config = replace(config, seeds=(args.seed,))
        out.mkdir(parents=True, exist_ok=True)
        if args.verb == "report":
            records = records_from_csv(out / "records.csv")
        elif args.verb == "sweep" and (extras.get("sweep") or {}).get("training_size"):
            records = _cmd_training_size(config, extras, out, args)
        else:
            records = COMMANDS[args.verb](config, extras, out, args)
        if args.verb != "generate":
            report(records, out, {"group_target": "averaged per training split"})
    except (ViewDriftError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return 2
    errors = [r for r in records if r.status == "error"]
    for r in records:
        if r.status in ("skipped", "rejected"):
            log.warning("%s %s: %s", r.status, r.scenario_id, r.reason)
    return 1 if errors else 0


if __name__ == "__main__":
    sys.exit(main())
