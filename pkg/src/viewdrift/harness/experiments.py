"""Experiment runners: specific-scenario, cross-validation, sweeps, ablations, transfer."""
from __future__ import annotations

import csv
import logging
import math
import re
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..attack import (
    DEFAULT_DIRECTIONS,
    DEFAULT_STEPS,
    TERMS,
    AttackConfig,
    AttackProblem,
    AttackTarget,
    LossWeights,
    aff_violations,
    group_target,
    optimize,
    search_target,
    vaf_filter,
)
from ..downstream import PIPELINES, PipelineParams, run_pipeline
from ..errors import DegenerateGroupError, InvalidInputError, UndefinedMetricError, ViewDriftError
from ..metrics import MetricReport, ape, bfs, cv, mtd
from ..scene import CameraModel, ScenarioSequence, VehicleSpec, viewing_angle_variation
from ..surrogate import EotSample, IDENTITY_SAMPLE, FaceAtlas, SurrogateDetector, remap_texture, sample_eot, write_texture
from .scenarios import (
    BANK_COUNTS,
    build_sequence,
    default_template,
    generate_scenarios,
    write_scenario,
)

log = logging.getLogger(__name__)

SETTINGS = ("specific", "cross-validation")
ABLATIONS = ("VAF", "EoT", "L_move", "L_prog", "L_fid", "L_style")
FACTORS = ("relative_speed", "projection_area", "distance", "illumination", "viewing_angle")


@dataclass(frozen=True)
class ExperimentConfig:
    setting: str = "specific"
    folds: int = 5
    seeds: tuple = (0,)
    detector_seeds: tuple = (42,)
    pipelines: tuple = ("A",)
    attack: AttackConfig = field(default_factory=AttackConfig)
    cv_steps: int = 3000
    k: int = 3
    theta_min: float = 0.15
    directions: tuple = DEFAULT_DIRECTIONS
    step_sizes: tuple = DEFAULT_STEPS
    w_mtd: float = 0.5
    perturbation_samples: int = 8
    suite_size: int = 20
    out_dir: str | None = None

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise InvalidInputError(f"setting must be one of {SETTINGS}")
        if self.setting == "cross-validation" and self.folds < 2:
            raise InvalidInputError("cross-validation needs at least two folds")
        if not self.seeds:
            raise InvalidInputError("at least one seed is required")
        for p in self.pipelines:
            if p not in PIPELINES:
                raise InvalidInputError(f"unknown pipeline {p!r}")

    @property
    def pipeline(self) -> PipelineParams:
        return PIPELINES[self.pipelines[0]]

    def with_steps(self, steps: int) -> "ExperimentConfig":
        return replace(self, attack=replace(self.attack, steps=steps))


@dataclass
class ExperimentRecord:
    experiment: str
    scenario_id: str
    category: str = ""
    variant: str = "full"
    fold: int = -1
    seed: int = 0
    detector_seed: int = 42
    pipeline: str = "A"
    status: str = "ok"
    reason: str = ""
    factor: str = ""
    level: str = ""
    target: AttackTarget | None = None
    report: MetricReport | None = None
    hard_brake: bool = False
    overtake_abandoned: bool = False
    trace_path: str = ""
    texture_path: str = ""
    texture: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    report: MetricReport
    displacements: np.ndarray
    hard_brake: bool
    overtake_abandoned: bool


def attacked_displacements(problem: AttackProblem, texture: np.ndarray, target: AttackTarget,
                           pipeline: PipelineParams, sample: EotSample = IDENTITY_SAMPLE):
    """Displacements along the target direction, zero where the detector drops the box."""
    comp = problem.components(texture, target, sample, need_pixel_terms=False)
    kept = np.array([b.confidence >= pipeline.detection_threshold for b in comp.boxes])
    return np.where(kept, comp.displacements, 0.0), comp


def evaluate(window: ScenarioSequence, texture: np.ndarray, target: AttackTarget,
             detector: SurrogateDetector, pipeline: PipelineParams, *, perturbations: int = 8,
             seed: int = 0, eot=None) -> Evaluation:
    """All metrics for one attacked window."""
    problem = AttackProblem.build(window, detector, texture.shape[0])
    d, comp = attacked_displacements(problem, texture, target, pipeline)
    clean = run_pipeline(window, comp.clean_boxes, pipeline)
    attacked = run_pipeline(window, comp.boxes, pipeline)
    d3 = []
    rng = np.random.default_rng([seed, 7919])
    for _ in range(perturbations):
        sample = sample_eot(eot or AttackConfig().eot, rng)
        d3.append(attacked_displacements(problem, texture, target, pipeline, sample)[0][-1])
    try:
        spread = cv(d3) if perturbations and np.mean(d3) > 0 else math.nan
    except UndefinedMetricError:
        spread = math.nan
    fidelity = float(np.mean([bfs(c, a) for c, a in zip(comp.clean_boxes, comp.boxes)]))
    closest = min(mtd(p, q) for p, q in zip(attacked.predictions, attacked.paths))
    dd = list(d) + [0.0] * max(0, 3 - len(d))
    report = MetricReport(
        d1=float(dd[0]), d2=float(dd[1]), d3=float(d[-1]),
        pdr=100.0 if all(a < b for a, b in zip(d, d[1:])) else 0.0,
        ape=ape(clean.prediction, attacked.prediction),
        mtd=closest,
        mbd=attacked.plan.max_decel,
        asr=100.0 if attacked.plan.hard_brake else 0.0,
        cv=spread,
        bfs=fidelity,
    )
    return Evaluation(report, d, attacked.plan.hard_brake, attacked.plan.overtake_abandoned)


# ---------------------------------------------------------------------------
# artifacts


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def write_trace(path, trace: list) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "total") + TERMS)
        for row in trace:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in ("total",) + TERMS])
    return path


def _save(record: ExperimentRecord, out_dir, texture, trace, scenarios=()) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = _slug(f"{record.experiment}-{record.variant}-{record.scenario_id}-f{record.fold}"
                f"-s{record.seed}-d{record.detector_seed}-{record.pipeline}-{record.level}")
    if texture is not None:
        ppm, _ = write_texture(out / f"texture_{tag}.ppm", texture)
        record.texture_path = ppm.name
    if trace:
        record.trace_path = write_trace(out / f"loss_trace_{tag}.csv", trace).name
    for seq in scenarios:
        write_scenario(out / "scenarios" / f"{_slug(seq.scenario_id)}.scn", seq)


def _map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Order-preserving map, optionally across worker processes."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# variants


def variant_settings(toggle: str | None, config: ExperimentConfig):
    """(attack config, use VAF) for the full run or one component switched off."""
    a = config.attack
    w = a.weights
    if toggle is None:
        return a, True
    if toggle == "VAF":
        return a, False
    if toggle == "EoT":
        return replace(a, use_eot=False), True
    changes = {"L_move": dict(move=0.0), "L_prog": dict(prog=0.0), "L_fid": dict(fid=0.0),
               "L_style": dict(tv=0.0, nps=0.0)}
    if toggle not in changes:
        raise InvalidInputError(f"unknown ablation toggle {toggle!r}")
    return replace(a, weights=replace(w, **changes[toggle])), True


def select_window(seq: ScenarioSequence, config: ExperimentConfig, use_vaf: bool = True,
                  seed: int = 0):
    """(window, rejection reason) for a candidate sequence.

    Without the viewing-angle filter the window start is drawn uniformly,
    seeded by ``seed`` and the scenario id.
    """
    if len(seq) < config.k:
        return None, "short"
    bad = aff_violations(seq)
    if bad:
        return None, "AFF:" + "+".join(bad)
    if not use_vaf:
        rng = np.random.default_rng([seed, zlib.crc32(seq.scenario_id.encode())])
        return seq.window(int(rng.integers(len(seq) - config.k + 1)), config.k), ""
    win = vaf_filter(seq, config.k, config.theta_min)
    if win is None:
        return None, "VAF"
    return win, ""


# ---------------------------------------------------------------------------
# runners


def run_specific(scenario: ScenarioSequence, config: ExperimentConfig, *, seed: int | None = None,
                 detector_seed: int | None = None, toggle: str | None = None,
                 experiment: str = "specific", eval_detector_seed: int | None = None,
                 factor: str = "", level: str = "") -> ExperimentRecord:
    """Optimize a texture on one scenario and evaluate it there."""
    seed = config.seeds[0] if seed is None else seed
    det_seed = config.detector_seeds[0] if detector_seed is None else detector_seed
    attack_cfg, use_vaf = variant_settings(toggle, config)
    rec = ExperimentRecord(experiment, scenario.scenario_id, scenario.category,
                           "full" if toggle is None else f"w/o {toggle}", -1, seed, det_seed,
                           config.pipeline.name, factor=factor, level=level)
    window, reason = select_window(scenario, config, use_vaf, seed)
    if window is None:
        rec.status, rec.reason = "rejected", reason
        return rec
    target = search_target(window, config.directions, config.step_sizes, config.pipeline, config.w_mtd)
    detector = SurrogateDetector.create(det_seed)
    problem = AttackProblem.build(window, detector, attack_cfg.resolution)
    result = optimize([problem], target, replace(attack_cfg, seed=seed))
    eval_det = detector if eval_detector_seed in (None, det_seed) else SurrogateDetector.create(eval_detector_seed)
    ev = evaluate(window, result.texture, target, eval_det, config.pipeline,
                  perturbations=config.perturbation_samples, seed=seed, eot=attack_cfg.eot)
    rec.target, rec.report = target, ev.report
    rec.hard_brake, rec.overtake_abandoned = ev.hard_brake, ev.overtake_abandoned
    rec.texture = result.texture
    _save(rec, config.out_dir, result.texture, result.trace, [scenario])
    return rec


def fold_partition(n: int, folds: int, seed: int) -> list[np.ndarray]:
    if n < folds:
        raise InvalidInputError("need at least as many scenarios as folds")
    order = np.random.default_rng([seed, 104729]).permutation(n)
    return [np.sort(part) for part in np.array_split(order, folds)]


def run_cross_validation(scenarios: Sequence[ScenarioSequence], folds: int,
                         config: ExperimentConfig, *, seed: int | None = None,
                         detector_seed: int | None = None) -> list[ExperimentRecord]:
    """K-fold: a shared texture per training split, evaluated on the held-out split."""
    seed = config.seeds[0] if seed is None else seed
    det_seed = config.detector_seeds[0] if detector_seed is None else detector_seed
    detector = SurrogateDetector.create(det_seed)
    pipe = config.pipeline
    windows = [select_window(s, config) for s in scenarios]
    records = []
    for f, test_idx in enumerate(fold_partition(len(scenarios), folds, seed)):
        train = [windows[i][0] for i in range(len(scenarios))
                 if i not in set(test_idx) and windows[i][0] is not None]
        base = dict(experiment="cross-validation", fold=f, seed=seed, detector_seed=det_seed,
                    pipeline=pipe.name)
        if not train:
            records.append(ExperimentRecord(scenario_id="*", status="skipped",
                                            reason="no feasible training scenario", **base))
            continue
        try:
            target = group_target([search_target(w, config.directions, config.step_sizes, pipe,
                                                 config.w_mtd) for w in train])
        except DegenerateGroupError as exc:
            records.append(ExperimentRecord(scenario_id="*", status="skipped", reason=str(exc), **base))
            continue
        problems = [AttackProblem.build(w, detector, config.attack.resolution) for w in train]
        result = optimize(problems, target, replace(config.attack, steps=config.cv_steps, seed=seed))
        first = True
        for i in test_idx:
            seq = scenarios[i]
            rec = ExperimentRecord(scenario_id=seq.scenario_id, category=seq.category, target=target,
                                   **base)
            window, reason = windows[i]
            if window is None:
                rec.status, rec.reason = "rejected", reason
            else:
                ev = evaluate(window, result.texture, target, detector, pipe,
                              perturbations=config.perturbation_samples, seed=seed,
                              eot=config.attack.eot)
                rec.report, rec.hard_brake, rec.overtake_abandoned = ev.report, ev.hard_brake, ev.overtake_abandoned
                rec.texture = result.texture
            _save(rec, config.out_dir, result.texture if first else None,
                  result.trace if first else None, [seq])
            if not first:
                # every record of the fold points at the fold's shared artifacts
                rec.texture_path, rec.trace_path = records[-1].texture_path, records[-1].trace_path
            first = False
            records.append(rec)
    return records


def seeded_suite(count: int = 20, seed: int = 0) -> list[ScenarioSequence]:
    """A fixed mixed-category suite: categories taken round-robin from the bank layout."""
    cats = list(BANK_COUNTS)
    out = []
    for i in range(count):
        cat = cats[i % len(cats)]
        out.extend(generate_scenarios(default_template(cat), 1, seed * 10007 + i,
                                      prefix=f"suite-{i:02d}-{cat}"))
    return out


def _specific_job(args):
    scenario, config, kwargs = args
    try:
        return run_specific(scenario, config, **kwargs)
    except ViewDriftError as exc:
        log.error("run on %s failed: %s", scenario.scenario_id, exc)
        return ExperimentRecord(kwargs.get("experiment", "specific"), scenario.scenario_id,
                                scenario.category, status="error", reason=f"{type(exc).__name__}: {exc}",
                                factor=kwargs.get("factor", ""), level=kwargs.get("level", ""))


def run_suite(scenarios, config: ExperimentConfig, jobs: int = 1, **kwargs) -> list[ExperimentRecord]:
    return _map(_specific_job, [(s, config, kwargs) for s in scenarios], jobs)


# ---------------------------------------------------------------------------
# factor sweeps


SWEEP_LEVELS = {
    "relative_speed": (2.5, 6.0),
    "projection_area": ("SEDAN", "VAN"),
    "distance": (8.0, 12.0),
    "illumination": (0.4, 0.9),
    "viewing_angle": (0.17, 0.25),
}


def _pass(spec, *, ego_speed, closing, mid, lateral, approach, illumination, **kw) -> ScenarioSequence:
    """Three frames whose camera-relative range is mid+approach, mid, mid-approach."""
    mount = CameraModel().mount.x
    return build_sequence(spec, ego_speed=ego_speed, target_speed=ego_speed - closing,
                          x0=mount + mid + approach, y0=-lateral, target_yaw=0.0,
                          illumination=illumination, n_frames=3, dt=approach / closing, **kw)


def controlled_scenario(factor: str, level, index: int, seed: int, attempt: int = 0) -> ScenarioSequence:
    """A 3-frame right-side pass where only ``factor`` is set from ``level``.

    The remaining parameters are drawn from an rng keyed by (seed, index,
    attempt) so every level of a sweep shares the same base draw. Relative
    speed changes timing only, distance rescales the whole geometry so aspect
    angles are preserved, and viewing angle is met by solving for the
    per-frame approach at a fixed mid-window range.
    """
    if factor not in FACTORS:
        raise InvalidInputError(f"unknown factor {factor!r}")
    rng = np.random.default_rng([seed, index, attempt])
    p = dict(ego_speed=float(rng.uniform(10.0, 13.0)), closing=float(rng.uniform(4.0, 5.0)),
             mid=float(rng.uniform(7.5, 9.0)), lateral=float(rng.uniform(3.0, 3.3)),
             approach=float(rng.uniform(2.2, 2.8)), illumination=float(rng.uniform(0.6, 0.8)))
    tag = "SEDAN"
    if factor == "relative_speed":
        p["closing"] = float(level)
    elif factor == "projection_area":
        tag = str(level)
    elif factor == "distance":
        ratio = float(level) / p["mid"]
        for key in ("mid", "lateral", "approach"):
            p[key] *= ratio
    elif factor == "illumination":
        p["illumination"] = float(level)
    elif factor == "viewing_angle":
        # a van close enough that its effective area saturates in every frame
        tag = "VAN"
        p["mid"] = float(rng.uniform(7.0, 7.8))
        spec = VehicleSpec.of(tag)
        lo, hi = 0.0, 0.95 * p["mid"]
        for _ in range(60):
            p["approach"] = 0.5 * (lo + hi)
            if viewing_angle_variation(_pass(spec, **p)) < float(level):
                lo = p["approach"]
            else:
                hi = p["approach"]
        p["approach"] = 0.5 * (lo + hi)
    return _pass(VehicleSpec.of(tag), **p, category=f"{tag}-R-S",
                 scenario_id=f"sweep-{factor}-{level}-{index:02d}")


def sweep_scenarios(factor: str, levels: Sequence, count: int, seed: int,
                    config: ExperimentConfig) -> dict:
    """Paired scenario sets per level; a base draw is kept only if every level is feasible."""
    if len(levels) < 2:
        raise InvalidInputError("a sweep needs at least two levels")
    out = {lv: [] for lv in levels}
    for index in range(count):
        for attempt in range(100):
            seqs = [controlled_scenario(factor, lv, index, seed, attempt) for lv in levels]
            if all(select_window(s, config)[0] is not None for s in seqs):
                break
        else:
            raise InvalidInputError(f"no feasible base draw for sweep index {index}")
        for lv, s in zip(levels, seqs):
            out[lv].append(s)
    return out


def run_factor_sweep(factor: str, levels: Sequence | None, config: ExperimentConfig, *,
                     count: int = 20, seed: int | None = None, jobs: int = 1) -> dict:
    seed = config.seeds[0] if seed is None else seed
    levels = tuple(levels or SWEEP_LEVELS[factor])
    groups = sweep_scenarios(factor, levels, count, seed, config)
    return {lv: run_suite(seqs, config, jobs, seed=seed, experiment="sweep", factor=factor,
                          level=str(lv))
            for lv, seqs in groups.items()}


# ---------------------------------------------------------------------------
# ablation, transfer, training size


def run_ablation(toggles: Sequence[str], config: ExperimentConfig,
                 scenarios: Sequence[ScenarioSequence] | None = None, jobs: int = 1) -> dict:
    """Full configuration plus one run per switched-off component on the same suite."""
    for t in toggles:
        if t not in ABLATIONS:
            raise InvalidInputError(f"unknown ablation toggle {t!r}")
    suite = list(scenarios) if scenarios is not None else seeded_suite(config.suite_size, config.seeds[0])
    rows = {"full": run_suite(suite, config, jobs, experiment="ablation")}
    for t in toggles:
        rows[f"w/o {t}"] = run_suite(suite, config, jobs, toggle=t, experiment="ablation")
    return rows


def ablation_table(rows: dict) -> dict:
    """Per-variant d3, CV, PDR, BFS and ASR over the ok records."""
    table = {}
    for name, recs in rows.items():
        reps = [r.report for r in recs if r.ok]
        cvs = [r.cv for r in reps if not math.isnan(r.cv)]
        table[name] = {
            "d3": float(np.mean([r.d3 for r in reps])) if reps else math.nan,
            "cv": float(np.mean(cvs)) if cvs else math.nan,
            "pdr": float(np.mean([r.pdr for r in reps])) if reps else math.nan,
            "bfs": float(np.mean([r.bfs for r in reps])) if reps else math.nan,
            "asr": float(np.mean([r.asr for r in reps])) if reps else math.nan,
            "n": len(reps),
        }
    return table


def _retype(seq: ScenarioSequence, tag: str) -> ScenarioSequence:
    _, pos, direction = seq.category.split("-")
    return replace(seq, target_spec=VehicleSpec.of(tag), category=f"{tag}-{pos}-{direction}",
                   scenario_id=f"{seq.scenario_id}-as-{tag}")


def run_transfer(source, target, config: ExperimentConfig,
                 scenarios: Sequence[ScenarioSequence] | None = None) -> tuple[MetricReport, list]:
    """Optimize against ``source`` and evaluate against ``target``.

    Integers name detector seeds; strings name vehicle types, in which case the
    texture is re-mapped onto the target body before evaluation.
    """
    by_type = isinstance(source, str)
    if by_type != isinstance(target, str):
        raise InvalidInputError("source and target must both be seeds or both be vehicle types")
    seed = config.seeds[0]
    det_seed = config.detector_seeds[0]
    if scenarios is None:
        if by_type:
            scenarios = generate_scenarios(default_template(f"{source}-R-S"), config.suite_size, seed,
                                           prefix=f"transfer-{source}")
        else:
            scenarios = seeded_suite(config.suite_size, seed)
    records = []
    for seq in scenarios:
        if not by_type:
            rec = run_specific(seq, config, detector_seed=source, eval_detector_seed=target,
                               experiment="transfer")
            records.append(rec)
            continue
        src = _retype(seq, source) if seq.target_spec.type_tag != source else seq
        rec = run_specific(src, config, detector_seed=det_seed, experiment="transfer")
        if rec.ok and target != source:
            dst = _retype(src, target)
            window, reason = select_window(dst, config)
            if window is None:
                rec.status, rec.reason, rec.report = "rejected", f"target {reason}", None
            else:
                tex = remap_texture(rec.texture, FaceAtlas.for_vehicle(src.target_spec, rec.texture.shape[0]),
                                    FaceAtlas.for_vehicle(dst.target_spec, rec.texture.shape[0]))
                ev = evaluate(window, tex, rec.target, SurrogateDetector.create(det_seed), config.pipeline,
                              perturbations=config.perturbation_samples, seed=seed, eot=config.attack.eot)
                rec.report, rec.hard_brake = ev.report, ev.hard_brake
                rec.scenario_id, rec.category = dst.scenario_id, dst.category
        records.append(rec)
    ok = [r.report for r in records if r.ok]
    return (MetricReport.aggregate(ok) if ok else None), records


def run_training_size_sweep(test_set_size: int, train_sizes: Sequence[int], config: ExperimentConfig,
                            pool: Sequence[ScenarioSequence] | None = None,
                            category: str = "SEDAN-R-S") -> list[dict]:
    """Fixed test set, growing training subsets; one row per (seed, size)."""
    sizes = list(train_sizes)
    if sizes != sorted(sizes) or not sizes:
        raise InvalidInputError("train sizes must be ascending")
    need = test_set_size + sizes[-1]
    if pool is None:
        pool = generate_scenarios(default_template(category), need, config.seeds[0], prefix="size")
    if len(pool) < need:
        raise InvalidInputError(f"pool has {len(pool)} scenarios, need {need}")
    test = [select_window(s, config)[0] for s in pool[:test_set_size]]
    rest = list(pool[test_set_size:])
    rows = []
    for seed in config.seeds:
        detector = SurrogateDetector.create(config.detector_seeds[0])
        order = np.random.default_rng([seed, 15485863]).permutation(len(rest))
        for size in sizes:
            train = [select_window(rest[i], config)[0] for i in order[:size]]
            target = group_target([search_target(w, config.directions, config.step_sizes,
                                                 config.pipeline, config.w_mtd) for w in train])
            problems = [AttackProblem.build(w, detector, config.attack.resolution) for w in train]
            tex = optimize(problems, target, replace(config.attack, steps=config.cv_steps, seed=seed)).texture
            reps = [evaluate(w, tex, target, detector, config.pipeline, perturbations=0, seed=seed).report
                    for w in test]
            rows.append({"seed": seed, "size": size, "d3": float(np.mean([r.d3 for r in reps])),
                         "pdr": float(np.mean([r.pdr for r in reps])),
                         "test_ids": ",".join(s.scenario_id for s in pool[:test_set_size])})
    return rows
