import argparse
import concurrent.futures
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import partial
from typing import List, Optional, Sequence, Tuple

import numpy as np
import yaml

from lib.degeneracy import (
    DEFAULT_CONTRIB_FLOOR,
    DEFAULT_KAPPA_MAX,
    DEFAULT_THRESHOLDS,
    DetectorMethod,
    Thresholds,
    detect_block_hessian,
    detect_cov_schur,
    report_to_ellipsoid,
)
from lib.errors import EXIT_OK, ConfigError, SkfError
from lib.kalman import BeliefState, FusionPolicyConfig, fuse_frame, predict
from lib.measurements import InfoForm, linearize_point_plane, linearize_visual_robust, reduce_lidar, reduce_visual
from lib.overrides import apply_overrides
from lib.records import (
    ELLIPSOID_HEADER,
    FLAGS_HEADER,
    FRAMES_HEADER,
    ellipsoid_row,
    flag_row,
    flow_line,
    frame_row,
    lidar_from_record,
    lidar_to_record,
    read_csv,
    read_flow_lines,
    report_to_record,
    write_csv,
)
from lib.scenarios import SCENARIOS, scenario_library
from lib.sheet import write_comparison_workbook
from lib.simulator import (
    ScenarioSpec,
    ScenarioTrace,
    dump_scenario_file,
    dump_trace,
    generate,
    load_scenario_file,
    load_trace,
    spec_from_dict,
    spec_to_dict,
)
from lib.utils import ensure_output_dir, open_output, require_file

logger = logging.getLogger("skf_tool")

METRICS_FILE = "metrics.txt"
FRAMES_FILE = "frames.csv"
FLAGS_FILE = "flags.csv"
REPORTS_FILE = "reports.txt"
LIDAR_FILE = "lidar.txt"
ELLIPSOIDS_FILE = "ellipsoids.csv"
SCENARIO_FILE = "scenario.yaml"
TRACE_FILE = "trace.txt"
COMPARISON_FILE = "comparison.csv"
TIMELINE_FILE = "flags_timeline.csv"
WORKBOOK_FILE = "comparison.xlsx"

# initial covariance around the ground-truth start pose
P0_ROT = 1e-4  # rad^2
P0_TRANS = 1e-4  # m^2

COMPARISON_HEADER = ["run", "mode", "detector", "ate_rmse_m", "end_to_end_m",
                     "degenerate_frames", "clean_frames", "mean_visual_us"]


class RunMode(str, Enum):
    SELECTIVE = "Selective"
    ALL_IN = "AllIn"
    LIDAR_ONLY = "LidarOnly"

    @classmethod
    def parse(cls, value) -> "RunMode":
        if isinstance(value, cls):
            return value
        for member in cls:
            if str(value).lower() in (member.value.lower(), member.name.lower()):
                return member
        raise ConfigError(f"Unknown mode '{value}'. Use one of: {', '.join(m.value for m in cls)}")


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "Corridor"
    detector: DetectorMethod = DetectorMethod.COV_SCHUR
    mode: RunMode = RunMode.SELECTIVE
    thresholds: Thresholds = DEFAULT_THRESHOLDS
    seed: Optional[int] = 0
    output_dir: str = "out"
    trace: Optional[str] = None
    overrides: Tuple[str, ...] = ()
    measure_timing: bool = True
    kappa_max: float = DEFAULT_KAPPA_MAX
    contrib_floor: float = DEFAULT_CONTRIB_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "detector", DetectorMethod.parse(self.detector))
        object.__setattr__(self, "mode", RunMode.parse(self.mode))
        object.__setattr__(self, "overrides", tuple(self.overrides))


@dataclass
class RunMetrics:
    ate_rmse: float
    end_to_end: float
    per_frame_visual_us: List[float]
    branch_counts: Tuple[int, int]  # (degenerate frames, clean frames)
    errors: List[float] = field(default_factory=list)

    @property
    def mean_visual_us(self) -> float:
        return float(np.mean(self.per_frame_visual_us)) if self.per_frame_visual_us else 0.0


def ate_rmse(estimated: np.ndarray, truth: np.ndarray) -> float:
    """Translation RMSE without alignment; both trajectories start at the same pose."""
    if not len(estimated):
        return 0.0
    diff = np.asarray(estimated) - np.asarray(truth)
    return float(np.sqrt(np.mean(np.sum(diff ** 2, axis=1))))


def resolve_spec(cfg: RunConfig) -> ScenarioSpec:
    if os.path.isfile(cfg.scenario):
        spec = load_scenario_file(cfg.scenario, cfg.overrides)
    else:
        spec = scenario_library(cfg.scenario)
        if cfg.overrides:
            spec = replace(spec_from_dict(apply_overrides(spec_to_dict(spec), cfg.overrides)), name=spec.name)
    if cfg.seed is not None:
        spec = replace(spec, seed=cfg.seed)
    return spec


def build_trace(cfg: RunConfig) -> ScenarioTrace:
    if cfg.trace:
        return load_trace(cfg.trace)
    return generate(resolve_spec(cfg))


def _zero_clock() -> int:
    return 0


def _visual_system(factors, pose) -> InfoForm:
    return reduce_visual(linearize_visual_robust(factors, pose))


def run_trace(trace: ScenarioTrace, cfg: RunConfig) -> RunMetrics:
    """Filter a trace under cfg.mode and write the per-run artifacts into cfg.output_dir."""
    out = ensure_output_dir(cfg.output_dir)
    spec = trace.spec
    policy = FusionPolicyConfig(
        thresholds=cfg.thresholds,
        detector=cfg.detector,
        enable_selective=cfg.mode is not RunMode.ALL_IN,
        kappa_max=cfg.kappa_max,
        contrib_floor=cfg.contrib_floor,
    )
    Q = np.diag([spec.motion_sigma_rot ** 2] * 3 + [spec.motion_sigma_trans ** 2] * 3)
    clock = time.perf_counter_ns if cfg.measure_timing else _zero_clock

    frame_rows, flag_rows, report_lines, lidar_lines = [], [], [], []
    estimated, truth, visual_us = [], [], []
    degenerate = 0
    belief = None
    for frame in trace.frames:
        if belief is None:
            belief = BeliefState(frame.truth, np.diag([P0_ROT] * 3 + [P0_TRANS] * 3))
        else:
            belief = predict(belief, frame.motion_delta, Q)

        batch = None
        lidar = InfoForm.zeros()
        if frame.lidar_factors:
            batch = linearize_point_plane(frame.lidar_factors, belief.x_hat)
            lidar = reduce_lidar(batch)

        visual = None
        if cfg.mode is not RunMode.LIDAR_ONLY and frame.visual_factors is not None:
            visual = partial(_visual_system, frame.visual_factors)

        center = belief.x_hat.translation
        belief, report, stats = fuse_frame(
            belief, lidar, visual, policy, lidar_batch=batch, frame=frame.index, clock=clock,
        )
        error = float(np.linalg.norm(belief.x_hat.translation - frame.truth.translation))
        degenerate += int(stats.degenerate)
        estimated.append(belief.x_hat.translation)
        truth.append(frame.truth.translation)
        visual_us.append(stats.visual_us)

        frame_rows.append(frame_row(stats, frame.timestamp, error))
        flag_rows.append(flag_row(frame.index, frame.timestamp, report))
        report_lines.append(flow_line(report_to_record(frame.index, report)))
        lidar_lines.append(flow_line(lidar_to_record(frame.index, center, lidar if batch is not None else None)))

    errors = [float(np.linalg.norm(e - t)) for e, t in zip(estimated, truth)]
    metrics = RunMetrics(
        ate_rmse=ate_rmse(np.array(estimated).reshape(-1, 3), np.array(truth).reshape(-1, 3)),
        end_to_end=errors[-1] if errors else 0.0,
        per_frame_visual_us=visual_us,
        branch_counts=(degenerate, len(trace.frames) - degenerate),
        errors=errors,
    )

    write_csv(os.path.join(out, FRAMES_FILE), FRAMES_HEADER, frame_rows)
    write_csv(os.path.join(out, FLAGS_FILE), FLAGS_HEADER, flag_rows)
    with open_output(os.path.join(out, REPORTS_FILE)) as f:
        f.writelines(report_lines)
    with open_output(os.path.join(out, LIDAR_FILE)) as f:
        f.writelines(lidar_lines)
    _write_metrics(os.path.join(out, METRICS_FILE), spec, cfg, metrics)
    emit_ellipsoids(out)
    logger.info("%s %s/%s: ate %.4f m, end-to-end %.4f m, %d degenerate frames", spec.name, cfg.mode.value,
                cfg.detector.value, metrics.ate_rmse, metrics.end_to_end, degenerate)
    return metrics


def _write_metrics(path: str, spec: ScenarioSpec, cfg: RunConfig, metrics: RunMetrics) -> None:
    summary = {
        "scenario": spec.name,
        "mode": cfg.mode.value,
        "detector": cfg.detector.value,
        "seed": spec.seed,
        "theta_r_rad2": cfg.thresholds.theta_r,
        "theta_t_m2": cfg.thresholds.theta_t,
        "frames": len(metrics.per_frame_visual_us),
        "ate_rmse_m": metrics.ate_rmse,
        "end_to_end_m": metrics.end_to_end,
        "mean_visual_us": metrics.mean_visual_us,
        "degenerate_frames": metrics.branch_counts[0],
        "clean_frames": metrics.branch_counts[1],
    }
    with open_output(path) as f:
        yaml.safe_dump(summary, f, sort_keys=False)


def run(cfg: RunConfig) -> RunMetrics:
    return run_trace(build_trace(cfg), cfg)


def emit_ellipsoids(run_dir: str) -> str:
    """CovSchur and BlockHessian translational ellipsoids per frame from lidar.txt."""
    records = read_flow_lines(require_file(os.path.join(run_dir, LIDAR_FILE), "per-frame LiDAR systems"))
    rows = []
    for record in records:
        form = lidar_from_record(record)
        if form is None:
            continue
        for rep in (detect_cov_schur(form, DEFAULT_THRESHOLDS), detect_block_hessian(form, DEFAULT_THRESHOLDS)):
            rows.append(ellipsoid_row(record["frame"], rep.method, report_to_ellipsoid(rep, record["center"])))
    path = os.path.join(run_dir, ELLIPSOIDS_FILE)
    write_csv(path, ELLIPSOID_HEADER, rows)
    return path


def comparison_runs(scenario: str, thresholds: Thresholds, seed: Optional[int], output_dir: str,
                    measure_timing: bool = True, overrides: Sequence[str] = ()) -> List[Tuple[str, RunConfig]]:
    base = RunConfig(scenario=scenario, thresholds=thresholds, seed=seed, output_dir=output_dir,
                     overrides=tuple(overrides), measure_timing=measure_timing)
    runs = []
    for method in DetectorMethod:
        label = f"{RunMode.SELECTIVE.value}-{method.value}"
        runs.append((label, replace(base, detector=method, output_dir=os.path.join(output_dir, label))))
    for mode in (RunMode.ALL_IN, RunMode.LIDAR_ONLY):
        runs.append((mode.value, replace(base, mode=mode, output_dir=os.path.join(output_dir, mode.value))))
    return runs


def _run_job(cfg: RunConfig) -> RunMetrics:
    return run(cfg)


def compare_detectors(scenario: str, thresholds: Thresholds = DEFAULT_THRESHOLDS, seed: Optional[int] = 0, *,
                      output_dir: str = "out", jobs: int = 1, measure_timing: bool = True,
                      overrides: Sequence[str] = ()) -> List[dict]:
    """One Selective run per detector plus AllIn and LidarOnly references.

    Writes comparison.csv, flags_timeline.csv and comparison.xlsx into
    output_dir, each run into its own subdirectory; returns the summary rows.
    """
    ensure_output_dir(output_dir)
    runs = comparison_runs(scenario, thresholds, seed, output_dir, measure_timing, overrides)
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(_run_job, [cfg for _, cfg in runs]))
    else:
        trace = build_trace(runs[0][1])
        results = [run_trace(trace, cfg) for _, cfg in runs]

    summary = []
    timelines = {}
    timeline_rows = []
    for (label, cfg), metrics in zip(runs, results):
        summary.append({
            "run": label,
            "mode": cfg.mode.value,
            "detector": cfg.detector.value,
            "ate_rmse_m": metrics.ate_rmse,
            "end_to_end_m": metrics.end_to_end,
            "degenerate_frames": metrics.branch_counts[0],
            "clean_frames": metrics.branch_counts[1],
            "mean_visual_us": metrics.mean_visual_us,
        })
        if cfg.mode is RunMode.SELECTIVE:
            flags = read_csv(os.path.join(cfg.output_dir, FLAGS_FILE))
            rows = [[int(r["frame"]), float(r["timestamp"])] + [int(r[a]) for a in FLAGS_HEADER[2:]] for r in flags]
            timelines[cfg.detector.value] = (FLAGS_HEADER, rows)
            timeline_rows.extend([cfg.detector.value] + row for row in rows)

    summary_rows = [[row[k] if not isinstance(row[k], float) else repr(row[k]) for k in COMPARISON_HEADER]
                    for row in summary]
    write_csv(os.path.join(output_dir, COMPARISON_FILE), COMPARISON_HEADER, summary_rows)
    write_csv(os.path.join(output_dir, TIMELINE_FILE), ["method", *FLAGS_HEADER], timeline_rows)
    write_comparison_workbook(
        os.path.join(output_dir, WORKBOOK_FILE),
        (COMPARISON_HEADER, [[row[k] for k in COMPARISON_HEADER] for row in summary]),
        timelines,
    )
    return summary


def gen_trace(cfg: RunConfig) -> Tuple[str, str]:
    out = ensure_output_dir(cfg.output_dir)
    spec = resolve_spec(cfg)
    scenario_path = os.path.join(out, SCENARIO_FILE)
    trace_path = os.path.join(out, TRACE_FILE)
    dump_scenario_file(spec, scenario_path)
    dump_trace(generate(spec), trace_path)
    return scenario_path, trace_path


def _thresholds(args) -> Thresholds:
    return Thresholds(
        theta_r=args.theta_r if args.theta_r is not None else DEFAULT_THRESHOLDS.theta_r,
        theta_t=args.theta_t if args.theta_t is not None else DEFAULT_THRESHOLDS.theta_t,
    )


def _config(args, **extra) -> RunConfig:
    return RunConfig(
        scenario=args.scenario,
        thresholds=_thresholds(args) if hasattr(args, "theta_r") else DEFAULT_THRESHOLDS,
        seed=args.seed,
        output_dir=args.out,
        overrides=tuple(args.set or ()),
        measure_timing=not getattr(args, "no_timing", False),
        **extra,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Selective LiDAR-visual fusion bench")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("--scenario", default="Corridor",
                       help=f"Scenario name ({', '.join(SCENARIOS)}) or YAML scenario file")
        p.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="Override a scenario field, e.g. scene.planes[0].half_size[0]=5")
        p.add_argument("--out", default="out", help="Output directory")

    def threshold_args(p):
        p.add_argument("--theta-r", type=float, default=None, help="Rotation variance threshold (rad^2)")
        p.add_argument("--theta-t", type=float, default=None, help="Translation variance threshold (m^2)")
        p.add_argument("--no-timing", action="store_true", help="Record zero visual-path time (byte-stable output)")

    p_run = sub.add_parser("run", help="Run one scenario through the filter")
    scenario_args(p_run)
    threshold_args(p_run)
    p_run.add_argument("--detector", default=DetectorMethod.COV_SCHUR.value,
                       help=f"One of {', '.join(m.value for m in DetectorMethod)}")
    p_run.add_argument("--mode", default=RunMode.SELECTIVE.value,
                       help=f"One of {', '.join(m.value for m in RunMode)}")
    p_run.add_argument("--trace", default=None, help="Replay a trace written by gen-trace")

    p_cmp = sub.add_parser("compare", help="Compare all detectors on one scenario")
    scenario_args(p_cmp)
    threshold_args(p_cmp)
    p_cmp.add_argument("--jobs", type=int, default=1, help="Parallel runs")

    p_ell = sub.add_parser("ellipsoids", help="Recompute ellipsoids.csv for a finished run")
    p_ell.add_argument("run_dir", help="Run output directory")

    p_gen = sub.add_parser("gen-trace", help="Write scenario.yaml and trace.txt")
    scenario_args(p_gen)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = _config(args, detector=args.detector, mode=args.mode, trace=args.trace)
            metrics = run(cfg)
            print(f"Wrote {os.path.join(cfg.output_dir, METRICS_FILE)}")
            print(f"ate_rmse={metrics.ate_rmse:.4f} m end_to_end={metrics.end_to_end:.4f} m "
                  f"degenerate_frames={metrics.branch_counts[0]} clean_frames={metrics.branch_counts[1]}")
        elif args.command == "compare":
            if args.jobs < 1:
                raise ConfigError("--jobs must be at least 1")
            summary = compare_detectors(
                args.scenario, _thresholds(args), args.seed, output_dir=args.out, jobs=args.jobs,
                measure_timing=not args.no_timing, overrides=tuple(args.set or ()),
            )
            for row in summary:
                print(f"{row['run']:<28} end_to_end={row['end_to_end_m']:.4f} m ate={row['ate_rmse_m']:.4f} m")
            print(f"Wrote {os.path.join(args.out, COMPARISON_FILE)}")
        elif args.command == "ellipsoids":
            print(f"Wrote {emit_ellipsoids(args.run_dir)}")
        elif args.command == "gen-trace":
            for path in gen_trace(_config(args)):
                print(f"Wrote {path}")
    except SkfError as e:
        print(f"Error: {e}")
        return e.exit_code
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
