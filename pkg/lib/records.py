"""Per-frame record formats written by the bench runner.

Structured records are one YAML flow mapping per line; tables are CSV with a
fixed header. Floats are written with repr so reruns are byte-identical.
"""
import csv
from typing import Iterable, List, Optional, Sequence

import numpy as np
import yaml

from lib.degeneracy import AXIS_NAMES, DegeneracyReport, DetectorMethod, Ellipsoid
from lib.errors import ScenarioLoadError
from lib.kalman import FrameStats
from lib.measurements import InfoForm
from lib.utils import open_input, open_output

_Dumper = getattr(yaml, "CSafeDumper", yaml.SafeDumper)
_Loader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)

# keeps every record on a single line
LINE_WIDTH = 1 << 30

FRAMES_HEADER = ["frame", "timestamp", "branch", "degenerate", "visual_us", "posterior_trace", "error_m"]
FLAGS_HEADER = ["frame", "timestamp", *AXIS_NAMES]
ELLIPSOID_HEADER = ["frame", "method", "cx", "cy", "cz",
                    *[f"a{r}{c}" for r in range(3) for c in range(3)], "r0", "r1", "r2"]


def float_list(arr) -> List[float]:
    return [float(v) for v in np.asarray(arr, dtype=float).reshape(-1)]


def flow_line(record: dict) -> str:
    return yaml.dump(record, Dumper=_Dumper, default_flow_style=True, sort_keys=False, width=LINE_WIDTH)


def read_flow_lines(path: str) -> List[dict]:
    with open_input(path) as f:
        try:
            return [yaml.load(line, Loader=_Loader) for line in f if line.strip()]
        except yaml.YAMLError as e:
            raise ScenarioLoadError(f"Unreadable record file {path}: {e}") from e


def report_to_record(frame: int, rep: DegeneracyReport) -> dict:
    return {
        "frame": frame,
        "method": rep.method.value,
        "kind": "covariance" if rep.covariance else "information",
        "total": rep.total,
        "eigvals": float_list(np.concatenate([rep.rot_eigvals, rep.trans_eigvals])),
        "flags": [int(f) for f in rep.flags],
        # column-major: eigenvector columns one after the other
        "eigvecs": float_list(rep.rot_eigvecs.T) + float_list(rep.trans_eigvecs.T),
    }


def report_from_record(record: dict) -> DegeneracyReport:
    eigvals = np.array(record["eigvals"], dtype=float)
    flags = np.array(record["flags"], dtype=bool)
    eigvecs = np.array(record["eigvecs"], dtype=float)
    return DegeneracyReport(
        rot_eigvals=eigvals[:3],
        rot_eigvecs=eigvecs[:9].reshape(3, 3).T,
        trans_eigvals=eigvals[3:],
        trans_eigvecs=eigvecs[9:].reshape(3, 3).T,
        rot_flags=flags[:3],
        trans_flags=flags[3:],
        method=DetectorMethod.parse(record["method"]),
        covariance=record.get("kind", "covariance") == "covariance",
        total=bool(record.get("total", False)),
    )


def lidar_to_record(frame: int, center, form: Optional[InfoForm]) -> dict:
    """Reduced LiDAR system of a frame; `center` is the estimate it was evaluated at."""
    return {
        "frame": frame,
        "center": float_list(center),
        "info": None if form is None else float_list(form.info),
        "vec": None if form is None else float_list(form.vec),
    }


def lidar_from_record(record: dict) -> Optional[InfoForm]:
    if record.get("info") is None:
        return None
    return InfoForm(np.array(record["info"], dtype=float).reshape(6, 6), record["vec"])


def frame_row(stats: FrameStats, timestamp: float, error_m: float) -> list:
    return [stats.frame, repr(float(timestamp)), stats.branch.value, int(stats.degenerate),
            repr(float(stats.visual_us)), repr(stats.posterior_trace), repr(float(error_m))]


def flag_row(frame: int, timestamp: float, rep: DegeneracyReport) -> list:
    return [frame, repr(float(timestamp)), *[int(f) for f in rep.axis_flags()]]


def ellipsoid_row(frame: int, method: DetectorMethod, ellipsoid: Ellipsoid) -> list:
    values = float_list(ellipsoid.center) + float_list(ellipsoid.axes) + float_list(ellipsoid.radii)
    return [frame, method.value, *[repr(v) for v in values]]


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open_output(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: str) -> List[dict]:
    with open_input(path) as f:
        return list(csv.DictReader(f))
