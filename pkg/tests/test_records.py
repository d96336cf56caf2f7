import numpy as np
import pytest

from lib import rng as streams
from lib.degeneracy import DEFAULT_THRESHOLDS, detect_block_hessian, report_to_ellipsoid
from lib.errors import MissingArtifacts, OutputIoError
from lib.kalman import Branch, FrameStats
from lib.measurements import InfoForm
from lib.records import (
    ELLIPSOID_HEADER,
    ellipsoid_row,
    flag_row,
    flow_line,
    frame_row,
    lidar_from_record,
    lidar_to_record,
    read_csv,
    read_flow_lines,
    write_csv,
)


def test_streams_are_keyed_by_seed_frame_and_kind():
    a = streams.stream(3, 10, streams.LIDAR).random(5)
    np.testing.assert_array_equal(a, streams.stream(3, 10, streams.LIDAR).random(5))
    assert not np.array_equal(a, streams.stream(3, 11, streams.LIDAR).random(5))
    assert not np.array_equal(a, streams.stream(3, 10, streams.VISUAL).random(5))
    assert not np.array_equal(a, streams.stream(4, 10, streams.LIDAR).random(5))
    # negative seeds wrap into the 64-bit key space
    np.testing.assert_array_equal(streams.stream(-1, 0, 1).random(3), streams.stream(streams.MASK64, 0, 1).random(3))


def test_flow_line_is_single_line(tmp_path):
    record = {"frame": 1, "values": np.linspace(0.0, 1.0, 200).tolist(), "total": True}
    line = flow_line(record)
    assert line.endswith("\n") and line.count("\n") == 1

    path = tmp_path / "r.txt"
    path.write_text(line + flow_line({"frame": 2, "values": [float("inf")]}), encoding="utf-8")
    first, second = read_flow_lines(str(path))
    assert first == record
    assert second["values"] == [float("inf")]


def test_lidar_record_round_trip(rng):
    m = rng.normal(size=(6, 6))
    form = InfoForm(m @ m.T, rng.normal(size=6))
    again = lidar_from_record(lidar_to_record(4, [1.0, 2.0, 3.0], form))
    np.testing.assert_array_equal(again.info, form.info)
    np.testing.assert_array_equal(again.vec, form.vec)
    assert lidar_from_record(lidar_to_record(5, [0.0, 0.0, 0.0], None)) is None


def test_rows_use_round_trippable_floats(tmp_path):
    stats = FrameStats(frame=3, branch=Branch.SELECTIVE, degenerate=True, visual_us=12.5, posterior_trace=0.1 + 0.2)
    row = frame_row(stats, 0.30000000000000004, 1 / 3)
    assert row == [3, "0.30000000000000004", "selective", 1, "12.5", "0.30000000000000004", repr(1 / 3)]

    report = detect_block_hessian(InfoForm(np.diag([1e6, 1e6, 1e6, 1.0, 1e6, 1.0]), np.zeros(6)), DEFAULT_THRESHOLDS)
    assert flag_row(3, 0.3, report) == [3, "0.3", 0, 0, 0, 1, 0, 1]

    path = tmp_path / "e.csv"
    write_csv(str(path), ELLIPSOID_HEADER, [ellipsoid_row(3, report.method, report_to_ellipsoid(report, [0, 0, 1]))])
    (parsed,) = read_csv(str(path))
    assert parsed["method"] == "BlockHessian"
    assert float(parsed["r0"]) == 1.0
    assert float(parsed["r2"]) == pytest.approx(1e-3, rel=1e-12)
    assert path.read_bytes().count(b"\r") == 0


def test_unusable_paths_raise_domain_errors(tmp_path):
    with pytest.raises(OutputIoError):
        write_csv(str(tmp_path), ["frame"], [[0]])
    with pytest.raises(MissingArtifacts):
        read_csv(str(tmp_path / "absent.csv"))
    with pytest.raises(MissingArtifacts):
        read_flow_lines(str(tmp_path / "absent.txt"))
