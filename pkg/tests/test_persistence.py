import json

import numpy as np
import pytest

from spacetime_collapse.analysis import accumulate, empty_histogram
from spacetime_collapse.config import parse_config
from spacetime_collapse.ensemble import run_single
from spacetime_collapse.errors import ConfigError
from spacetime_collapse.grid import Basis
from spacetime_collapse.persistence import (
    read_histogram_csv,
    read_snapshot,
    read_trajectories,
    write_histogram_csv,
    write_report,
    write_snapshot,
    write_trajectories,
)


@pytest.fixture
def config(two_level_text):
    return parse_config(two_level_text(p1=0.36, trajectories=2, S=2.0, ds=0.1, sample_every=5))


def test_trajectory_file_round_trip(tmp_path, config):
    records = [run_single(config, i).record for i in range(2)]
    path = write_trajectories(tmp_path / "out" / "trajectories.jsonl", config.metadata(), records)

    first = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert first["type"] == "header"
    assert first["config_hash"] == config.config_hash()
    assert first["seed"] == 11

    header, loaded = read_trajectories(path)
    assert header["scenario"] == "two-level"
    assert [r.trajectory for r in loaded] == [0, 1]
    for original, rebuilt in zip(records, loaded):
        np.testing.assert_array_equal(rebuilt.s_values, original.s_values)
        np.testing.assert_array_equal(rebuilt.series("x[0]"), original.series("x[0]"))
        assert rebuilt.outcome == original.outcome
        assert rebuilt.to_rows() == original.to_rows()


def test_trajectory_file_errors(tmp_path):
    missing_header = tmp_path / "a.jsonl"
    missing_header.write_text("", encoding="utf-8")
    with pytest.raises(ConfigError, match="no header"):
        read_trajectories(missing_header)

    bad_row = tmp_path / "b.jsonl"
    bad_row.write_text('{"type": "header"}\n{"type": "mystery"}\n', encoding="utf-8")
    with pytest.raises(ConfigError) as excinfo:
        read_trajectories(bad_row)
    assert excinfo.value.line == 2

    broken = tmp_path / "c.jsonl"
    broken.write_text('{"type": "header"}\n{not json\n', encoding="utf-8")
    with pytest.raises(ConfigError, match="malformed JSON"):
        read_trajectories(broken)


def test_histogram_csv(tmp_path, packet):
    hist = empty_histogram(packet.grids, 2.0)
    for _ in range(4):
        hist = accumulate(hist, packet, 0.5)

    path = write_histogram_csv(tmp_path / "histogram_p0.csv", {"seed": 5, "schema_version": 1}, hist)
    metadata, rows = read_histogram_csv(path)

    assert metadata["seed"] == "5"
    assert metadata["particle"] == "0"
    assert metadata["samples"] == "4"
    grid = packet.grids[0]
    assert rows.shape == (grid.n_x * grid.n_t, 3)
    assert rows[:, 2].sum() * grid.cell_volume(Basis.POSITION_TIME) == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_array_equal(rows[: grid.n_t, 1], grid.t_axis)


def test_report_carries_metadata(tmp_path, config):
    path = write_report(tmp_path / "report.json", config.metadata(), {"born": {"counts": [3, 1]}})
    data = json.loads(path.read_text(encoding="utf-8"))
    assert data["metadata"]["config_hash"] == config.config_hash()
    assert data["born"]["counts"] == [3, 1]


def test_snapshot_round_trip(tmp_path, packet):
    state = packet.in_basis(Basis.MOMENTUM_ENERGY)
    path = write_snapshot(tmp_path / "snap" / "k.snap", {"seed": 2}, state, s=-0.25)

    loaded, header = read_snapshot(path)
    assert header["s"] == -0.25
    assert header["seed"] == 2
    assert loaded.basis is Basis.MOMENTUM_ENERGY
    assert loaded.grids == state.grids
    np.testing.assert_array_equal(loaded.amplitudes, state.amplitudes)


def test_snapshot_rejects_other_files(tmp_path):
    path = tmp_path / "fake.snap"
    path.write_bytes(b"PNG\n")
    with pytest.raises(ConfigError, match="not a snapshot"):
        read_snapshot(path)
