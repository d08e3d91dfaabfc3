import csv
import io
import json
import struct

import numpy as np
import pytest

from conftest import TOY_SPEC
from worldprobe.config import ConfigError, ExperimentConfig, config_from_dict, load_config, stable_hash
from worldprobe.dynamics import OSCILLATOR, SystemSpec, compute_targets, sample_dataset, simulate_oscillator
from worldprobe.io import (
    FormatError,
    atomic_write_text,
    dumps_json,
    load_split,
    load_trajectory,
    save_split,
    save_trajectory,
    sha256_file,
    trajectory_bytes,
    trajectory_csv,
    trajectory_from_bytes,
)


@pytest.fixture
def split():
    return sample_dataset({"m2": (0.5, 2.0)}, 3, "ssl_train", 4, base=TOY_SPEC, targets=["force", "speed"])


# ---------------------------------------------------------------- trajectories


def test_binary_round_trip(tmp_path, split):
    traj = split.trajectories[0]
    save_trajectory(traj, tmp_path / "t.wptr")
    back = load_trajectory(tmp_path / "t.wptr")
    assert back.spec == traj.spec
    assert back.params == traj.params
    assert back.full_states.tobytes() == traj.full_states.tobytes()
    assert back.observations.tobytes() == traj.observations.tobytes()
    assert {k: v.tobytes() for k, v in back.targets.items()} == {k: v.tobytes() for k, v in traj.targets.items()}


def test_binary_header_is_little_endian_and_versioned(split):
    data = trajectory_bytes(split.trajectories[0])
    version, hlen = struct.unpack_from("<HI", data, 4)
    header = json.loads(data[10:10 + hlen])
    assert version == 1
    assert header["system_kind"] == "two_body"
    assert header["steps"] == TOY_SPEC.steps
    assert [f["name"] for f in header["fields"]] == ["position", "velocity", "force", "speed"]
    assert len(data) == 10 + hlen + 8 * TOY_SPEC.steps * (2 + 2 + 2 + 1)


def test_oscillator_round_trip():
    traj = compute_targets(simulate_oscillator(SystemSpec(OSCILLATOR, steps=10), 1.0, 0.5), ["momentum", "energy"])
    back = trajectory_from_bytes(trajectory_bytes(traj))
    assert back.full_states.shape == (10, 2)
    np.testing.assert_array_equal(back.targets["energy"], traj.targets["energy"])


def test_corrupt_files_rejected(split):
    data = trajectory_bytes(split.trajectories[0])
    with pytest.raises(FormatError):
        trajectory_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        trajectory_from_bytes(data[:-8])
    with pytest.raises(FormatError):
        trajectory_from_bytes(data[:4] + struct.pack("<H", 99) + data[6:])


def test_csv_export_matches_binary(split):
    traj = split.trajectories[1]
    rows = list(csv.reader(io.StringIO(trajectory_csv(traj))))
    assert rows[0] == ["step", "time", "position_0", "position_1", "velocity_0", "velocity_1",
                       "force_0", "force_1", "speed"]
    assert len(rows) == TOY_SPEC.steps + 1
    row = rows[5]
    assert float(row[2]) == traj.full_states[4, 0]
    assert float(row[8]) == traj.targets["speed"][4, 0]


def test_split_manifest_round_trip(tmp_path, split):
    manifest = save_split(split, tmp_path / "ssl")
    data = json.loads(manifest.read_text())
    assert data["role"] == "ssl_train" and len(data["files"]) == 3
    back = load_split(tmp_path / "ssl")
    assert back.role == split.role and back.seed == split.seed
    assert back.generator_ranges == split.generator_ranges
    for a, b in zip(back.trajectories, split.trajectories):
        assert a.full_states.tobytes() == b.full_states.tobytes()


def test_atomic_write_and_checksum(tmp_path):
    path = tmp_path / "sub" / "x.txt"
    atomic_write_text(path, "hello")
    assert path.read_text() == "hello"
    assert sha256_file(path) == "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
    assert list(path.parent.iterdir()) == [path]


def test_json_dump_handles_numpy_and_nan():
    out = json.loads(dumps_json({"a": np.float64(1.5), "b": np.arange(2), "c": float("nan")}))
    assert out == {"a": 1.5, "b": [0, 1], "c": None}


# ---------------------------------------------------------------- configs


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.seed == 0 and cfg.deterministic
    assert (cfg.model.width, cfg.model.n_blocks, cfg.model.window) == (128, 6, 8)
    assert cfg.probe.alpha == 1.0 and cfg.probe.mlp_hidden == 254
    assert cfg.data.ood_sets == 50
    assert cfg.train.lr == 1e-3 and cfg.train.batch == 64


def test_minimal_config_reproduces_defaults(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{\n  "seed": 0,\n  "deterministic": true,\n  "out": "runs/default"\n}\n')
    assert len(path.read_text().splitlines()) == 5
    cfg = load_config(path)
    assert cfg.config_hash == ExperimentConfig().config_hash


def test_config_hash_ignores_output_dir():
    a = config_from_dict({"out": "a"})
    b = config_from_dict({"out": "b"})
    assert a.config_hash == b.config_hash
    assert config_from_dict({"seed": 1}).config_hash != a.config_hash


@pytest.mark.parametrize("bad", [
    {"sed": 1},
    {"model": {"depth": 3}},
    {"seed": "zero"},
    {"experiments": ["baselines", "vibes"]},
    {"probe": {"block": "blocks.9"}},
    {"data": {"ood_range": [1.0, 3.0]}},
    {"system": {"dt": -0.1}},
    {"bound": {"system_kind": "oscillator", "targets": ["radius"]}},
    {"train": {"schedule": "linear"}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_stable_hash_is_key_order_independent():
    assert stable_hash({"a": 1, "b": [1, 2]}) == stable_hash({"b": [1, 2], "a": 1})
