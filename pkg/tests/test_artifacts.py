from __future__ import annotations

import numpy as np
import pytest

from ttreliab import artifacts
from ttreliab.dirt import BridgingSchedule, build
from ttreliab.estimators import linear_problem
from ttreliab.tt import CrossConfig


@pytest.fixture(scope="module")
def small_map():
    prob = linear_problem(3, 2.0)
    return build(prob, BridgingSchedule.prior_failure(8.0, 2), CrossConfig(max_rank=3, max_sweeps=2),
                 n_nodes=10, n_ess=100)


def test_container_round_trip(tmp_path):
    arrs = {"a": np.arange(6.0).reshape(2, 3), "s": np.array(np.pi)}
    artifacts.save(tmp_path / "x.bin", "demo", arrs, {"seed": 3})
    got, meta = artifacts.load(tmp_path / "x.bin", "demo")
    assert meta == {"seed": 3}
    np.testing.assert_array_equal(got["a"], arrs["a"])
    assert got["s"].shape == () and got["s"] == np.pi


def test_wrong_kind_and_version(tmp_path):
    artifacts.save(tmp_path / "x.bin", "demo", {"a": np.ones(2)})
    with pytest.raises(artifacts.ArtifactError):
        artifacts.load(tmp_path / "x.bin", "other")
    data = (tmp_path / "x.bin").read_bytes().replace(b"TTRELIAB 1", b"TTRELIAB 9", 1)
    with pytest.raises(artifacts.VersionMismatchError):
        artifacts.decode(data)


def test_map_round_trip_is_bit_exact(tmp_path, small_map):
    path = tmp_path / "map.bin"
    artifacts.save_map(path, small_map)
    loaded = artifacts.load_map(path, dim=3)
    r = np.random.default_rng(1).standard_normal((500, 3))
    a, b = small_map.push(r), loaded.push(r)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(small_map.log_density(a[0]), loaded.log_density(a[0]))
    assert loaded.n_model_evals == small_map.n_model_evals
    assert loaded.diagnostics == small_map.diagnostics


def test_truncated_map_fails_checksum(tmp_path, small_map):
    path = tmp_path / "map.bin"
    artifacts.save_map(path, small_map)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(artifacts.ChecksumError):
        artifacts.load_map(path)


def test_map_dimension_mismatch(tmp_path, small_map):
    path = tmp_path / "map.bin"
    artifacts.save_map(path, small_map)
    with pytest.raises(artifacts.DimensionMismatchError):
        artifacts.load_map(path, dim=30)


def test_atomic_write_leaves_no_temp(tmp_path):
    artifacts.atomic_write_text(tmp_path / "t.txt", "hello")
    assert [p.name for p in tmp_path.iterdir()] == ["t.txt"]
