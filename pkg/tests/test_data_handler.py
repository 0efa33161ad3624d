import numpy as np
import pytest
from numpy.testing import assert_array_equal

from data_handler import (
    ScoreTable,
    dataset_text,
    load_checkpoint,
    read_dataset,
    read_features,
    read_scores,
    save_checkpoint,
    write_dataset,
    write_features,
    write_scores,
)
from simulation import DatasetManifest, InterventionSpec, simulate_dataset
from utils import ShapeError


@pytest.fixture
def manifest():
    return DatasetManifest("hard_p=0.5", n_trajectories=3, n_steps=12, n_locations=8,
                           intervention=InterventionSpec("hard_p", 0.5), seed=11)


class TestDatasets:
    def test_bytes_identical_across_runs(self, manifest, tmp_path):
        write_dataset(tmp_path / "a.txt", manifest, simulate_dataset(manifest))
        write_dataset(tmp_path / "b.txt", manifest, simulate_dataset(manifest))
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_layout(self, manifest):
        text = dataset_text(manifest, simulate_dataset(manifest))
        lines = text.split("\n")
        assert lines[0].startswith("# epr-dataset ")
        assert "dataset_id=hard_p=0.5" in lines[0]
        assert text.endswith("\n") and "\r" not in text
        assert len(lines[1].split(" ")) == 4

    def test_read_back(self, manifest, tmp_path):
        trajs = simulate_dataset(manifest, path=tmp_path / "d.txt")
        loaded_manifest, loaded = read_dataset(tmp_path / "d.txt")
        assert loaded_manifest == manifest
        for a, b in zip(trajs, loaded):
            assert a.agent_id == b.agent_id
            assert a.params == b.params
            assert_array_equal(a.visits, b.visits)

    def test_truncated_file_rejected(self, manifest, tmp_path):
        path = tmp_path / "d.txt"
        lines = dataset_text(manifest, simulate_dataset(manifest)).splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
        with pytest.raises(ValueError):
            read_dataset(path)

    def test_location_out_of_range_rejected(self, manifest, tmp_path):
        path = tmp_path / "d.txt"
        lines = dataset_text(manifest, simulate_dataset(manifest)).splitlines()
        lines[1] = lines[1].rsplit(" ", 1)[0] + " 0,99"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(ValueError):
            read_dataset(path)


class TestFeaturesAndScores:
    def test_features_read_back(self, tmp_path):
        rows = np.array([[0.1, -2.5], [1e-17, 3.0]])
        write_features(tmp_path / "f.csv", rows, "test", np.array([0, 4]), np.array([0, 5]),
                       {"L": "20", "stride": "5"})
        fields, loaded, tids, starts = read_features(tmp_path / "f.csv")
        assert fields["dataset_id"] == "test" and fields["d_f"] == "2" and fields["L"] == "20"
        assert_array_equal(loaded, rows)
        assert_array_equal(tids, [0, 4])
        assert_array_equal(starts, [0, 5])

    def test_feature_width_mismatch(self, tmp_path):
        path = tmp_path / "f.csv"
        write_features(path, np.ones((1, 2)), "test", [0], [0], {})
        text = path.read_text(encoding="utf-8").rstrip("\n") + ",7.0\n"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ShapeError):
            read_features(path)

    def test_scores_read_back(self, tmp_path):
        table = ScoreTable("train", "dpgmm", np.array([0, 0, 1]), np.array([0, 5, -1]),
                           np.array([-1.5, 0.25, -30.125]))
        write_scores(tmp_path / "s.csv", table)
        text = (tmp_path / "s.csv").read_text(encoding="utf-8")
        assert text.startswith("dataset_id,trajectory_id,window_start,log_likelihood\n")
        loaded = read_scores(tmp_path / "s.csv", "dpgmm")
        assert loaded.dataset_id == "train"
        assert_array_equal(loaded.values, table.values)
        assert_array_equal(loaded.window_starts, table.window_starts)

    def test_empty_scores_rejected(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("dataset_id,trajectory_id,window_start,log_likelihood\n", encoding="utf-8")
        with pytest.raises(ValueError):
            read_scores(path)


class TestCheckpoints:
    def test_arrays_and_manifest_survive(self, tmp_path):
        arrays = {"a.weight": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])}
        save_checkpoint(tmp_path / "m.npz", arrays, {"kind": "flow", "note": "x"})
        loaded, manifest = load_checkpoint(tmp_path / "m.npz", kind="flow")
        assert manifest["note"] == "x"
        assert manifest["arrays"]["a.weight"] == [2, 3]
        for name in arrays:
            assert_array_equal(loaded[name], arrays[name])

    def test_kind_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m.npz", {"w": np.ones(2)}, {"kind": "dpgmm"})
        with pytest.raises(ValueError, match="expected a 'flow' checkpoint"):
            load_checkpoint(tmp_path / "m.npz", kind="flow")

    def test_reserved_name(self, tmp_path):
        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "m.npz", {"__manifest__": np.ones(1)}, {"kind": "flow"})
