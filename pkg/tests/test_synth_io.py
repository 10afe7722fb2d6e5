import json
import os

import numpy as np
import pytest

from mlgp.exceptions import DataFormatError
from mlgp.io import (
    atomic_write_text,
    dataset_to_csv,
    load_dataset,
    load_json,
    model_document,
    model_from_document,
    save_dataset,
    save_json,
)
from mlgp.kernels import KernelSpec
from mlgp.model import MultiTaskDataset, TrainConfig, build_utilde, fit, nll_woodbury
from mlgp.synth import SynthConfig, synth_generate
from mlgp.tensreg import als_fit


class TestSynth:
    def test_deterministic(self):
        cfg = SynthConfig((3, 2, 2), (2, 1, 2), n_per_task=5)
        a, b = synth_generate(cfg, seed=4), synth_generate(cfg, seed=4)
        assert np.array_equal(a.dataset.Y, b.dataset.Y)
        assert a.model == b.model
        assert not np.array_equal(a.dataset.Y, synth_generate(cfg, seed=5).dataset.Y)

    def test_noiseless_targets_are_latent(self):
        res = synth_generate(SynthConfig((3, 2, 2), (2, 2, 1), n_per_task=4, noise_var=0.0), seed=1)
        assert np.array_equal(res.dataset.Y, res.latent)
        Ut = build_utilde(res.model, res.dataset)
        assert np.allclose(res.dataset.Y, Ut @ res.core, atol=1e-14)

    def test_factors_orthonormal(self):
        res = synth_generate(SynthConfig((4, 3, 3), (2, 2, 2)), seed=0)
        for U in res.model.effective_factors:
            assert np.allclose(U.T @ U, np.eye(U.shape[1]), atol=1e-12)

    def test_latent_variance_matches_prior(self):
        cfg = SynthConfig((3, 2, 2), (2, 2, 2), n_per_task=3, noise_var=0.0, core_amp=2.0, n_outputs=4000)
        res = synth_generate(cfg, seed=2)
        Ut = build_utilde(res.model, res.dataset)
        expected = 2.0 * np.sum(Ut**2, axis=1)
        observed = np.mean(res.latent**2, axis=1)
        assert abs(observed.sum() / expected.sum() - 1) < 0.05

    def test_feature_kernel_inputs(self):
        kern = KernelSpec("sqexp", 1.0, 0.3)
        res = synth_generate(SynthConfig((5, 2), (2, 1), n_per_task=6, feature_kernel=kern), seed=0)
        assert res.dataset.X.shape == (12, 1)
        assert np.all((res.dataset.X >= 0) & (res.dataset.X <= 1))

    def test_per_task_counts(self):
        res = synth_generate(SynthConfig((2, 3), (1, 1), n_per_task=[0, 2, 5]), seed=0)
        assert np.array_equal(res.dataset.counts, [0, 2, 5])

    @pytest.mark.parametrize("kwargs", [
        dict(mode_dims=(3,), ranks=(1,)),
        dict(mode_dims=(3, 2), ranks=(4, 1)),
        dict(mode_dims=(3, 2), ranks=(1, 1), n_per_task=-1),
        dict(mode_dims=(3, 2), ranks=(1, 1), noise_var=-0.1),
        dict(mode_dims=(3, 2), ranks=(1, 1), core_amp=0.0),
        dict(mode_dims=(3, 2), ranks=(1, 1), n_outputs=0),
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            SynthConfig(**kwargs)


@pytest.fixture
def dataset():
    return synth_generate(SynthConfig((3, 2, 3), (2, 1, 2), n_per_task=4, n_outputs=2), seed=7).dataset


class TestDatasetCsv:
    @pytest.mark.parametrize("explicit", [False, True])
    def test_round_trip(self, tmp_path, dataset, explicit):
        path = tmp_path / "d.csv"
        save_dataset(dataset, path, explicit_modes=explicit)
        back = load_dataset(path, dataset.task_shape)
        assert np.array_equal(back.tasks, dataset.tasks)
        assert np.max(np.abs(back.Y - dataset.Y)) <= 1e-15
        assert np.max(np.abs(back.X - dataset.X)) <= 1e-15

    def test_headers(self, dataset):
        single = MultiTaskDataset((2,), np.ones((1, 2)), np.ones(1), np.zeros(1, dtype=int))
        assert dataset_to_csv(single).splitlines()[0] == "task,y,x1,x2"
        assert dataset_to_csv(dataset, True).splitlines()[0] == "g2,g3,y1,y2,x1,x2,x3"

    def test_mode_indices_are_row_major(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("g2,g3,y,x1\n1,2,0.5,1.0\n")
        assert load_dataset(path, (2, 3)).tasks[0] == 1 * 3 + 2

    @pytest.mark.parametrize("body,line", [
        ("task,y,x1\n0,1.0\n", 2),
        ("task,y,x1\n0,1.0,2.0\n0,abc,1.0\n", 3),
        ("task,y,x1\n9,1.0,2.0\n", 2),
        ("task,y,x1\n0,nan,2.0\n", 2),
        ("task,y,x1\n0,1.0,inf\n", 2),
        ("g2,g3,y,x1\n0,3,1.0,2.0\n", 2),
        ("t,y,x1\n", 1),
        ("task,x1\n", 1),
        ("", 1),
    ])
    def test_errors_name_the_line(self, tmp_path, body, line):
        path = tmp_path / "bad.csv"
        path.write_text(body)
        with pytest.raises(DataFormatError, match=f"line {line}"):
            load_dataset(path, (2, 3))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope.csv", (2,))


class TestJson:
    def test_mlgp_round_trip_preserves_nll(self, tmp_path):
        res = synth_generate(SynthConfig((3, 2, 2), (2, 1, 2), n_per_task=6, noise_var=0.1), seed=3)
        model = fit(res.dataset, (3, 2, 2), (2, 1, 2), TrainConfig(max_iters=30))
        path = tmp_path / "m.json"
        save_json(model_document(model, {"seed": 0}), path)
        doc = load_json(path)
        back = model_from_document(doc)
        assert doc["config"] == {"seed": 0} and doc["fit"]["n_iter"] <= 30
        assert abs(nll_woodbury(back, res.dataset) - nll_woodbury(model, res.dataset)) <= 1e-12

    def test_feature_kernel_round_trip(self, tmp_path):
        kern = KernelSpec("periodic", 1.0, 0.5, 0.3)
        res = synth_generate(SynthConfig((4, 2), (2, 1), n_per_task=3, feature_kernel=kern), seed=0)
        save_json(model_document(res.model), tmp_path / "m.json")
        assert model_from_document(load_json(tmp_path / "m.json")) == res.model

    def test_tucker_round_trip(self, tmp_path, dataset):
        single = MultiTaskDataset(dataset.task_shape, dataset.X, dataset.Y[:, 0], dataset.tasks)
        model = als_fit(single, (2, 1, 2), sweeps=3)
        save_json(model_document(model), tmp_path / "t.json")
        assert model_from_document(load_json(tmp_path / "t.json")) == model

    def test_unknown_type(self):
        with pytest.raises(DataFormatError):
            model_from_document({"type": "other"})
        with pytest.raises(TypeError):
            model_document(object())

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "a": \n}')
        with pytest.raises(DataFormatError, match="line 3"):
            load_json(path)

    def test_output_is_sorted_and_stable(self, tmp_path):
        save_json({"b": 1, "a": [1.5, 2]}, tmp_path / "x.json")
        text = (tmp_path / "x.json").read_text()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [1.5, 2], "b": 1}
        with pytest.raises(ValueError):
            save_json({"a": float("nan")}, tmp_path / "y.json")


class TestAtomicWrite:
    def test_no_temporary_left(self, tmp_path):
        atomic_write_text(tmp_path / "out.txt", "hello")
        assert os.listdir(tmp_path) == ["out.txt"]
        assert (tmp_path / "out.txt").read_text() == "hello"

    def test_failure_keeps_old_file(self, tmp_path):
        target = tmp_path / "out.txt"
        target.write_text("old")

        with pytest.raises(TypeError):
            atomic_write_text(target, 123)
        assert target.read_text() == "old"
        assert os.listdir(tmp_path) == ["out.txt"]
