import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from coughscope import fusion, pipeline, training
from coughscope.fusion import FusionConfig
from coughscope.tabular import GENDERS, SymptomRecord, encode_records, is_buffer
from coughscope.training import Dataset, TrainConfig
from gradcases import BY_NAME
from gradcheck import REL_TOL, check_points

CLASSES = training.MULTICLASS_NAMES


def make_dataset(n_per_class=12, seed=0, segments=2):
    """Small separable dataset: class-dependent cough means and fever rates."""
    r = np.random.default_rng(seed)
    labels, records, cough, groups = [], [], [], []
    for c, name in enumerate(CLASSES):
        for i in range(n_per_class):
            rec = SymptomRecord(age=float(r.integers(18, 80)), gender=GENDERS[r.integers(3)],
                                fever=int(r.random() < (0.9 if c == 3 else 0.1)),
                                chest_pain=int(r.random() < 0.5))
            for _ in range(segments):
                labels.append(name)
                records.append(rec)
                cough.append(r.standard_normal(44) + 3.0 * np.eye(4)[c].repeat(11))
                groups.append(c * n_per_class + i)
    return Dataset(labels, encode_records(records), np.array(cough), np.array(groups)), records


@pytest.fixture(scope="module")
def small():
    return make_dataset()


class TestGradient:
    def test_quadratic(self):
        p = {"a": torch.tensor([1.0, -2.0], dtype=torch.float64), "b": torch.tensor(3.0, dtype=torch.float64)}
        g = training.gradient(lambda q: (q["a"] ** 2).sum() + q["b"] ** 2, p)
        assert torch.equal(g["a"], 2 * p["a"]) and float(g["b"]) == 6.0

    def test_frozen(self):
        p = {"a": torch.ones(2, dtype=torch.float64), "b": torch.ones(2, dtype=torch.float64)}
        g = training.gradient(lambda q: (q["a"] * q["b"]).sum(), p, frozen=("b",))
        assert torch.all(g["b"] == 0) and torch.all(g["a"] == 1)
        assert not p["a"].requires_grad

    def test_nonfinite(self):
        with pytest.raises(FloatingPointError):
            training.gradient(lambda q: q["a"].sum() / 0.0, {"a": torch.ones(1, dtype=torch.float64)})

    @pytest.mark.parametrize("name", ["full_model_multiclass", "full_model_binary"])
    def test_full_model(self, name):
        assert check_points(BY_NAME[name], n_points=3, seed=13) < REL_TOL


class TestSplit:
    def test_groups_intact_and_stratified(self, small):
        ds, _ = small
        tr, te = training.stratified_split(ds.labels, ds.groups, 0.25, seed=3)
        assert set(ds.groups[tr]).isdisjoint(ds.groups[te])
        assert len(tr) + len(te) == len(ds)
        for name in CLASSES:
            n_test_groups = len({ds.groups[i] for i in te if ds.labels[i] == name})
            assert n_test_groups == 3

    def test_seeded(self, small):
        ds, _ = small
        a = training.stratified_split(ds.labels, ds.groups, 0.2, 5)
        b = training.stratified_split(ds.labels, ds.groups, 0.2, 5)
        c = training.stratified_split(ds.labels, ds.groups, 0.2, 6)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[1], c[1])

    def test_targets(self):
        assert training.task_targets(["healthy", "covid_positive", "asthma"], "both_binary").tolist() == [0, 1, 0]
        assert training.task_targets(["bronchitis"], "both_multiclass").tolist() == [2]
        with pytest.raises(ValueError):
            training.task_targets(["flu"], "both_multiclass")


class TestTrain:
    def test_deterministic(self, small):
        cfg = TrainConfig(task="both_multiclass", epochs=2, seed=9)
        a, ha = training.train(small[0], cfg)
        b, hb = training.train(small[0], cfg)
        assert a.dumps() == b.dumps() and ha == hb

    def test_zero_learning_rate(self, small):
        cfg = TrainConfig(task="both_binary", epochs=3, learning_rate=0.0, seed=2)
        ckpt, _ = training.train(small[0], cfg)
        init = fusion.init_params(ckpt.fusion_config, ckpt.encoder_config, ckpt.schema, seed=2)
        for k, v in init.items():
            if not is_buffer(k):
                assert np.array_equal(ckpt.tensors[k], v.numpy().astype(np.float32)), k

    def test_toy_loss_decreases(self):
        r = np.random.default_rng(0)
        x = r.standard_normal((200, 2))
        labels = ["covid_positive" if a + b > 0 else "healthy" for a, b in x]
        ds = Dataset(labels, cough=x)
        cfg = TrainConfig(task="cough_only", epochs=10, batch_size=32)
        _, hist = training.train(ds, cfg, input_dim=2)
        losses = [h["loss_total"] for h in hist]
        assert all(b <= 1.05 * a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.5 * losses[0]

    def test_history_identity(self, small):
        _, hist = training.train(small[0], TrainConfig(epochs=2, alpha=0.2))
        for h in hist:
            assert h["loss_total"] == pytest.approx(0.8 * h["loss_ce"] + 0.2 * h["loss_se"], rel=1e-12)

    def test_missing_modality(self, small):
        ds = Dataset(small[0].labels, cough=small[0].cough)
        with pytest.raises(ValueError):
            training.train(ds, TrainConfig(task="symptoms_only", epochs=1))

    def test_checkpoint_roundtrip(self, small, tmp_path):
        ckpt, _ = training.train(small[0], TrainConfig(epochs=1))
        ckpt.save(tmp_path / "c.json")
        back = type(ckpt).load(tmp_path / "c.json")
        assert back.dumps() == ckpt.dumps()
        assert training.evaluate(back, small[0]).to_json() == training.evaluate(ckpt, small[0]).to_json()

    def test_config(self):
        with pytest.raises(ValueError):
            TrainConfig(task="x")
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"epochs": 3, "bogus": 1})
        assert TrainConfig.from_dict({"epochs": 3}).epochs == 3


class TestMetrics:
    def test_fixture(self):
        # rows true (negative, positive); TP=5 FN=1 FP=2 TN=4
        rep = training.metrics_from_confusion([[4, 2], [1, 5]], training.BINARY_NAMES)
        pos = rep.per_class["covid_positive"]
        assert pos["sensitivity"] == pytest.approx(5 / 6)
        assert pos["precision"] == pytest.approx(5 / 7)
        assert pos["specificity"] == pytest.approx(4 / 6)
        assert pos["accuracy"] == pytest.approx(0.75)
        assert pos["f1"] == pytest.approx(2 * (5 / 7) * (5 / 6) / (5 / 7 + 5 / 6))
        assert rep.top1_accuracy == 0.75

    def test_perfect(self):
        cm = training.confusion_matrix([0, 1, 2, 3, 3], [0, 1, 2, 3, 3], 4)
        assert np.array_equal(cm, np.diag([1, 1, 1, 2]))
        rep = training.metrics_from_confusion(cm, CLASSES)
        assert all(v == 1.0 for v in rep.overall.values()) and rep.undefined == []

    def test_single_class_predictor(self):
        cm = training.confusion_matrix([0, 0, 1, 1], [1, 1, 1, 1], 2)
        rep = training.metrics_from_confusion(cm, training.BINARY_NAMES)
        assert rep.top1_accuracy == 0.5
        assert rep.per_class["covid_positive"]["specificity"] == 0.0
        assert "covid_negative.precision" in rep.undefined

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=1, max_size=40), st.integers(0, 1000))
    def test_bounds(self, truth, seed):
        pred = np.random.default_rng(seed).integers(0, 4, len(truth))
        rep = training.metrics_from_confusion(training.confusion_matrix(truth, pred, 4), CLASSES)
        for d in [rep.overall, *rep.per_class.values()]:
            assert all(0.0 <= v <= 1.0 for v in d.values())
        assert rep.n_samples == len(truth)

    def test_empty(self):
        with pytest.raises(ValueError):
            training.metrics_from_confusion(np.zeros((2, 2)), training.BINARY_NAMES)

    def test_writers(self, tmp_path):
        rep = training.metrics_from_confusion([[4, 2], [1, 5]], training.BINARY_NAMES)
        rep.write_json(tmp_path / "m.json")
        rep.write_csv(tmp_path / "m.csv")
        d = json.loads((tmp_path / "m.json").read_text())
        assert d["confusion_matrix"] == [[4, 2], [1, 5]] and d["n_samples"] == 12
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "class,f1,precision,sensitivity,specificity,accuracy"
        assert lines[-1].startswith("overall,")


class TestRunTask:
    def test_cough_only_has_no_importance(self, small, tmp_path):
        res = pipeline.run_task(small[0], small[1], TrainConfig(task="cough_only", epochs=2), tmp_path)
        assert res.importance is None
        assert not (tmp_path / "importance.csv").exists()
        assert (tmp_path / "metrics.json").exists()

    def test_multiclass_confusion_shape_and_repeatable(self, small, tmp_path):
        cfg = TrainConfig(task="both_multiclass", epochs=2)
        a = pipeline.run_task(small[0], small[1], cfg, tmp_path / "a")
        pipeline.run_task(small[0], small[1], cfg, tmp_path / "b")
        assert np.asarray(a.report.confusion_matrix).shape == (4, 4)
        assert a.importance is not None
        for name in ("metrics.json", "metrics.csv", "importance.csv", "checkpoint.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_learns_separable_data(self, small):
        res = pipeline.run_task(small[0], small[1], TrainConfig(task="both_multiclass", epochs=30))
        assert res.report.top1_accuracy > 0.9


def test_fusion_config_alpha_ignored_without_symptoms():
    assert FusionConfig.for_task("cough_only", alpha=0.5).alpha == 0.0
