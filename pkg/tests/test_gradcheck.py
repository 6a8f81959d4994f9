import numpy as np
import pytest

from flowvos import tensor as T
from flowvos.gradcheck import GradCheckReport, micro_config, model_gradcheck


def test_micro_model_gradcheck_passes():
    report = model_gradcheck(seed=0)
    assert report.passed, f"failing groups: {report.failures()}"
    assert len(report.per_group) > 50  # covers every learnable group
    assert max(report.per_group.values()) <= 1e-2


def test_gradcheck_lists_every_group_once():
    from flowvos.model import SegmentationModel

    report = model_gradcheck(seed=0, samples_per_group=1)
    model = SegmentationModel(micro_config(0))
    assert sorted(report.per_group) == sorted(model.params())


def test_gradcheck_detects_broken_backward(monkeypatch):
    # negative control: corrupt one vjp and the check must fail
    original = T.tanh

    def broken_tanh(x):
        x = T.as_tensor(x)
        y = np.tanh(x.data)
        return T._result(y, (x,), lambda g: (g * (1.0 - 0.5 * y * y),), "tanh")

    monkeypatch.setattr(T, "tanh", broken_tanh)
    report = model_gradcheck(seed=0, samples_per_group=2)
    assert not report.passed


def test_report_table_format():
    report = GradCheckReport({"a.weight": 1e-5, "b.bias": 5e-2}, tolerance=1e-2)
    table = report.to_table()
    assert "FAIL" in table and "ok" in table
    assert report.failures() == ["b.bias"]
