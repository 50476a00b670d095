"""The gradient-check suite behind ``lkformer gradcheck``."""
import pytest

from lkformer import checks


def test_presets():
    layers = [c.name for c in checks.suite("layers")]
    toy = [c.name for c in checks.suite("toy")]
    assert toy[:len(layers)] == layers
    assert toy[len(layers):] == ["rdb k=11", "lkra", "gpfn", "tl", "rtb", "lkformer"]
    assert [f"separable_dwc k={k}" for k in checks.SEPARABLE_KERNELS] == [n for n in layers if "separable" in n]


def test_unknown_preset():
    with pytest.raises(ValueError, match="unknown gradcheck preset"):
        list(checks.suite("huge"))


def test_layer_cases_pass():
    for case in checks.layer_cases(checks.DEFAULT_SEED):
        report = case.run()
        assert report.passed, (case.name, report.errors)


def test_model_case_shape():
    case = checks.model_case()
    assert case.x.shape == (1, 1, 12, 12)
    assert any(name.startswith("rtbs.0.layers.0.lkra") for name in case.params)
