import numpy as np
import pytest

from cmsc.converter import ConverterNet, ConverterPair, cycle, from_standard, to_standard
from cmsc.errors import ContractError
from cmsc.nn import check_module
from cmsc.scene import FeatureMap, render_features, sample_scene


@pytest.fixture(scope="module")
def pairs():
    rng = np.random.default_rng(0)
    return {m: ConverterPair(m, 16, rng=rng) for m in ("lidar", "camera")}


def test_shapes_and_tags(pairs):
    fm = render_features(sample_scene(1), "camera", 3)
    s = to_standard(fm, pairs["camera"])
    assert s.modality == "standard" and s.shape == fm.shape
    back = from_standard(s, "lidar", pairs)
    assert back.modality == "lidar" and back.shape == fm.shape
    c = cycle(fm, pairs)
    assert c.modality == "camera" and np.isfinite(c.tensor).all()


def test_wrong_spaces_rejected(pairs):
    lid = render_features(sample_scene(1), "lidar", 3)
    with pytest.raises(ContractError):
        to_standard(lid, pairs["camera"])
    with pytest.raises(ContractError):
        to_standard(FeatureMap(lid.tensor, "standard"), pairs["lidar"])
    with pytest.raises(ContractError):
        from_standard(lid, "camera", pairs)
    with pytest.raises(ContractError):
        from_standard(FeatureMap(lid.tensor, "standard"), "radar", pairs)
    with pytest.raises(ContractError):
        ConverterPair("radar", 16)


def test_deterministic(pairs):
    fm = render_features(sample_scene(2), "lidar", 1)
    a = to_standard(fm, pairs["lidar"]).tensor
    np.testing.assert_array_equal(a, to_standard(fm, pairs["lidar"]).tensor)


def test_channel_mismatch_rejected():
    with pytest.raises(ContractError):
        ConverterNet(8).forward(np.zeros((1, 4, 4, 16)))


def test_converter_gradcheck():
    rng = np.random.default_rng(3)
    net = ConverterNet(4, rng=rng)
    errs = check_module(net, rng.standard_normal((1, 5, 5, 4)))
    assert max(errs.values()) < 1e-4
