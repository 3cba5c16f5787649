import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cmsc.errors import ContractError
from cmsc.estimator import CMSCEstimator
from cmsc.perception import DetectionSet
from conftest import tiny_config


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    est = CMSCEstimator(tiny_config(), cache_dir=tmp_path_factory.mktemp("cache"))
    return est.fit()


def test_params_round_trip_and_clone():
    est = CMSCEstimator(lam=0.1, channel="rayleigh")
    assert est.get_params()["lam"] == 0.1
    other = clone(est).set_params(snr_db=5.0)
    assert other.channel == "rayleigh" and other.snr_db == 5.0 and est.snr_db == 20.0


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        CMSCEstimator().predict([1])


def test_predict_and_score(fitted):
    dets = fitted.predict([1, 2, 3])
    assert len(dets) == 3 and all(isinstance(d, DetectionSet) for d in dets)
    s = fitted.score(np.array([1, 2, 3]))
    assert 0.0 <= s <= 1.0
    assert s == fitted.score([1, 2, 3])


def test_bad_params_raise(fitted):
    with pytest.raises(ContractError):
        clone(fitted).set_params(method="analog").fit().predict([1])
    with pytest.raises(ContractError):
        fitted.predict([])
