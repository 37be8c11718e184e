import numpy as np
import pytest

from hybrid_attn.checkpoint import CheckpointError, check_compatible, load, save
from hybrid_attn.config import RunConfig, dumps, loads
from hybrid_attn.model import init_params


def test_round_trip(tmp_path):
    cfg = loads("model.precision = f64\n")
    P = init_params(cfg.model)
    path = tmp_path / "c.npz"
    save(path, P, dumps(cfg))
    Q, text = load(path)
    assert loads(text) == cfg
    assert Q.names() == P.names()
    for n in P.names():
        assert Q[n].dtype == P[n].dtype
        np.testing.assert_array_equal(Q[n], P[n])
    check_compatible(Q, P)


def test_rejects_foreign_and_missing(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(CheckpointError):
        load(tmp_path / "x.npz")
    with pytest.raises(CheckpointError):
        load(tmp_path / "missing.npz")


def test_incompatible_shapes(tmp_path):
    P = init_params(RunConfig().model)
    Q = init_params(loads("block.d_model = 64\n").model)
    with pytest.raises(CheckpointError):
        check_compatible(Q, P)
