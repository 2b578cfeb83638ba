import numpy as np
import pytest

from hidepet import backbone as bb
from hidepet import bench
from hidepet.numcore import Tensor
from hidepet.rng import stream


def small_backbone(seed=0, n_layers=2, dim=8, heads=2, d_feat=6, dtype="float64"):
    cfg = bb.PretrainConfig(seed=seed, n_layers=n_layers, dim=dim, heads=heads,
                            d_feat=d_feat, dtype=dtype)
    return bb.init_backbone(cfg)


@pytest.fixture
def tiny_ckpt():
    """Random frozen float64 backbone for algebra and gradient tests."""
    return small_backbone()


@pytest.fixture(scope="session")
def desk_ckpt():
    """One pretrained desk checkpoint shared by the slower tests."""
    scfg = bench.StreamConfig(seed=1)
    return bb.pretrain(bench.make_pretext(scfg), bb.PretrainConfig(seed=1, max_epochs=40))


def rand_tensor(shape, seed, scale=1.0, requires_grad=False, dtype=np.float64):
    g = stream(seed, "rand", *shape)
    return Tensor((g.standard_normal(shape) * scale).astype(dtype), requires_grad=requires_grad)
