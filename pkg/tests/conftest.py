import numpy as np
import pytest

from dnfnet import shapes
from dnfnet.network import DNFNet, ModelConfig
from dnfnet.noise import NoiseSpec, add_noise
from dnfnet.patching import PatchDataset, extract_patches

TINY = dict(C=8, k1=2, k2=4, k3=6, k_res=4)


def identity_net(cfg: ModelConfig) -> DNFNet:
    """Hand-set weights so every head returns its input normal.

    Fusion copies the raw normals into channels 0-5 as (relu(n), relu(-n)),
    residual units output zero, and each head subtracts the two halves.
    """
    if cfg.C < 6 or cfg.head_width < 6 or cfg.fusion_width < 6:
        raise ValueError("identity construction needs at least 6 channels")
    net = DNFNet(cfg, seed=0)
    for name, p in net.params.items():
        p.data[:] = 0
    eye = np.eye(3)
    pm = np.hstack([eye, -eye])
    net.params["fusion.fc1.W"].data[:3, :6] = pm
    net.params["fusion.fc2.W"].data[:6, :6] = np.eye(6)
    for h in range(1, cfg.num_heads + 1):
        net.params[f"head{h}.fc1.W"].data[:6, :6] = np.eye(6)
        net.params[f"head{h}.fc2.W"].data[:6, :3] = pm.T
    return net


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_dataset():
    clean = shapes.icosphere(2)
    noisy = add_noise(clean, NoiseSpec("gaussian-normal", 0.2, rng_seed=1))
    return PatchDataset(N=24, K=8, samples=extract_patches(noisy, clean, 10, 24, 8, rng_seed=2))
