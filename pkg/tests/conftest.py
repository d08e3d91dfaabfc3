import numpy as np
import pytest

from worldprobe.dynamics import SystemSpec, sample_dataset
from worldprobe.worldmodel import ModelConfig, TrainHyper, init_model, train_ssl

TOY_SPEC = SystemSpec(dt=0.1, steps=30, substeps=50)
TOY_RANGES = {"m2": (0.5, 2.0)}
TOY_TARGETS = ("force", "force_magnitude", "speed", "radius", "mass", "momentum", "kinetic_energy")


@pytest.fixture(scope="session")
def toy_splits():
    ssl = sample_dataset(TOY_RANGES, 100, "ssl_train", 0, base=TOY_SPEC)
    ranges = ssl.generator_ranges
    probe = sample_dataset(TOY_RANGES, 40, "probe_train", 1, base=TOY_SPEC, reference=ranges, targets=TOY_TARGETS)
    ft = sample_dataset({"m2": (1.0, 1.0)}, 20, "ft_task", 2, base=TOY_SPEC, targets=TOY_TARGETS)
    ood = [sample_dataset({"m2": (2.5 + 0.5 * i, 3.0 + 0.5 * i)}, 6, "ood_test", 10 + i, base=TOY_SPEC,
                          reference=ranges, targets=TOY_TARGETS) for i in range(3)]
    return {"ssl": ssl, "probe": probe, "ft": ft, "ood": ood}


@pytest.fixture(scope="session")
def toy_model(toy_splits):
    params = init_model(ModelConfig(window=4, width=32, n_blocks=2, obs_dim=2, seed=0))
    trained, log = train_ssl(params, toy_splits["ssl"], TrainHyper(epochs=30, seed=0))
    return trained


def random_head(params, seed=0, scale=0.1):
    out = params.copy()
    rng = np.random.default_rng(seed)
    out.tensors["head.W"] = scale * rng.standard_normal(out.tensors["head.W"].shape)
    return out
