import os
import sys
import time

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from mvstrip.inference import FusionWeights, ModelBundle
from mvstrip.model import NetworkConfig, build
from mvstrip.phantom import PhantomSpec, make_cohort, make_phantom, subject_ids
from mvstrip.volume import Orientation

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

# configuration of the end-to-end phantom experiment
E2E_SIZE = 64
E2E_SUBJECTS = 20
E2E_CONFIG = NetworkConfig(kernel_size=3, depth=3, base_filters=8, convs_per_level=2)
E2E_LR = 1e-3

# filled by the acceptance tests and echoed in the terminal summary
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return NetworkConfig(kernel_size=3, depth=1, base_filters=2, convs_per_level=1)


@pytest.fixture(scope="session")
def small_phantom():
    return make_phantom(PhantomSpec(size=32, seed=7))


def random_bundle(config, target_shape, seed=0):
    nets = {r: build(config, seed=seed + i, orientation=r).eval() for i, r in enumerate(Orientation)}
    return ModelBundle(nets, FusionWeights(), tuple(target_shape), (1.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def phantom_experiment(tmp_path_factory):
    """Train the acceptance bundle once: 20 phantoms, 15 train/val, 5 held out."""
    from mvstrip.evaluation import mask_metrics
    from mvstrip.inference import skullstrip
    from mvstrip.training import TrainingHyperparams, build_slice_set, train_all

    start = time.perf_counter()
    ids = subject_ids(E2E_SUBJECTS)
    dataset = dict(zip(ids, make_cohort(E2E_SUBJECTS, PhantomSpec(size=E2E_SIZE), seed=0)))
    train_ids, val_ids, test_ids = ids[:12], ids[12:15], ids[15:]
    shape = (E2E_SIZE,) * 3
    hyper = TrainingHyperparams(epochs=10, slices_per_epoch=300, initial_lr=E2E_LR, seed=0)
    out_dir = tmp_path_factory.mktemp("e2e_bundle")
    bundle = train_all(
        build_slice_set({s: dataset[s] for s in train_ids}, shape),
        build_slice_set({s: dataset[s] for s in val_ids}, shape),
        E2E_CONFIG, hyper, out_dir=out_dir, target_shape=shape,
    )
    metrics = [mask_metrics(skullstrip(bundle, dataset[s][0])[0], dataset[s][1], s) for s in test_ids]
    return {
        "bundle": bundle,
        "bundle_dir": out_dir,
        "dataset": dataset,
        "test_ids": test_ids,
        "metrics": metrics,
        "seconds": time.perf_counter() - start,
    }
