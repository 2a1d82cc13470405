import os

# keep BLAS pools single-threaded: acceptance timings and determinism checks
# assume one CPU thread (must run before numpy spins up its pools)
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from forplane.config import Config  # noqa: E402


def desk_config(**flat_overrides) -> Config:
    """The scaled-down configuration every desk-scale experiment runs at."""
    from forplane.config import config_from_flat
    cfg = Config()
    cfg.planes.levels = [8, 16, 32, 64]
    cfg.planes.feature_dim = 8
    cfg.encoding.bins = 8
    cfg.encoding.sigma = 1.0 / 8.0
    cfg.render.train_steps = 64
    cfg.render.eval_steps = 384
    cfg.occupancy.dims = [32, 32, 32, 8]
    cfg.occupancy.update_every = 8
    cfg.occupancy.probes_divisor = 16
    cfg.train.iterations = 2000
    cfg.train.batch_rays = 1024
    return config_from_flat(flat_overrides, base=cfg)


@pytest.fixture(scope="session")
def moving_sphere_dataset():
    """Criterion-3 scene: 64x64, 30 frames, amplitude 0.15."""
    from forplane.dataio import SynthConfig, generate_synthetic
    return generate_synthetic(SynthConfig(width=64, height=64, frames=30,
                                          amplitude=0.15))


@pytest.fixture(scope="session")
def trained_moving_sphere(moving_sphere_dataset):
    """Criterion-3 training run (single thread, 2000 iterations), shared by
    the criteria that inspect the trained model."""
    import time

    from forplane.trainer import train
    dataset, oracle = moving_sphere_dataset
    cfg = desk_config()
    t0 = time.perf_counter()
    state, rows = train(dataset, cfg)
    wall = time.perf_counter() - t0
    return {"state": state, "rows": rows, "dataset": dataset,
            "oracle": oracle, "wall_seconds": wall, "config": cfg}
