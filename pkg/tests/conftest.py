import numpy as np
import pytest

from adanode.model import Architecture, LatentODEModel, TimeSeriesWindow


@pytest.fixture
def tiny_arch():
    return Architecture(
        d_obs=1,
        d_lat=3,
        enc_len=8,
        enc_hidden=(8,),
        node_hidden=(8,),
        dec_hidden=(8,),
    )


@pytest.fixture
def tiny_model(tiny_arch):
    return LatentODEModel.init_random(tiny_arch, seed=0)


def make_windows(n, d_obs=1, n_ctx=6, n_tgt=3, seed=0, with_targets=True):
    """Smooth random windows on a shared time grid."""
    rng = np.random.default_rng(seed)
    t_ctx = np.arange(n_ctx) * 0.1
    t_tgt = (n_ctx + np.arange(n_tgt)) * 0.1
    windows = []
    for _ in range(n):
        phase = rng.uniform(0.0, 2.0 * np.pi, size=d_obs)
        amp = rng.uniform(0.5, 1.5, size=d_obs)
        y_ctx = amp * np.sin(t_ctx[:, None] * 2.0 + phase)
        y_tgt = amp * np.sin(t_tgt[:, None] * 2.0 + phase)
        windows.append(
            TimeSeriesWindow(t_ctx, y_ctx, t_tgt, y_tgt if with_targets else None)
        )
    return windows
