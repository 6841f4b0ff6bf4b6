import numpy as np
import pytest

from scama.model import ModelConfig, SCAMAModel


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation relative to the largest gradient magnitude of the tensor."""
    return float(np.max(np.abs(analytic - numeric)) / (np.max(np.abs(analytic)) + 1e-8))


def small_config(**kw) -> ModelConfig:
    base = dict(d_in=6, vocab_size=8, d_model=8, heads=2, d_ff=16, n_encoder=2, n_decoder_att=1,
                n_decoder_fsmn=1, chunk_size=3, mem_look_back=3, dec_mem_order=3, dropout=0.0, c_max=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    return SCAMAModel(small_config(), seed=3, dtype=np.float64)
