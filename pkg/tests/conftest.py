import numpy as np
import pytest

from distilkit.student import StudentConfig, init_params


def fd_gradient(f, tensor, eps=1e-3):
    """Central finite differences of scalar-valued f() w.r.t. tensor.data."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        grad_flat[i] = (up - down) / (2.0 * eps)
    return grad


def max_rel_error(autodiff_grad, fd_grad):
    """Elementwise relative error with a unit floor so near-zero entries are
    compared absolutely."""
    denom = np.maximum(np.maximum(np.abs(autodiff_grad), np.abs(fd_grad)), 1.0)
    return (np.abs(autodiff_grad - fd_grad) / denom).max()


MICRO_CONFIG = StudentConfig(
    vocab_size=20,
    num_classes=3,
    embed_dim=4,
    lstm_hidden=3,
    teacher_hidden=6,
    max_len=5,
    dropout_rate=0.0,
    recurrent_dropout_rate=0.0,
)


@pytest.fixture
def micro_params():
    return init_params(MICRO_CONFIG, seed=7)
