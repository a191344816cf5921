import itertools
import math

import numpy as np
import pytest

from oat import tensor as T
from oat.positional import (
    PEConfig,
    PEMatrix,
    axis_widths,
    e2e_pe,
    encode_position,
    fit_rmse,
    gaussian_target,
    load_pe,
    pe_loss,
    save_pe,
    sinusoidal_pe,
    target_matrix,
    train_pe,
)
from oat.tensor import Tensor


@pytest.fixture(scope="module")
def trained():
    return train_pe(PEConfig(), seed=0)


def test_gaussian_target_values():
    assert gaussian_target(3, 3, 2.0) == 1.0
    assert gaussian_target(1, 3, 2.0) == pytest.approx(0.60653, abs=1e-5)
    assert gaussian_target(0, 6, 2.0) == pytest.approx(0.01111, abs=1e-5)
    f = target_matrix(11, 2.0)
    np.testing.assert_array_equal(f, f.T)
    np.testing.assert_array_equal(np.diag(f), 1.0)


def _perfect_table(L, sigma):
    # Cholesky factor of the (positive-definite) target gives rows with exactly those cosines
    return np.linalg.cholesky(target_matrix(L, sigma))


def test_pe_loss_zero_for_perfect_fit():
    P = _perfect_table(6, 2.0)
    cfg = PEConfig(L=6, d_axis=6)
    assert pe_loss(Tensor(P, dtype=np.float64), cfg).item() == pytest.approx(0.0, abs=1e-12)


def test_pe_loss_two_identical_rows():
    P = np.array([[1.0, 0.0], [1.0, 0.0]])
    cfg = PEConfig(L=2, d_axis=2)
    assert pe_loss(Tensor(P, dtype=np.float64), cfg).item() == pytest.approx((1 - math.exp(-0.125)) ** 2, abs=1e-6)
    assert (1 - math.exp(-0.125)) ** 2 == pytest.approx(0.01381, abs=1e-5)


def test_doubling_rows_adds_only_regulariser():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(5, 4))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    cfg = PEConfig(L=5, d_axis=4, lam=1.0)
    base = pe_loss(Tensor(P, dtype=np.float64), cfg).item()
    doubled = pe_loss(Tensor(2 * P, dtype=np.float64), cfg).item()
    assert doubled - base == pytest.approx(cfg.lam * 5 * (2 - 1) ** 2, abs=1e-9)


def test_pe_loss_rejects_zero_row():
    P = np.zeros((3, 4))
    P[0, 0] = P[1, 1] = 1.0
    with pytest.raises(FloatingPointError):
        pe_loss(Tensor(P, dtype=np.float64), PEConfig(L=3, d_axis=4))


def test_pe_loss_nonnegative_and_gradcheck():
    rng = np.random.default_rng(2)
    P = Tensor(rng.normal(size=(5, 6)), requires_grad=True, dtype=np.float64)
    cfg = PEConfig(L=5, d_axis=6)
    assert pe_loss(P, cfg).item() >= 0
    assert T.gradcheck(lambda: pe_loss(P, cfg), [P]) < 1e-6


def test_trained_table_fits_target(trained):
    assert fit_rmse(trained, 2.0) <= 0.05
    norms = trained.row_norms()
    assert norms.min() >= 0.95 and norms.max() <= 1.05
    assert trained.half_width() <= 3
    row = trained.cosine_matrix()[0]
    assert all(row[k + 1] <= row[k] + 0.02 for k in range(4))


def test_train_pe_deterministic(trained):
    again = train_pe(PEConfig(), seed=0)
    assert np.array_equal(again.P.data, trained.P.data)


def test_train_pe_reports_iteration_of_divergence():
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(FloatingPointError, match="iteration"):
        train_pe(PEConfig(L=4, d_axis=4, lr=1e30, iters=50), seed=0)


def test_sinusoidal_rows_and_slow_decay():
    pe = sinusoidal_pe(11, 42)
    np.testing.assert_allclose(pe.P.data[0], [0.0, 1.0] * 21)
    cos = pe.cosine_matrix()
    assert cos[0, 5] > gaussian_target(0, 5, 2.0)
    with pytest.raises(ValueError):
        sinusoidal_pe(11, 43)


def test_e2e_init_range():
    pe = e2e_pe(11, 42, seed=3)
    assert pe.P.requires_grad
    assert np.abs(pe.P.data).max() <= 0.1


def test_encode_position_contracts(trained):
    z = PEMatrix(Tensor(np.eye(2, 42), dtype=np.float64))
    code = encode_position(1, 2, 0, trained, trained, z, alpha=1.0)
    assert code.shape == (126,)
    assert np.all(encode_position(1, 2, 0, trained, trained, z, alpha=0.0).data == 0)
    np.testing.assert_allclose(encode_position(1, 2, 0, trained, trained, z, alpha=2.0).data, 2 * code.data)
    other = encode_position(1, 2, 1, trained, trained, z).data
    diff = np.nonzero(other != code.data)[0]
    assert diff.min() >= 84
    with pytest.raises(IndexError):
        encode_position(11, 0, 0, trained, trained, z)


def test_trained_codes_are_injective(trained):
    z = train_pe(PEConfig(L=2, d_axis=42, iters=2000), seed=5)
    codes = [
        encode_position(x, y, f, trained, trained, z).data
        for x, y, f in itertools.product(range(11), range(11), range(2))
    ]
    U = np.array(codes)
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    cos = U @ U.T
    np.fill_diagonal(cos, 0)
    assert cos.max() < 0.999


def test_axis_widths_sum_to_p():
    assert axis_widths(128) == (43, 43, 42)
    for p in range(3, 40):
        assert sum(axis_widths(p)) == p


def test_pe_export_round_trip(tmp_path, trained):
    path = tmp_path / "pe.bin"
    save_pe(path, {"x": trained, "y": trained, "z": trained})
    back = load_pe(path)
    assert set(back) == {"x", "y", "z"}
    assert np.array_equal(back["x"].P.data, trained.P.data)
    assert path.read_bytes().split(b"\n", 1)[0].find(b"oat-pe-v1") > 0


def test_config_validation_names_key():
    with pytest.raises(ValueError, match="pe.sigma"):
        PEConfig(sigma=0).validate()
    with pytest.raises(ValueError, match="pe.L"):
        PEConfig(L=1).validate()
