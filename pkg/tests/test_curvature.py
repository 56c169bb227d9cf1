import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_example
from gdig.curvature import (accumulate, dense_efim, dense_kfac, factors_from_matrices, ihvp, load_factors,
                            prepare_inverse, save_factors)
from gdig.errors import FormatError, InputError, SizeError
from gdig.gradfeat import LayerSelector
from gdig.numkit import spd_solve
from gdig.toylm import ModelConfig, backward, init_params


def rand_psd(gen, n, rank=None):
    r = gen.standard_normal((n, rank or n))
    return r @ r.T


def test_single_token_factors(small_params, gen):
    ex = random_example(gen, resp_len=1)
    sel = LayerSelector.explicit([0, 1, 2])
    f = accumulate([ex], small_params, sel)
    _, stats = backward(small_params, ex)
    for l in sel.layers:
        np.testing.assert_array_equal(f.A[l], np.outer(stats.a[l][0], stats.a[l][0]))
        np.testing.assert_array_equal(f.G[l], np.outer(stats.g[l][0], stats.g[l][0]))
    for l in sel.layers:
        one = LayerSelector.explicit([l])
        np.testing.assert_allclose(dense_efim([ex], small_params, one), np.kron(f.A[l], f.G[l]),
                                   atol=1e-10, rtol=0)


def test_accumulate_matches_direct_sum(small_params, gen):
    data = [random_example(gen, k, resp_len=k + 2) for k in range(3)]
    sel = LayerSelector.explicit([1])
    f = accumulate(data, small_params, sel)
    A = sum(backward(small_params, e)[1].a[1].T @ backward(small_params, e)[1].a[1] for e in data) / 9
    G = sum(backward(small_params, e)[1].g[1].T @ backward(small_params, e)[1].g[1] for e in data) / 9
    np.testing.assert_allclose(f.A[1], A, rtol=1e-12)
    np.testing.assert_allclose(f.G[1], G, rtol=1e-12)
    assert f.count == 9
    for M in (f.A[1], f.G[1]):
        np.testing.assert_array_equal(M, M.T)
        assert np.linalg.eigvalsh(M).min() >= -1e-10


def test_prepare_inverse_spectrum():
    inv = prepare_inverse(factors_from_matrices({0: np.eye(2)}, {0: np.eye(3)}), 0.5)
    np.testing.assert_allclose(inv.kron_spectrum(0) + inv.damping, 1.5)
    inv = prepare_inverse(factors_from_matrices({0: np.diag([1.0, 3.0])}, {0: np.diag([2.0, 5.0])}), 1.0)
    np.testing.assert_allclose(np.sort(inv.kron_spectrum(0).ravel()), [2, 5, 6, 15])
    for lam in (0.0, -1.0, np.nan):
        with pytest.raises(InputError):
            prepare_inverse(factors_from_matrices({0: np.eye(2)}, {0: np.eye(2)}), lam)


def test_ihvp_dense_oracle(gen):
    A, G, lam = rand_psd(gen, 4), rand_psd(gen, 2), 0.3
    inv = prepare_inverse(factors_from_matrices({0: A}, {0: G}), lam)
    v = gen.standard_normal(8)
    np.testing.assert_allclose(ihvp(inv, v), spd_solve(np.kron(A, G) + lam * np.eye(8), v), atol=1e-9)
    np.testing.assert_allclose((np.kron(A, G) + lam * np.eye(8)) @ ihvp(inv, v), v, atol=1e-9)


def test_ihvp_limits(gen):
    v = gen.standard_normal(6)
    inv = prepare_inverse(factors_from_matrices({0: np.eye(3)}, {0: np.eye(2)}), 1e-12)
    np.testing.assert_allclose(ihvp(inv, v), v, atol=1e-9)
    A, G = rand_psd(gen, 3), rand_psd(gen, 2)
    A, G = A / np.linalg.norm(A, 2), G / np.linalg.norm(G, 2)
    inv = prepare_inverse(factors_from_matrices({0: A}, {0: G}), 1e9)
    np.testing.assert_allclose(ihvp(inv, v), v / 1e9, rtol=1e-6)


def test_multi_layer_block_diagonal(gen):
    A = {0: rand_psd(gen, 3), 2: rand_psd(gen, 2)}
    G = {0: rand_psd(gen, 2), 2: rand_psd(gen, 3)}
    f = factors_from_matrices(A, G)
    inv = prepare_inverse(f, 0.1)
    v = gen.standard_normal(12)
    np.testing.assert_allclose(ihvp(inv, v), spd_solve(dense_kfac(f) + 0.1 * np.eye(12), v), atol=1e-9)


@given(st.integers(0, 2**31), st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_ihvp_properties(seed, lam1, lam2):
    gen = np.random.default_rng(seed)
    f = factors_from_matrices({0: rand_psd(gen, 3, 2)}, {0: rand_psd(gen, 2, 1)})
    v, w = gen.standard_normal(6), gen.standard_normal(6)
    inv = prepare_inverse(f, lam1)
    np.testing.assert_allclose(ihvp(inv, v + w), ihvp(inv, v) + ihvp(inv, w), atol=1e-10 * (1 + 1 / lam1))
    assert v @ ihvp(inv, v) > 0
    lo, hi = sorted((lam1, lam2))
    q_lo = v @ ihvp(prepare_inverse(f, lo), v)
    q_hi = v @ ihvp(prepare_inverse(f, hi), v)
    assert q_lo >= q_hi * (1 - 1e-12)


def test_dense_efim_rank_one_and_guard(small_params, gen):
    ex = random_example(gen)
    sel = LayerSelector.explicit([2])
    m = dense_efim([ex], small_params, sel)
    assert np.linalg.matrix_rank(m) == 1
    np.testing.assert_array_equal(m, m.T)
    with pytest.raises(SizeError):
        dense_efim([ex], init_params(ModelConfig(), 0), LayerSelector.final_only(ModelConfig()))


def test_factor_file_roundtrip(tmp_path, gen):
    f = factors_from_matrices({0: rand_psd(gen, 3), 4: rand_psd(gen, 2)}, {0: rand_psd(gen, 2), 4: rand_psd(gen, 5)}, 17)
    path = tmp_path / "f.gkfc"
    save_factors(f, path)
    g = load_factors(path)
    assert g.layers == (0, 4) and g.count == 17
    for l in g.layers:
        np.testing.assert_array_equal(g.A[l], f.A[l])
        np.testing.assert_array_equal(g.G[l], f.G[l])
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(FormatError):
        load_factors(path)
