import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqmask.diffcore import ContractError, Tensor
from freqmask import diffcore as dc
from freqmask.spectral import (Spectrum, band_powers, conjugate_index, dft_forward, dft_inverse, enforce_hermitian,
                               expand_mask, hermitian_parts, inverse_real, make_partition, zero_cells)

from conftest import assert_grad_close, numeric_grad


def naive_dft(x):
    T = x.shape[-1]
    t = np.arange(T)
    out = np.zeros(x.shape, dtype=complex)
    for k in range(T):
        out[..., k] = np.sum(x * np.exp(-2j * np.pi * k * t / T), axis=-1)
    return out


def is_hermitian(spec, tol):
    z = spec.to_complex()
    return np.max(np.abs(z - np.conj(z[..., conjugate_index(spec.bins)]))) <= tol


# -- forward / inverse -------------------------------------------------------
def test_impulse():
    s = dft_forward(np.array([1.0, 0, 0, 0]))
    np.testing.assert_array_equal(s.real, [1, 1, 1, 1])
    np.testing.assert_array_equal(s.imag, [0, 0, 0, 0])


def test_dc_signal():
    s = dft_forward(np.ones(4))
    np.testing.assert_allclose(s.real, [4, 0, 0, 0], atol=1e-15)


@pytest.mark.parametrize("T", [8, 7, 64, 400])
def test_matches_naive_dft(T):
    x = np.random.default_rng(T).normal(size=(3, T))
    np.testing.assert_allclose(dft_forward(x).to_complex(), naive_dft(x), rtol=0, atol=1e-9 * max(1, T / 8))


def test_round_trip():
    x = np.random.default_rng(1).normal(size=(4, 16))
    assert np.max(np.abs(dft_inverse(dft_forward(x)) - x)) < 1e-9


def test_inverse_of_zero_and_dc():
    np.testing.assert_array_equal(dft_inverse(Spectrum(np.zeros(4), np.zeros(4))), np.zeros(4))
    np.testing.assert_allclose(dft_inverse(Spectrum(np.array([4.0, 0, 0, 0]), np.zeros(4))), np.ones(4))


def test_dft_needs_two_samples():
    with pytest.raises(ValueError):
        dft_forward(np.ones(1))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**31 - 1))
def test_parseval(T, seed):
    x = np.random.default_rng(seed).normal(size=(2, T))
    X = dft_forward(x).to_complex()
    np.testing.assert_allclose(np.sum(x ** 2), np.sum(np.abs(X) ** 2) / T, rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 48), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_linearity(T, a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=T), rng.normal(size=T)
    lhs = dft_forward(a * x + b * y).to_complex()
    rhs = a * dft_forward(x).to_complex() + b * dft_forward(y).to_complex()
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_real_input_spectrum_is_hermitian():
    assert is_hermitian(dft_forward(np.random.default_rng(2).normal(size=(3, 15))), 1e-9)


def test_inverse_real_gradient():
    rng = np.random.default_rng(3)
    re, im = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    w = rng.normal(size=(2, 8))
    tr, ti = Tensor(re, requires_grad=True), Tensor(im, requires_grad=True)
    (inverse_real(tr, ti) * w).sum().backward()
    for arr, g in ((re, tr.grad), (im, ti.grad)):
        num = numeric_grad(lambda: float((inverse_real(re, im).data * w).sum()), arr)
        assert_grad_close(g, num)


def test_inverse_real_matches_dft_inverse():
    rng = np.random.default_rng(4)
    s = Spectrum(rng.normal(size=(3, 10)), rng.normal(size=(3, 10)))
    np.testing.assert_array_equal(inverse_real(s.real, s.imag).data, dft_inverse(s))


# -- partition ----------------------------------------------------------------
def test_partition_twenty_bins_ten_bands():
    p = make_partition(20, 10)
    assert p.band_sizes() == [2, 1, 1, 1, 1, 1, 1, 1, 1, 1]
    assert sum(p.band_sizes()) == 11
    for k in range(20):
        assert p.band_of_bin[k] == p.band_of_bin[(20 - k) % 20]


def test_partition_single_band():
    assert np.all(make_partition(8, 1).band_of_bin == 0)


def test_partition_odd_length():
    p = make_partition(7, 3)
    assert p.band_sizes() == [2, 1, 1]
    assert list(p.band_of_bin[4:]) == [p.band_of_bin[3], p.band_of_bin[2], p.band_of_bin[1]]


def test_default_partition_edges():
    p = make_partition(400, 10)
    assert p.band_sizes() == [21] + [20] * 9
    assert p.band_edges_hz(200.0)[1] == (10.5, 20.0)


@pytest.mark.parametrize("T,B", [(8, 0), (8, 6), (1, 1)])
def test_partition_out_of_range(T, B):
    with pytest.raises(ContractError):
        make_partition(T, B)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 200).flatmap(lambda T: st.tuples(st.just(T), st.integers(1, T // 2 + 1))))
def test_partition_invariants(tb):
    T, B = tb
    p = make_partition(T, B)
    sizes = p.band_sizes()
    assert max(sizes) - min(sizes) <= 1 and min(sizes) >= 1
    assert sizes == sorted(sizes, reverse=True)
    pos = p.band_of_bin[: p.nonneg_bins]
    assert np.all(np.diff(pos) >= 0)  # contiguous
    assert np.array_equal(p.band_of_bin, p.band_of_bin[conjugate_index(T)])


# -- mask expansion -------------------------------------------------------------
def test_expand_all_ones():
    p = make_partition(16, 4)
    np.testing.assert_array_equal(expand_mask(np.ones((3, 4)), p), np.ones((3, 16)))


def test_expand_hand_example():
    a, b = 0.2, 0.7
    np.testing.assert_array_equal(expand_mask(np.array([[a, b]]), make_partition(4, 2)), [[a, a, b, a]])


def test_expand_degenerate_one_bin_bands():
    T = 10
    p = make_partition(T, T // 2 + 1)
    m = np.random.default_rng(5).uniform(size=(1, p.num_bands))
    e = expand_mask(m, p)
    for k in range(T):
        assert e[0, k] == e[0, (T - k) % T]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 120).flatmap(lambda T: st.tuples(st.just(T), st.integers(1, T // 2 + 1))),
       st.integers(0, 2**31 - 1))
def test_expanded_mask_is_conjugate_paired(tb, seed):
    T, B = tb
    p = make_partition(T, B)
    e = expand_mask(np.random.default_rng(seed).uniform(size=(2, B)), p)
    assert np.array_equal(e, e[:, conjugate_index(T)])


def test_expand_mask_gradient_sums_over_band():
    p = make_partition(10, 3)
    m = Tensor(np.zeros((1, 3)), requires_grad=True)
    expand_mask(m, p).sum().backward()
    np.testing.assert_array_equal(m.grad, [np.bincount(p.band_of_bin, minlength=3)])


def test_expand_band_mismatch():
    with pytest.raises(ContractError):
        expand_mask(np.ones((2, 3)), make_partition(16, 4))


# -- Hermitian projection ---------------------------------------------------------
def test_hermitian_fixed_point():
    s = dft_forward(np.random.default_rng(6).normal(size=(2, 12)))
    h = enforce_hermitian(s)
    np.testing.assert_allclose(h.real, s.real, atol=1e-12)
    np.testing.assert_allclose(h.imag, s.imag, atol=1e-12)


def test_purely_imaginary_constant():
    h = enforce_hermitian(Spectrum(np.zeros(8), np.ones(8)))
    assert h.imag[0] == 0 and h.imag[4] == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**31 - 1))
def test_random_spectrum_becomes_hermitian_and_idempotent(T, seed):
    rng = np.random.default_rng(seed)
    s = Spectrum(rng.normal(size=(3, T)), rng.normal(size=(3, T)))
    h = enforce_hermitian(s)
    assert is_hermitian(h, 1e-12)
    h2 = enforce_hermitian(h)
    np.testing.assert_allclose(h2.real, h.real, atol=1e-15)
    np.testing.assert_allclose(h2.imag, h.imag, atol=1e-15)
    full = np.fft.ifft(h.to_complex(), axis=-1)
    assert np.sum(full.imag ** 2) <= 1e-9 * max(np.sum(np.abs(full) ** 2), 1e-300)


def test_hermitian_parts_matches_array_version():
    rng = np.random.default_rng(7)
    s = Spectrum(rng.normal(size=(2, 9)), rng.normal(size=(2, 9)))
    re, im = hermitian_parts(Tensor(s.real), Tensor(s.imag))
    h = enforce_hermitian(s)
    np.testing.assert_array_equal(re.data, h.real)
    np.testing.assert_array_equal(im.data, h.imag)


# -- band powers and zeroing ------------------------------------------------------
def test_band_powers_zero():
    p = make_partition(8, 2)
    assert np.all(band_powers(Spectrum(np.zeros((2, 8)), np.zeros((2, 8))), p) == 0)


def test_band_powers_dc_only():
    p = make_partition(4, 1)
    out = band_powers(Spectrum(np.array([[4.0, 0, 0, 0]]), np.zeros((1, 4))), p)
    assert out[0, 0] == pytest.approx(16 / 3)  # one band of 3 non-negative bins


def test_band_powers_brute_force():
    rng = np.random.default_rng(8)
    T, B = 30, 4
    p = make_partition(T, B)
    s = Spectrum(rng.normal(size=(3, T)), rng.normal(size=(3, T)))
    brute = np.zeros((3, B))
    count = np.zeros(B)
    for k in range(T // 2 + 1):
        b = p.band_of_bin[k]
        count[b] += 1
        for c in range(3):
            brute[c, b] += s.real[c, k] ** 2 + s.imag[c, k] ** 2
    np.testing.assert_allclose(band_powers(s, p), brute / count, rtol=1e-10)


def test_zero_cells_hits_both_partners():
    p = make_partition(12, 3)
    s = dft_forward(np.random.default_rng(9).normal(size=(2, 12)))
    cells = np.zeros((2, 3), dtype=bool)
    cells[1, 2] = True
    z = zero_cells(s, cells, p)
    hit = p.band_of_bin == 2
    assert np.all(z.real[1, hit] == 0) and np.all(z.imag[1, hit] == 0)
    np.testing.assert_array_equal(z.real[0], s.real[0])
    assert is_hermitian(z, 1e-9)
