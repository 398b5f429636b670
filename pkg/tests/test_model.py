import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cophase import cplx1
from cophase.model import (
    CoherenceLayout,
    DimensionError,
    ForwardOperator,
    NoiseSpec,
    PhaseDifferenceUndefined,
    TrueSolution,
    add_noise,
    forward_apply,
    noise_to_signal,
    observe_partial,
    phase_diff_from_magnitudes,
    relative_deviation,
    success,
)


def _cplx(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


# --- layout and operator ------------------------------------------------------

def test_groups_partition_observations():
    lay = CoherenceLayout(M=4, C=3)
    idx = np.concatenate([lay.group(m) for m in range(lay.M)])
    assert sorted(idx) == list(range(lay.size))
    np.testing.assert_array_equal(lay.group(1), [1, 5, 9])


def test_layout_rejects_nonpositive():
    with pytest.raises(ValueError):
        CoherenceLayout(M=0, C=2)


def test_operator_row_count_must_match_layout(rng):
    with pytest.raises(DimensionError):
        ForwardOperator(_cplx(rng, 5, 3), CoherenceLayout(M=2, C=2))


def test_operator_blocks(rng):
    A = _cplx(rng, 6, 4)
    op = ForwardOperator(A, CoherenceLayout(M=3, C=2))
    np.testing.assert_array_equal(op.block(1), A[3:])
    assert op.blocks().shape == (2, 3, 4)
    with pytest.raises(ValueError):
        op.entries[0, 0] = 0


# --- forward_apply ------------------------------------------------------------

def test_forward_identity(rng):
    x = _cplx(rng, 5)
    op = ForwardOperator(np.eye(5, dtype=complex), CoherenceLayout(M=5, C=1))
    np.testing.assert_array_equal(forward_apply(op, x), x)


def test_forward_ones_column():
    op = ForwardOperator(np.ones((2, 1)), CoherenceLayout(M=1, C=2))
    np.testing.assert_array_equal(forward_apply(op, [1]), [1, 1])


def test_forward_matches_triple_loop(rng):
    A, x = _cplx(rng, 6, 4), _cplx(rng, 4)
    ref = np.zeros(6, complex)
    for i in range(6):
        for k in range(4):
            ref[i] += A[i, k] * x[k]
    got = forward_apply(ForwardOperator(A, CoherenceLayout(M=3, C=2)), x)
    assert np.linalg.norm(got - ref) <= 1e-14 * np.linalg.norm(ref)


def test_forward_dimension_error(rng):
    op = ForwardOperator(_cplx(rng, 4, 3), CoherenceLayout(M=2, C=2))
    with pytest.raises(DimensionError):
        forward_apply(op, np.ones(4))


def test_true_solution(rng):
    op = ForwardOperator(_cplx(rng, 4, 3), CoherenceLayout(M=2, C=2))
    ts = TrueSolution.from_operator(op, _cplx(rng, 3))
    np.testing.assert_allclose(ts.b_true, op.entries @ ts.xi)


# --- observe_partial ----------------------------------------------------------

def test_observe_equal_phases():
    obs = observe_partial(CoherenceLayout(M=1, C=2), [1, 1])
    np.testing.assert_array_equal(obs.magnitudes, [1, 1])
    assert obs.phase_diffs.shape == (1, 1) and obs.phase_diffs[0, 0] == 0
    np.testing.assert_allclose(obs.B_diag, [[1], [1]])


def test_observe_quadrature():
    obs = observe_partial(CoherenceLayout(M=1, C=2), [1, 1j])
    assert obs.phase_diffs[0, 0] == pytest.approx(np.pi / 2)
    np.testing.assert_allclose(obs.B_blocks[1], [[1j]], atol=1e-16)


def test_phase_wrapped_to_half_open_interval():
    obs = observe_partial(CoherenceLayout(M=1, C=2), [1, -1])
    assert obs.phase_diffs[0, 0] == pytest.approx(np.pi)
    obs = observe_partial(CoherenceLayout(M=1, C=2), [1j, -1j])
    assert obs.phase_diffs[0, 0] == pytest.approx(np.pi)


def test_B_structure(rng):
    lay = CoherenceLayout(M=4, C=3)
    b = _cplx(rng, lay.size)
    obs = observe_partial(lay, b)
    np.testing.assert_allclose(np.abs(obs.B_diag).ravel(), np.abs(b))
    assert np.all(obs.B_diag[0].imag == 0) and np.all(obs.B_diag[0].real >= 0)
    Bs = obs.B_stacked
    assert Bs.shape == (12, 4)
    assert np.all(np.count_nonzero(Bs, axis=0) == 3)
    assert obs.rank_B == 4
    psi = np.exp(1j * np.angle(b[:4]))
    np.testing.assert_allclose(obs.apply_B(psi), b, atol=1e-14)
    np.testing.assert_allclose(obs.apply_B(psi), Bs @ psi, atol=1e-14)
    r = _cplx(rng, 12)
    np.testing.assert_allclose(obs.apply_BH(r), Bs.conj().T @ r, atol=1e-13)


def test_zero_entries_store_plain_zero():
    lay = CoherenceLayout(M=3, C=2)
    b = np.array([0, 2j, 0, 1 + 1j, 0, 0])
    obs = observe_partial(lay, b)
    # group 0: block-0 entry zero, anchor moves to block 1
    assert obs.anchors[0] == 1
    assert obs.B_diag[0, 0] == 0 and obs.B_diag[1, 0] == pytest.approx(np.sqrt(2))
    # group 2 vanishes entirely
    assert obs.zero_groups.tolist() == [False, False, True]
    assert obs.rank_B == 2
    assert np.all(obs.B_diag[:, 2] == 0)
    np.testing.assert_allclose(np.abs(obs.B_diag).ravel(), np.abs(b))


def test_zero_tolerance_is_relative():
    obs = observe_partial(CoherenceLayout(M=2, C=1), [1.0, 1e-15])
    assert obs.magnitudes[1] == 0 and obs.zero_groups.tolist() == [False, True]


def test_observe_length_error():
    with pytest.raises(DimensionError):
        observe_partial(CoherenceLayout(M=2, C=2), np.ones(3))


def test_observations_immutable(rng):
    obs = observe_partial(CoherenceLayout(M=2, C=2), _cplx(rng, 4))
    with pytest.raises(ValueError):
        obs.magnitudes[0] = 1.0


_vec = arrays(np.complex128, st.integers(1, 24).map(lambda k: 2 * k),
              elements=st.one_of(st.just(0j), st.complex_numbers(min_magnitude=1e-6, max_magnitude=1e3)))


@settings(max_examples=60, deadline=None)
@given(b=_vec, theta=st.floats(-10, 10))
def test_global_phase_invariance(b, theta):
    lay = CoherenceLayout(M=len(b) // 2, C=2)
    o1, o2 = observe_partial(lay, b), observe_partial(lay, np.exp(1j * theta) * b)
    np.testing.assert_allclose(o1.magnitudes, o2.magnitudes, rtol=1e-12, atol=1e-12)
    live = ~o1.zero_mask[1] & ~o2.zero_mask[1] & (np.abs(b[len(b) // 2:]) > 1e-6 * max(np.abs(b).max(), 1e-300))
    d = np.angle(np.exp(1j * (o1.phase_diffs[live, 0] - o2.phase_diffs[live, 0])))
    assert np.all(np.abs(d) < 1e-6)


@settings(max_examples=60, deadline=None)
@given(b=_vec)
def test_round_trip_up_to_group_phase(b):
    lay = CoherenceLayout(M=len(b) // 2, C=2)
    obs = observe_partial(lay, b)
    bb = np.where(obs.zero_mask.ravel(), 0, b).reshape(2, -1)
    ref = bb[obs.anchors, np.arange(lay.M)]
    unit = np.where(ref == 0, 1, ref / np.where(ref == 0, 1, np.abs(ref)))
    rebuilt = (obs.B_diag * unit[None]).ravel()
    np.testing.assert_allclose(rebuilt, bb.ravel(), rtol=1e-9, atol=1e-9 * max(np.abs(b).max(), 1))


# --- phase_diff_from_magnitudes ----------------------------------------------

def test_phase_diff_examples():
    assert phase_diff_from_magnitudes(1, 1, 2, np.sqrt(2)) == pytest.approx(0, abs=1e-15)
    assert phase_diff_from_magnitudes(1, 1, np.sqrt(2), 2) == pytest.approx(np.pi / 2)


def test_phase_diff_matches_complex_argument(rng):
    bk, bm = _cplx(rng, 1000), _cplx(rng, 1000)
    got = np.array([phase_diff_from_magnitudes(abs(k), abs(m), abs(k + m), abs(k + 1j * m))
                    for k, m in zip(bk, bm)])
    ref = np.angle(bk * np.conj(bm))
    d = np.angle(np.exp(1j * (got - ref)))
    assert np.max(np.abs(d)) <= 1e-12


def test_phase_diff_undefined():
    with pytest.raises(PhaseDifferenceUndefined):
        phase_diff_from_magnitudes(0, 0, 0, 0)


# --- noise --------------------------------------------------------------------

def test_zero_noise_is_identity(rng):
    b = _cplx(rng, 10)
    np.testing.assert_array_equal(add_noise(b, NoiseSpec(0.0, 1)), b)


def test_noise_ratio_exact_large_instance(rng):
    N, M, C = 1000, 1500, 2
    A = _cplx(rng, C * M, N)
    b = A @ _cplx(rng, N)
    bp = add_noise(b, NoiseSpec(1e-6, 3))
    assert noise_to_signal(bp, b) == pytest.approx(1e-6, rel=1e-12)


def test_noise_deterministic(rng):
    b = _cplx(rng, 20)
    np.testing.assert_array_equal(add_noise(b, NoiseSpec(0.1, 9)), add_noise(b, NoiseSpec(0.1, 9)))
    assert not np.array_equal(add_noise(b, NoiseSpec(0.1, 9)), add_noise(b, NoiseSpec(0.1, 10)))


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        add_noise(np.ones(3), NoiseSpec(-1e-3, 0))


@settings(max_examples=50, deadline=None)
@given(n=st.floats(1e-8, 10), seed=st.integers(0, 2 ** 32), size=st.integers(1, 50))
def test_noise_ratio_property(n, seed, size):
    b = np.random.default_rng(seed).standard_normal(size) + 1j
    assert noise_to_signal(add_noise(b, NoiseSpec(n, seed)), b) == pytest.approx(n, rel=1e-12)


def test_noise_to_signal_examples(rng):
    b = _cplx(rng, 8)
    assert noise_to_signal(b, b) == 0
    assert noise_to_signal(2 * b, b) == pytest.approx(1, rel=1e-15)
    d = _cplx(rng, 8)
    d *= 0.5 * np.linalg.norm(b) / np.linalg.norm(d)
    assert noise_to_signal(b + d, b) == pytest.approx(0.5, rel=1e-14)
    with pytest.raises(ZeroDivisionError):
        noise_to_signal(b, np.zeros(8))
    with pytest.raises(DimensionError):
        noise_to_signal(b[:3], b)


# --- relative deviation and success ------------------------------------------

def test_rd_gauge(rng):
    op = ForwardOperator(_cplx(rng, 8, 3), CoherenceLayout(M=4, C=2))
    xi = _cplx(rng, 3)
    assert relative_deviation(op, xi, xi) == 0
    for theta in (0.3, -2.0, np.pi):
        assert relative_deviation(op, 2 * np.exp(1j * theta) * xi, xi) <= 1e-15


def test_rd_orthogonal_is_one(rng):
    A = _cplx(rng, 8, 3)
    op = ForwardOperator(A, CoherenceLayout(M=4, C=2))
    xi = _cplx(rng, 3)
    # Gram-Schmidt on the A-images: make A x orthogonal to A xi
    y = _cplx(rng, 3)
    ax, ay = A @ xi, A @ y
    x = y - (np.vdot(ax, ay) / np.vdot(ax, ax)) * xi
    assert abs(np.vdot(A @ xi, A @ x)) < 1e-12 * np.linalg.norm(A @ x) * np.linalg.norm(ax)
    assert relative_deviation(op, x, xi) == pytest.approx(1.0, abs=1e-12)


def test_rd_zero_estimate(rng):
    op = ForwardOperator(_cplx(rng, 4, 2), CoherenceLayout(M=2, C=2))
    assert relative_deviation(op, np.zeros(2), _cplx(rng, 2)) == 1.0


def test_success_threshold():
    assert success(2e-4, 1e-4)
    assert not success(3e-4, 1e-4)
    assert not success(3.1e-4, 1e-4)
    assert success(2.999e-4, 1e-4)
    assert success(0.0, 1e-9)


# --- CPLX1 --------------------------------------------------------------------

def test_cplx1_round_trip(tmp_path, rng):
    A = _cplx(rng, 5, 3)
    cplx1.write(tmp_path / "a.cplx1", A)
    np.testing.assert_array_equal(cplx1.read(tmp_path / "a.cplx1"), A)
    v = _cplx(rng, 4)
    assert cplx1.loads(cplx1.dumps(v)).shape == (4, 1)


def test_cplx1_layout_is_row_major_little_endian():
    raw = cplx1.dumps(np.array([[1 + 2j, 3 + 4j]]))
    assert raw[:8] == b"CPLX1\x00\x00\x00"
    assert int.from_bytes(raw[8:16], "little") == 1 and int.from_bytes(raw[16:24], "little") == 2
    np.testing.assert_array_equal(np.frombuffer(raw[24:], "<f8"), [1, 2, 3, 4])


def test_cplx1_rejects_bad_input():
    with pytest.raises(cplx1.FormatError):
        cplx1.loads(b"NOTCPLX1" + bytes(16))
    with pytest.raises(cplx1.FormatError):
        cplx1.loads(cplx1.dumps(np.ones((2, 2)))[:-1])
