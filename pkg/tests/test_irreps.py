import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmea.irreps import (
    P,
    DegenerateInputError,
    EquivariantFeature,
    InvalidRotationError,
    Irreps,
    apply_group_action,
    axis_angle_rotation,
    cg_entries,
    check_rotation,
    clebsch_gordan,
    random_rotation,
    spherical_harmonics,
    wigner_d,
)

seeds = st.integers(min_value=0, max_value=2**31 - 1)


def test_irreps_parse_and_counts():
    ir = Irreps.parse("16x0+8x1+2x3")
    assert ir.dim == 16 + 8 * 3 + 2 * 7
    assert ir.num_mult == 26
    assert ir.lmax == 3
    assert ir.mult(2) == 0
    assert str(Irreps.parse(str(ir))) == str(ir)


@pytest.mark.parametrize("bad", [((4, 1), (4, 0)), ((4, 1), (2, 1)), ((0, 0),)])
def test_irreps_rejects_unsorted_duplicate_or_empty(bad):
    with pytest.raises(ValueError):
        Irreps(bad)


def test_feature_shape_validation():
    ir = Irreps.parse("2x0+3x1")
    with pytest.raises(ValueError):
        EquivariantFeature(ir, {0: np.zeros((2, 1)), 1: np.zeros((3, 2))})


def test_wigner_trivial_cases():
    R = random_rotation(0)
    assert np.array_equal(wigner_d(0, R), np.ones((1, 1)))
    for l in range(4):
        assert np.array_equal(wigner_d(l, np.eye(3)), np.eye(2 * l + 1))


def test_wigner_l1_is_permuted_rotation():
    R = axis_angle_rotation([0, 0, 1], math.pi / 2)
    assert np.allclose(wigner_d(1, R), P @ R @ P.T, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(seeds, seeds)
def test_wigner_orthogonal_and_homomorphism(s1, s2):
    R1, R2 = random_rotation(s1), random_rotation(s2)
    for l in range(4):
        D1, D2 = wigner_d(l, R1), wigner_d(l, R2)
        assert np.abs(D1 @ D1.T - np.eye(2 * l + 1)).max() < 1e-10
        assert np.abs(wigner_d(l, R1 @ R2) - D1 @ D2).max() < 1e-10


def test_rotation_validation():
    with pytest.raises(InvalidRotationError):
        check_rotation(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(InvalidRotationError):
        wigner_d(2, np.eye(3) * 1.01)


def test_sh_constant_and_z_axis():
    (y0,) = spherical_harmonics(0, [0.3, 0.4, np.sqrt(1 - 0.25)])
    assert y0[0] == pytest.approx(1 / math.sqrt(4 * math.pi), abs=1e-15)
    y1 = spherical_harmonics(1, [0.0, 0.0, 1.0])[1]
    # l=1 basis is (y, z, x): only the middle slot is nonzero
    assert np.count_nonzero(np.abs(y1) > 1e-15) == 1
    assert y1[1] == pytest.approx(math.sqrt(3 / (4 * math.pi)), abs=1e-15)


def test_sh_orthonormal_by_quadrature():
    # Gauss-Legendre in cos(theta) times uniform phi integrates degree <= 6 exactly
    xs, ws = np.polynomial.legendre.leggauss(8)
    phis = np.arange(16) * 2 * math.pi / 16
    ct, ph = np.meshgrid(xs, phis, indexing="ij")
    st_ = np.sqrt(1 - ct**2)
    d = np.stack([st_ * np.cos(ph), st_ * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    w = (np.outer(ws, np.full(16, 2 * math.pi / 16))).ravel()
    Y = np.concatenate(spherical_harmonics(3, d), axis=-1)
    G = (Y * w[:, None]).T @ Y
    assert np.abs(G - np.eye(16)).max() < 1e-12


def test_sh_rejects_degenerate_direction():
    with pytest.raises(DegenerateInputError):
        spherical_harmonics(2, [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        spherical_harmonics(2, [0.0, 0.0, 2.0])


def test_sh_equivariance_100_draws():
    rng = np.random.default_rng(1)
    for _ in range(100):
        r = rng.standard_normal(3)
        r /= np.linalg.norm(r)
        R = random_rotation(rng)
        Yr = spherical_harmonics(3, R @ r)
        Y = spherical_harmonics(3, r)
        for l in range(4):
            assert np.abs(Yr[l] - wigner_d(l, R) @ Y[l]).max() < 1e-10


def test_cg_trivial_and_selection_rule():
    assert cg_entries(0, 0, 0) == {(0, 0, 0): 1.0}
    assert clebsch_gordan(1, 1, 3).size == 0
    assert cg_entries(1, 1, 3) == {}


def test_cg_110_is_scaled_identity():
    C = clebsch_gordan(1, 1, 0)[:, :, 0]
    assert np.allclose(np.abs(C), np.eye(3) / math.sqrt(3), atol=1e-15)
    # a single overall sign: the pairing is an invariant dot product
    assert len({np.sign(C[i, i]) for i in range(3)}) == 1


def test_cg_against_complex_racah_values():
    # brute-force real-basis transform of an independent complex CG table (sympy)
    from sympy.physics.quantum.cg import CG

    from mmea.irreps import real_basis_change

    for l1, l2, l3 in [(1, 1, 2), (2, 1, 1), (2, 2, 2), (3, 1, 2)]:
        Cc = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
        for m1 in range(-l1, l1 + 1):
            for m2 in range(-l2, l2 + 1):
                if abs(m1 + m2) <= l3:
                    Cc[m1 + l1, m2 + l2, m1 + m2 + l3] = float(CG(l1, m1, l2, m2, l3, m1 + m2).doit())
        U1, U2, U3 = (real_basis_change(l) for l in (l1, l2, l3))
        Cr = np.einsum("ai,bj,ijk,ck->abc", U1.conj(), U2.conj(), Cc, U3)
        ref = Cr.real if np.abs(Cr.real).max() > np.abs(Cr.imag).max() else Cr.imag
        assert np.abs(ref - clebsch_gordan(l1, l2, l3)).max() < 1e-12


def test_cg_equivariance_and_orthonormality_all_orders():
    rots = [random_rotation(s) for s in range(20)]
    for l1 in range(4):
        for l2 in range(4):
            blocks = []
            for l3 in range(abs(l1 - l2), min(l1 + l2, 6) + 1):
                C = clebsch_gordan(l1, l2, l3)
                blocks.append(C.reshape(-1, 2 * l3 + 1))
                for R in rots:
                    D1, D2, D3 = wigner_d(l1, R), wigner_d(l2, R), wigner_d(l3, R)
                    # C(D1 x, D2 y) = D3 C(x, y) for all x, y
                    lhs = np.einsum("ai,bj,abk->ijk", D1, D2, C)
                    rhs = np.einsum("kc,ijc->ijk", D3, C)
                    assert np.abs(lhs - rhs).max() < 1e-10
            Cmat = np.concatenate(blocks, axis=1)
            assert np.abs(Cmat.T @ Cmat - np.eye(Cmat.shape[1])).max() < 1e-10


def test_group_action_trivial_cases():
    rng = np.random.default_rng(0)
    ir = Irreps.parse("4x0")
    h = EquivariantFeature.random(ir, rng)
    out = apply_group_action(random_rotation(1), h)
    assert np.array_equal(out.data[0], h.data[0])
    ir = Irreps.parse("4x0+3x1+2x2")
    h = EquivariantFeature.random(ir, rng)
    same = apply_group_action(np.eye(3), h)
    for l in h.data:
        assert np.array_equal(same.data[l], h.data[l])


@settings(max_examples=25, deadline=None)
@given(seeds, seeds, seeds)
def test_group_action_composition_and_norms(s1, s2, s3):
    ir = Irreps.parse("3x0+2x1+2x2+1x3")
    h = EquivariantFeature.random(ir, np.random.default_rng(s3), lead=(5,))
    R1, R2 = random_rotation(s1), random_rotation(s2)
    two = apply_group_action(R2, apply_group_action(R1, h))
    one = apply_group_action(R2 @ R1, h)
    for l in h.data:
        assert np.abs(two.data[l] - one.data[l]).max() < 1e-10
        assert np.linalg.norm(one.data[l]) == pytest.approx(np.linalg.norm(h.data[l]), rel=1e-10)
    assert np.array_equal(one.data[0], h.data[0])


def test_random_rotation_deterministic_and_haar_mean():
    assert np.array_equal(random_rotation(7), random_rotation(7))
    rng = np.random.default_rng(3)
    Rs = np.array([random_rotation(rng) for _ in range(10_000)])
    assert np.abs(Rs.mean(axis=0)).max() < 0.02
    for R in Rs[:50]:
        check_rotation(R, tol=1e-12)
