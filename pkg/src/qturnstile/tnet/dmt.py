"""Density-matrix truncation of one MPDO bond.

At bond ``j`` (between sites ``j`` and ``j + 1``) write the operator as
``rho = sum_ab L_a M_ab R_b`` with ``L_a`` an orthonormal basis of the
(left block, site j) operators and ``R_b`` one of the right block starting at
``j + 1``. Expectation values of ``O_left (x) O_right`` are bilinear in ``M``.
The truncation only modifies ``M`` inside the subspace annihilated by

* every operator on site ``j`` (times identity on the rest of the left block),
* every operator on site ``j + 1`` (times identity on the rest of the right block).

Every operator supported on three consecutive sites has single-site support on
one side of the bond, so all 3-site reduced density matrices, and anything
supported entirely on one side, are reproduced exactly. The trace is among them.

In projector form, with ``P_L`` the projector on the protected rows and
``P_R`` on the protected columns, ``M = P_L M + (1 - P_L) M P_R + F`` and only
the free part ``F = (1 - P_L) M (1 - P_R)`` is truncated.
"""

from __future__ import annotations

import time
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg as sla

from .mpdo import GRAM_MIN, MPDO, ZERO_SV, TruncationReport, gram_truncate, svd, truncation_rank, two_site_superop

if TYPE_CHECKING:
    from numpy.typing import NDArray

PIVOT_TOL = 1e-12


class DMTContractError(ValueError):
    """``max_bond`` is below the dimension of the protected subspace."""


def _range_basis(f: NDArray, tol: float = PIVOT_TOL, scale: float | None = None) -> NDArray:
    """Orthonormal basis of the column space of ``f`` by pivoted QR.

    Columns whose pivot falls below ``tol * scale`` are dropped; ``scale``
    defaults to the largest pivot.
    """
    if f.size == 0:
        return np.zeros((f.shape[0], 0), dtype=f.dtype)
    q, r, _ = sla.qr(f, mode="economic", pivoting=True, check_finite=False)
    diag = np.abs(np.diagonal(r))
    ref = diag[0] if scale is None else scale
    rank = int(np.count_nonzero(diag > tol * ref)) if diag.size and ref > 0 else 0
    return q[:, :rank]


def _identity_block(e: NDArray, p: int, env_major: bool) -> NDArray:
    """Orthonormal basis ``e/|e| (x) 1_p`` (or ``1_p (x) e/|e|``) as columns."""
    norm = np.linalg.norm(e)
    if norm == 0:
        return np.zeros((e.size * p, 0), dtype=e.dtype)
    eh = e / norm
    eye = np.eye(p, dtype=eh.dtype)
    return np.kron(eh[:, None], eye) if env_major else np.kron(eye, eh[:, None])


def dmt_truncate_matrix(
    m: NDArray,
    left_basis: NDArray,
    right_basis: NDArray,
    max_bond: int,
    trunc_tol: float = 0.0,
) -> tuple[NDArray, NDArray, float]:
    """Core DMT step on a bond matrix.

    Args:
        m: ``(R, C)`` bond matrix.
        left_basis: ``(R, r_l)`` orthonormal columns spanning the protected rows.
        right_basis: ``(C, r_r)`` orthonormal columns spanning the protected columns.
        max_bond: target bond dimension.
        trunc_tol: relative discarded-weight tolerance for the free block.

    Returns:
        ``(left, right, discarded)`` with ``left`` an ``(R, k)`` isometry,
        ``right`` a ``(k, C)`` matrix, ``left @ right`` the truncated ``m`` and
        ``discarded`` the removed weight relative to ``|m|^2``.

    Raises:
        DMTContractError: when ``max_bond`` is below the dimension of the
            protected directions ``m`` actually reaches (at most ``r_l + r_r``).
    """
    total = float(np.vdot(m, m).real)
    scale = np.sqrt(total)
    # protected directions that m never reaches would only waste bond slots
    a = left_basis.conj().T @ m
    left_basis = left_basis @ _range_basis(a, scale=scale)
    a = left_basis.conj().T @ m  # protected rows
    perp = m - left_basis @ a
    pb = perp @ right_basis
    b_basis = _range_basis(pb, scale=scale)
    b = b_basis.conj().T @ pb @ right_basis.conj().T  # protected columns of the remaining rows
    free = perp - b_basis @ b
    protected = left_basis.shape[1] + b_basis.shape[1]
    if max_bond < protected:
        raise DMTContractError(f"max_bond={max_bond} is below the protected dimension {protected}")
    k_free = max_bond - left_basis.shape[1] - b_basis.shape[1]
    free_norm = float(np.vdot(free, free).real)
    x = np.zeros((m.shape[0], 0), dtype=free.dtype)
    y = np.zeros((0, m.shape[1]), dtype=free.dtype)
    kept = 0.0
    if k_free > 0 and free_norm > 0:
        if min(free.shape) > max(k_free, GRAM_MIN):
            x, y, w = gram_truncate(free, k_free, trunc_tol, "left")
            kept = free_norm * (1.0 - w)
        else:
            u, s, vh = svd(free)
            keep, _ = truncation_rank(s, k_free, trunc_tol)
            x, y = u[:, :keep] * s[None, :keep], vh[:keep]
            kept = float(np.sum(s[:keep] ** 2))
    discarded = max(0.0, free_norm - kept) / total if total > 0 else 0.0
    lf = np.concatenate([left_basis, b_basis, x], axis=1)
    rf = np.concatenate([a, b, y], axis=0)
    q1, r1 = sla.qr(lf, mode="economic", check_finite=False)
    uc, sc, vhc = svd(r1 @ rf)
    nz = max(1, int(np.count_nonzero(sc > ZERO_SV * sc[0]))) if sc.size and sc[0] > 0 else 1
    left = q1 @ uc[:, :nz]
    right = sc[:nz, None] * vhc[:nz]
    return left, right, discarded


def _local_trace(e_left: NDArray, a: NDArray, id_a: NDArray, g: NDArray) -> complex:
    """``e_left . (a contracted with id_a) . g`` for a ``(Dl, p, Dr)`` tensor."""
    return complex(e_left @ np.tensordot(a, id_a, axes=([1], [0])) @ g)


def _restore(mpdo: MPDO, site: int, before: complex, after: complex, rep: TruncationReport) -> None:
    if after == 0:
        return
    factor = before / after
    if mpdo.is_real:
        factor = factor.real
    mpdo.tensors[site] = mpdo.tensors[site] * factor
    rep.renorm_factors.append(float(abs(factor)))


def dmt_truncate_bond(
    mpdo: MPDO,
    bond: int,
    max_bond: int,
    trunc_tol: float = 0.0,
    left_env: NDArray | None = None,
    right_env: NDArray | None = None,
) -> TruncationReport:
    """Truncate bond ``(bond, bond + 1)`` to at most ``max_bond`` preserving 3-site RDMs.

    The orthogonality center is moved to ``bond`` first and ends on ``bond + 1``.
    Bonds already within ``max_bond`` are left unchanged. ``left_env`` and
    ``right_env`` are the identity functionals of sites ``< bond`` and
    ``>= bond + 2``; they are computed when omitted.

    Raises:
        DMTContractError: when ``max_bond`` cannot hold the protected subspace.
    """
    t0 = time.perf_counter()
    rep = TruncationReport()
    dr = mpdo.tensors[bond].shape[2]
    if dr <= max_bond:
        rep.add(bond, 0.0)
        rep.max_bond = mpdo.max_bond_dim
        return rep
    mpdo.move_center(bond)
    v = mpdo.tensors[bond]
    dl, p, _ = v.shape
    e_left = mpdo.left_env(bond) if left_env is None else left_env
    e_right = mpdo.right_env(bond + 2) if right_env is None else right_env
    b = mpdo.tensors[bond + 1]
    f_right = np.tensordot(b, e_right, axes=([2], [0]))  # (Dr, p2)
    id_l, id_r = mpdo._local_vector(bond, None), mpdo._local_vector(bond + 1, None)
    g = f_right @ id_r
    before = _local_trace(e_left, v, id_l, g)
    left_basis = _identity_block(np.conj(e_left), p, env_major=True)
    left, right, discarded = dmt_truncate_matrix(v.reshape(dl * p, dr), left_basis, _range_basis(f_right), max_bond, trunc_tol)
    mpdo.tensors[bond] = left.reshape(dl, p, -1)
    mpdo.tensors[bond + 1] = np.tensordot(right, b, axes=([1], [0]))
    mpdo.center = bond + 1
    _restore(mpdo, bond + 1, before, _local_trace(e_left, mpdo.tensors[bond], id_l, right @ g), rep)
    rep.add(bond, discarded)
    rep.max_bond = mpdo.max_bond_dim
    rep.wall_time = time.perf_counter() - t0
    return rep


def right_envs(mpdo: MPDO) -> list[NDArray]:
    """``envs[k]`` is the identity functional of sites ``>= k``."""
    n = len(mpdo)
    envs: list[NDArray] = [np.ones(1)] * (n + 1)
    for i in range(n - 1, 0, -1):
        envs[i] = np.tensordot(mpdo.tensors[i], mpdo._local_vector(i, None), axes=([1], [0])) @ envs[i + 1]
    return envs


def dmt_sweep(mpdo: MPDO, max_bond: int, trunc_tol: float = 0.0) -> TruncationReport:
    """Left-to-right sweep applying :func:`dmt_truncate_bond` to every oversized bond."""
    t0 = time.perf_counter()
    rep = TruncationReport()
    n = len(mpdo)
    if max(mpdo.bond_dims, default=0) <= max_bond:
        rep.max_bond = mpdo.max_bond_dim
        return rep
    mpdo.move_center(0)
    r_envs = right_envs(mpdo)
    e_left = np.ones(1)
    for j in range(n - 1):
        if mpdo.tensors[j].shape[2] > max_bond:
            sub = dmt_truncate_bond(mpdo, j, max_bond, trunc_tol, left_env=e_left, right_env=r_envs[j + 2])
            rep.discarded.extend(sub.discarded)
            rep.renorm_factors.extend(sub.renorm_factors)
        else:
            mpdo.move_center(j + 1)
        e_left = e_left @ np.tensordot(mpdo.tensors[j], mpdo._local_vector(j, None), axes=([1], [0]))
    rep.max_bond = mpdo.max_bond_dim
    rep.wall_time = time.perf_counter() - t0
    return rep


def dmt_apply_gate(
    mpdo: MPDO,
    u: NDArray[np.complex128],
    i: int,
    max_bond: int,
    trunc_tol: float = 0.0,
    left_env: NDArray | None = None,
    right_env: NDArray | None = None,
    report: TruncationReport | None = None,
) -> float:
    """Apply a two-site gate on ``(i, i + 1)`` and DMT-truncate the new bond at once.

    The bond matrix is the gated two-site block itself, so no oversized
    intermediate bond is formed. The protected columns are ``1_p (x) e_R`` in
    the full ``(site i + 1, right bond)`` space rather than their projection on
    the row space of the block, so when the block is column-rank deficient the
    free part differs from the one :func:`dmt_truncate_bond` sees after a QR
    split. Both keep every 3-site RDM; the resulting states are not identical.
    ``left_env``/``right_env`` are the identity functionals of sites ``< i``
    and ``>= i + 2``. The center ends on ``i + 1``.

    Returns:
        The relative discarded weight.
    """
    if mpdo.center not in (i, i + 1):
        mpdo.move_center(i if mpdo.center is None or mpdo.center <= i else i + 1)
    s2 = two_site_superop(np.asarray(u, dtype=np.complex128), mpdo.dims[i], mpdo.dims[i + 1])
    th = mpdo.two_site_theta(i)
    dl, p1, p2, dr = th.shape
    th = np.tensordot(th, s2.reshape(p1 * p2, p1, p2), axes=([1, 2], [1, 2]))
    mat = np.transpose(th.reshape(dl, dr, p1, p2), (0, 2, 3, 1)).reshape(dl * p1, p2 * dr)
    if min(mat.shape) <= max_bond:
        return mpdo.split_bond(mat, i, (dl, p1, p2, dr), None, 0.0, "right", "qr")
    e_left = mpdo.left_env(i) if left_env is None else left_env
    e_right = mpdo.right_env(i + 2) if right_env is None else right_env
    id_l, id_r = mpdo._local_vector(i, None), mpdo._local_vector(i + 1, None)
    w_left = np.kron(e_left, id_l)
    w_right = np.kron(id_r, e_right)
    before = complex(w_left @ mat @ w_right)
    left_basis = _identity_block(np.conj(e_left), p1, env_major=True)
    right_basis = _identity_block(e_right, p2, env_major=False)
    left, right, discarded = dmt_truncate_matrix(mat, left_basis, right_basis, max_bond, trunc_tol)
    mpdo.tensors[i] = left.reshape(dl, p1, -1)
    mpdo.tensors[i + 1] = right.reshape(-1, p2, dr)
    mpdo.center = i + 1
    _restore(mpdo, i + 1, before, complex(w_left @ left @ (right @ w_right)), report or TruncationReport())
    return discarded
