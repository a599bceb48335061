"""Matrix-product density operator with an optional (data qubit, ancilla) super-site.

Each site tensor has shape ``(D_left, p, D_right)`` where ``p = d * d`` indexes
an orthonormal Hermitian operator basis of the site (products of ``sigma / sqrt(2)``
with the identity first). A Hermitian operator has real coefficients in this
basis, so physical states and Hermiticity-preserving maps keep every tensor
real. Canonical form and truncation refer to the Frobenius (superket) geometry,
which the basis change leaves invariant.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
import scipy.linalg as sla

if TYPE_CHECKING:
    from numpy.typing import NDArray

log = logging.getLogger(__name__)

ZERO_SV = 1e-14
REAL_TOL = 1e-12
GRAM_MIN = 128

_PAULI = np.array(
    [
        [[1, 0], [0, 1]],
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=np.complex128,
) / np.sqrt(2)


@functools.lru_cache(maxsize=None)
def operator_basis(d: int) -> NDArray[np.complex128]:
    """Orthonormal Hermitian basis ``G[a]`` of ``d x d`` matrices, ``d`` a power of two.

    ``G[0]`` is proportional to the identity. Multi-qubit elements are Kronecker
    products with the first qubit most significant.
    """
    n = int(round(np.log2(d)))
    if 2**n != d:
        raise ValueError(f"local dimension must be a power of two, got {d}")
    g = np.ones((1, 1, 1), dtype=np.complex128)
    for _ in range(n):
        g = np.einsum("aij,bkl->abikjl", g, _PAULI).reshape(g.shape[0] * 4, g.shape[1] * 2, g.shape[2] * 2)
    g.setflags(write=False)
    return g


def _maybe_real(a: NDArray) -> NDArray:
    a = np.asarray(a)
    if np.iscomplexobj(a):
        scale = max(1.0, float(np.max(np.abs(a), initial=0.0)))
        if float(np.max(np.abs(a.imag), initial=0.0)) <= REAL_TOL * scale:
            return np.ascontiguousarray(a.real)
    return a


def to_coefficients(mat: NDArray[np.complex128]) -> NDArray:
    """Basis coefficients ``Tr(G_a mat)`` of a ``d x d`` operator (real if Hermitian)."""
    return _maybe_real(np.einsum("aij,ji->a", operator_basis(mat.shape[0]), mat))


def from_coefficients(c: NDArray, d: int) -> NDArray[np.complex128]:
    return np.tensordot(c, operator_basis(d), axes=([0], [0]))


def functional(op: NDArray[np.complex128]) -> NDArray:
    """Vector ``w`` with ``Tr(rho op) = w . c(rho)``."""
    return _maybe_real(np.einsum("aij,ji->a", operator_basis(op.shape[0]), op))


def superop_coefficients(s: NDArray[np.complex128], d: int) -> NDArray:
    """Convert a superoperator on row-major ``vec(rho)`` into the coefficient basis."""
    p = operator_basis(d).reshape(d * d, d * d).T  # columns vec(G_a)
    return _maybe_real(p.conj().T @ s @ p)


def two_site_superop(u: NDArray[np.complex128], d1: int, d2: int) -> NDArray:
    """``rho -> u rho u^dagger`` on two sites in the product coefficient basis.

    Returns a ``(p1 p2, p1 p2)`` matrix, real for any unitary ``u``.
    """
    g1, g2 = operator_basis(d1), operator_basis(d2)
    gp = np.einsum("aij,bkl->abikjl", g1, g2).reshape(d1 * d1 * d2 * d2, d1 * d2, d1 * d2)
    conj = u @ gp @ u.conj().T
    # Tr(G_m X) = sum_ij G_m[j, i] X[i, j] = sum_ij conj(G_m[i, j]) X[i, j] for Hermitian G_m
    return _maybe_real(np.einsum("mij,nij->mn", gp.conj(), conj))


@dataclass
class TruncationReport:
    """Discarded weights of the truncations performed during one step.

    Weights are relative: ``sum(discarded s^2) / sum(s^2)`` at each bond.
    """

    discarded: list[tuple[int, float]] = field(default_factory=list)
    wall_time: float = 0.0
    max_bond: int = 0
    renorm_factors: list[float] = field(default_factory=list)

    @property
    def cumulative(self) -> float:
        return float(sum(w for _, w in self.discarded))

    def add(self, bond: int, weight: float) -> None:
        if weight < 0:
            weight = 0.0
        self.discarded.append((bond, float(weight)))

    def merge(self, other: TruncationReport) -> None:
        self.discarded.extend(other.discarded)
        self.wall_time += other.wall_time
        self.max_bond = max(self.max_bond, other.max_bond)
        self.renorm_factors.extend(other.renorm_factors)


def truncation_rank(s: NDArray[np.float64], max_bond: int | None, tol: float) -> tuple[int, float]:
    """Number of singular values to keep and the relative discarded weight.

    Keeps at most ``max_bond`` values, drops exact zeros and the smallest values
    as long as their relative weight stays at or below ``tol``.
    """
    if s.size == 0:
        return 0, 0.0
    w = s**2
    total = float(w.sum())
    if total == 0.0:
        return 1, 0.0
    keep = int(np.count_nonzero(s > ZERO_SV * s[0]))
    if tol > 0:
        tail = np.cumsum(w[::-1])[::-1] / total  # tail[k] = weight of s[k:]
        ok = np.nonzero(tail <= tol)[0]
        if ok.size:
            keep = min(keep, int(ok[0]))
    if max_bond is not None:
        keep = min(keep, max_bond)
    keep = max(keep, 1)
    return keep, float(w[keep:].sum() / total)


def svd(m: NDArray):
    try:
        return sla.svd(m, full_matrices=False, lapack_driver="gesdd", check_finite=False)
    except np.linalg.LinAlgError:
        log.warning("gesdd failed; falling back to gesvd")
        return sla.svd(m, full_matrices=False, lapack_driver="gesvd", check_finite=False)


def gram_truncate(mat: NDArray, max_bond: int, tol: float, direction: str) -> tuple[NDArray, NDArray, float]:
    """Truncated factorization ``mat ~ a @ b`` from the Gram matrix eigenbasis.

    Cheaper than a full SVD when the bond is certain to be cut. The kept subspace
    comes from the smaller Gram matrix; ``mat`` is then projected exactly and
    re-split by QR so that ``a`` (``direction="right"``) or ``b`` is an exact
    isometry. Only the choice of subspace sees the squared conditioning.
    """
    rows_side = mat.shape[0] <= mat.shape[1]
    gram = mat @ mat.conj().T if rows_side else mat.T @ mat.conj()
    evals, vecs = sla.eigh(gram, check_finite=False, driver="evd")
    evals = evals[::-1]
    k, _ = truncation_rank(np.sqrt(np.clip(evals, 0.0, None)), max_bond, tol)
    # reversed views would push matmul off the BLAS path
    vecs = np.ascontiguousarray(vecs[:, ::-1][:, :k])
    if rows_side:
        u = vecs  # mat ~ u (u^H mat)
        proj = u.conj().T @ mat
        if direction == "right":
            a, b = np.ascontiguousarray(u), proj
        else:
            q, r = sla.qr(proj.T, mode="economic", check_finite=False)
            a, b = u @ r.T, q.T
    else:
        v = vecs.conj()  # mat ~ (mat v) v^H
        proj = mat @ v
        if direction == "right":
            a, r = sla.qr(proj, mode="economic", check_finite=False)
            b = r @ v.conj().T
        else:
            a, b = proj, np.ascontiguousarray(v.conj().T)
    total = float(np.vdot(mat, mat).real)
    kept = float(np.vdot(proj, proj).real)
    discarded = max(0.0, 1.0 - kept / total) if total > 0 else 0.0
    return a, b, discarded


def identity_vector(d: int) -> NDArray[np.float64]:
    return functional(np.eye(d, dtype=np.complex128))


class MPDO:
    """Matrix-product density operator.

    Attributes:
        tensors: site tensors ``(D_left, d * d, D_right)`` of basis coefficients.
        dims: local Hilbert-space dimension ``d`` per site.
        super_site: index of the site that fuses a data qubit with the ancilla
            (local dimension 4, data qubit major), or None.
        center: orthogonality center; sites left of it are left isometries and
            sites right of it right isometries. None when unknown.
    """

    def __init__(
        self,
        tensors: Sequence[NDArray],
        dims: Sequence[int] | None = None,
        super_site: int | None = None,
        center: int | None = None,
    ):
        self.tensors = [_maybe_real(np.asarray(t)) for t in tensors]
        if dims is None:
            dims = [int(round(np.sqrt(t.shape[1]))) for t in self.tensors]
        self.dims = list(dims)
        self.super_site = super_site
        self.center = center
        for t, d in zip(self.tensors, self.dims):
            if t.ndim != 3 or t.shape[1] != d * d:
                raise ValueError(f"site tensor must be (Dl, d*d, Dr) with d={d}, got {t.shape}")
        for a, b in zip(self.tensors, self.tensors[1:]):
            if a.shape[2] != b.shape[0]:
                raise ValueError("bond dimensions do not match")

    @classmethod
    def from_matrix_tensors(cls, tensors: Sequence[NDArray], super_site: int | None = None) -> MPDO:
        """Build from ``(Dl, d, d, Dr)`` tensors with physical legs in (ket, bra) order."""
        coeffs, dims = [], []
        for t in tensors:
            d = t.shape[1]
            coeffs.append(np.einsum("aij,ljir->lar", operator_basis(d), np.asarray(t, dtype=np.complex128)))
            dims.append(d)
        return cls(coeffs, dims, super_site)

    def __len__(self) -> int:
        return len(self.tensors)

    def copy(self) -> MPDO:
        return MPDO([t.copy() for t in self.tensors], self.dims, self.super_site, self.center)

    @property
    def is_real(self) -> bool:
        return not any(np.iscomplexobj(t) for t in self.tensors)

    @property
    def phys_dims(self) -> list[int]:
        return list(self.dims)

    @property
    def bond_dims(self) -> list[int]:
        return [t.shape[2] for t in self.tensors[:-1]]

    @property
    def max_bond_dim(self) -> int:
        return max(self.bond_dims, default=1)

    # -- contraction helpers ------------------------------------------------

    def _vec(self, i: int) -> NDArray:
        return self.tensors[i]

    def left_env(self, upto: int, ops: dict[int, NDArray[np.complex128]] | None = None) -> NDArray:
        """Functional of sites ``< upto`` contracted with identities (or ``ops``)."""
        env = np.ones(1)
        for i in range(upto):
            env = env @ np.tensordot(self.tensors[i], self._local_vector(i, ops), axes=([1], [0]))
        return env

    def right_env(self, start: int, ops: dict[int, NDArray[np.complex128]] | None = None) -> NDArray:
        """Functional of sites ``>= start``."""
        env = np.ones(1)
        for i in range(len(self) - 1, start - 1, -1):
            env = np.tensordot(self.tensors[i], self._local_vector(i, ops), axes=([1], [0])) @ env
        return env

    def _local_vector(self, i: int, ops: dict[int, NDArray[np.complex128]] | None) -> NDArray:
        if ops and i in ops:
            return functional(np.asarray(ops[i], dtype=np.complex128))
        return identity_vector(self.dims[i])

    def trace(self) -> complex:
        return complex(self.left_env(len(self))[0])

    def expect(self, ops: dict[int, NDArray[np.complex128]]) -> complex:
        """``Tr(rho prod_i O_i)`` for single-site operators (unnormalized)."""
        return complex(self.left_env(len(self), ops)[0])

    def ancilla_xy(self) -> tuple[float, float]:
        if self.super_site is None:
            raise ValueError("MPDO has no ancilla super-site")
        tr = self.trace()
        # x + i y = 2 <1|rho_anc|0> = 2 Tr(rho |0><1|)
        op = np.kron(np.eye(2), np.array([[0, 1], [0, 0]], dtype=np.complex128))
        f = 2 * self.expect({self.super_site: op}) / tr
        return float(f.real), float(f.imag)

    def site_matrix_tensor(self, i: int) -> NDArray[np.complex128]:
        """Site ``i`` as ``(Dl, d, d, Dr)`` with physical legs in (ket, bra) order."""
        return np.einsum("lar,aij->lijr", self.tensors[i], operator_basis(self.dims[i]))

    def rdm(self, sites: Sequence[int]) -> NDArray[np.complex128]:
        """Reduced density matrix on consecutive MPDO sites (super-site counts as one)."""
        sites = sorted(sites)
        if sites != list(range(sites[0], sites[-1] + 1)):
            raise ValueError("rdm needs consecutive sites")
        left = self.left_env(sites[0])
        right = self.right_env(sites[-1] + 1)
        t = left.reshape(1, -1)
        for i in sites:
            t = np.tensordot(t, self.site_matrix_tensor(i), axes=([-1], [0]))
        t = np.tensordot(t, right, axes=([-1], [0]))[0]
        k = len(sites)
        perm = [2 * a for a in range(k)] + [2 * a + 1 for a in range(k)]
        d = int(np.prod([self.dims[i] for i in sites]))
        return np.transpose(t, perm).reshape(d, d) / self.trace()

    def to_dense(self) -> NDArray[np.complex128]:
        """Full density matrix in exact-engine order (data qubits, then ancilla)."""
        t = np.ones((1, 1, 1), dtype=np.complex128)  # (ket, bra, bond)
        for i in range(len(self)):
            t = np.einsum("xyl,lkbr->xkybr", t, self.site_matrix_tensor(i))
            s = t.shape
            t = t.reshape(s[0] * s[1], s[2] * s[3], s[4])
        rho = t[:, :, 0]
        if self.super_site is not None:
            n = len(self) + 1
            c = self.super_site
            rho = rho.reshape((2,) * (2 * n))
            order = list(range(n))
            order = order[: c + 1] + order[c + 2 :] + [c + 1]
            rho = np.transpose(rho, order + [n + o for o in order]).reshape(2**n, 2**n)
        return rho

    # -- canonical form -----------------------------------------------------

    def _qr_right(self, i: int) -> None:
        """Make site ``i`` a left isometry and push the remainder into ``i + 1``."""
        dl, p, dr = self.tensors[i].shape
        q, r = sla.qr(self.tensors[i].reshape(dl * p, dr), mode="economic", check_finite=False)
        self.tensors[i] = q.reshape(dl, p, -1)
        self.tensors[i + 1] = np.tensordot(r, self.tensors[i + 1], axes=([1], [0]))

    def _qr_left(self, i: int) -> None:
        """Make site ``i`` a right isometry and push the remainder into ``i - 1``."""
        dl, p, dr = self.tensors[i].shape
        q, r = sla.qr(self.tensors[i].reshape(dl, p * dr).T, mode="economic", check_finite=False)
        self.tensors[i] = q.T.reshape(-1, p, dr)
        self.tensors[i - 1] = np.tensordot(self.tensors[i - 1], r.T, axes=([2], [0]))

    def canonicalize(self, center: int = 0) -> None:
        for i in range(center):
            self._qr_right(i)
        for i in range(len(self) - 1, center, -1):
            self._qr_left(i)
        self.center = center

    def move_center(self, k: int) -> None:
        if self.center is None:
            self.canonicalize(k)
            return
        while self.center < k:
            self._qr_right(self.center)
            self.center += 1
        while self.center > k:
            self._qr_left(self.center)
            self.center -= 1

    def isometry_error(self) -> float:
        """Largest deviation from the canonical-form isometry conditions."""
        if self.center is None:
            return float("inf")
        err = 0.0
        for i, v in enumerate(self.tensors):
            dl, p, dr = v.shape
            if i < self.center:
                m = v.reshape(dl * p, dr)
                err = max(err, float(np.max(np.abs(m.conj().T @ m - np.eye(dr)))))
            elif i > self.center:
                m = v.reshape(dl, p * dr)
                err = max(err, float(np.max(np.abs(m @ m.conj().T - np.eye(dl)))))
        return err

    def normalize_trace(self) -> float:
        """Rescale so that the trace is one; returns the factor applied."""
        tr = self.trace()
        if abs(tr) == 0:
            raise FloatingPointError("MPDO trace vanished")
        k = self.center if self.center is not None else 0
        scale = 1 / tr.real if self.is_real else 1 / tr
        self.tensors[k] = self.tensors[k] * scale
        return float(abs(scale))

    # -- local operations ---------------------------------------------------

    def apply_superop(self, s: NDArray[np.complex128], i: int, unitary: bool = False) -> None:
        """Apply a single-site superoperator given on the row-major ``vec(rho)``.

        Non-unitary maps first move the orthogonality center to ``i``.
        """
        if not unitary and self.center != i:
            self.move_center(i)
        sc = superop_coefficients(np.asarray(s), self.dims[i])
        self.tensors[i] = np.einsum("qp,lpr->lqr", sc, self.tensors[i])

    def apply_unitary(self, u: NDArray[np.complex128], i: int) -> None:
        self.apply_superop(np.kron(u, u.conj()), i, unitary=True)

    def two_site_theta(self, i: int) -> NDArray:
        """``(Dl, p1, p2, Dr)`` contraction of sites ``i`` and ``i + 1``."""
        return np.tensordot(self.tensors[i], self.tensors[i + 1], axes=([2], [0]))

    def apply_two_site(
        self,
        u: NDArray[np.complex128],
        i: int,
        max_bond: int | None = None,
        trunc_tol: float = 0.0,
        direction: str = "right",
        split: str = "svd",
    ) -> float:
        """Conjugate sites ``(i, i + 1)`` by ``u`` and split the result.

        Args:
            u: ``(d1 d2) x (d1 d2)`` unitary, first factor on site ``i``.
            max_bond: cap for the new bond (svd split only).
            trunc_tol: relative discarded-weight tolerance (svd split only).
            direction: where the orthogonality center ends up ("right" puts it at
                ``i + 1``).
            split: "svd" truncates; "qr" splits exactly without truncation.

        Returns:
            The relative discarded weight.
        """
        if self.center not in (i, i + 1):
            self.move_center(i if self.center is None or self.center <= i else i + 1)
        s2 = two_site_superop(np.asarray(u, dtype=np.complex128), self.dims[i], self.dims[i + 1])
        th = self.two_site_theta(i)
        dl, p1, p2, dr = th.shape
        th = np.tensordot(th, s2.reshape(p1 * p2, p1, p2), axes=([1, 2], [1, 2]))  # (l, r, q)
        th = np.transpose(th.reshape(dl, dr, p1, p2), (0, 2, 3, 1))
        mat = th.reshape(dl * p1, p2 * dr)
        return self.split_bond(mat, i, (dl, p1, p2, dr), max_bond, trunc_tol, direction, split)

    def split_bond(
        self,
        mat: NDArray,
        i: int,
        dims: tuple[int, int, int, int],
        max_bond: int | None,
        trunc_tol: float,
        direction: str,
        split: str,
    ) -> float:
        """Factor the ``(Dl p1, p2 Dr)`` bond matrix back into sites ``i`` and ``i + 1``."""
        dl, p1, p2, dr = dims
        discarded = 0.0
        if split == "qr":
            if direction == "right":
                a, b = sla.qr(mat, mode="economic", check_finite=False)
            else:
                q, r = sla.qr(mat.T, mode="economic", check_finite=False)
                a, b = r.T, q.T
        elif max_bond is not None and min(mat.shape) > max(max_bond, GRAM_MIN):
            a, b, discarded = gram_truncate(mat, max_bond, trunc_tol, direction)
        else:
            uu, s, vh = svd(mat)
            k, discarded = truncation_rank(s, max_bond, trunc_tol)
            uu, s, vh = uu[:, :k], s[:k], vh[:k]
            if direction == "right":
                a, b = uu, s[:, None] * vh
            else:
                a, b = uu * s[None, :], vh
        self.tensors[i] = a.reshape(dl, p1, -1)
        self.tensors[i + 1] = b.reshape(-1, p2, dr)
        self.center = i + 1 if direction == "right" else i
        return discarded


def product_mpdo(site_matrices: Sequence[NDArray[np.complex128]], super_site: int | None = None) -> MPDO:
    tensors = [to_coefficients(np.asarray(m, dtype=np.complex128)).reshape(1, -1, 1) for m in site_matrices]
    out = MPDO(tensors, [m.shape[0] for m in site_matrices], super_site=super_site)
    out.canonicalize(0)
    return out
