"""Dense statevector / density-matrix engine, Kraus channels and the two-point oracle.

Qubit order: data sites ``0..N-1`` then the ancilla; qubit 0 is the most
significant bit of a basis index. A pure state is stored as a tensor of shape
``(2,) * n``; a mixed state as ``(2,) * 2n`` with ket axes first.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, Literal, Sequence

import numpy as np

from .fcs import ChargeDistribution
from .gates import ChainSpec, CircuitSchedule, TwoSiteUnitary

if TYPE_CHECKING:
    from numpy.typing import NDArray

log = logging.getLogger(__name__)

MAX_MIXED_QUBITS = 13
KRAUS_TOL = 1e-12

PAULI_I = np.eye(2, dtype=np.complex128)
PAULI_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)
# spin operator with |1> = up
SPIN_Z = np.diag([-0.5, 0.5]).astype(np.complex128)
PLUS = np.array([1.0, 1.0], dtype=np.complex128) / math.sqrt(2)


class OracleUndefinedError(ValueError):
    """The initial state has coherences between right-half particle-number sectors."""


# ---------------------------------------------------------------------------
# initial states


@dataclass(frozen=True)
class InitialStateSpec:
    """Product initial state of the data register.

    kinds:
        ``domain_wall``: ``exp(mu S^z)`` on the left half, ``exp(-mu S^z)`` on the right.
        ``polarized_domain_wall``: the ``mu -> infinity`` limit, ``|1..10..0>``.
        ``neel``: ``|1010...>``.
        ``product``: ``occupations`` (pure) or ``site_states`` (2x2 density matrices).
    """

    kind: Literal["domain_wall", "polarized_domain_wall", "neel", "product"] = "domain_wall"
    mu: float = 0.0
    occupations: tuple[int, ...] | None = None
    site_states: tuple | None = None

    def site_matrices(self, n_sites: int) -> list[NDArray[np.complex128]]:
        """Per-site 2x2 density matrices."""
        if self.kind == "domain_wall":
            up = np.diag(np.exp(self.mu * np.diag(SPIN_Z).real))
            down = np.diag(np.exp(-self.mu * np.diag(SPIN_Z).real))
            up, down = up / np.trace(up), down / np.trace(down)
            return [(up if i < n_sites // 2 else down).astype(np.complex128) for i in range(n_sites)]
        occ = self.occupation_list(n_sites)
        if occ is not None:
            return [np.diag([1.0 - o, float(o)]).astype(np.complex128) for o in occ]
        if self.site_states is None or len(self.site_states) != n_sites:
            raise ValueError("product spec needs occupations or one 2x2 state per site")
        return [np.asarray(s, dtype=np.complex128) for s in self.site_states]

    def occupation_list(self, n_sites: int) -> list[int] | None:
        if self.kind == "neel":
            return [(i + 1) % 2 for i in range(n_sites)]
        if self.kind == "polarized_domain_wall":
            return [1 if i < n_sites // 2 else 0 for i in range(n_sites)]
        if self.kind == "product" and self.occupations is not None:
            if len(self.occupations) != n_sites or any(o not in (0, 1) for o in self.occupations):
                raise ValueError("occupations must be n_sites entries in {0, 1}")
            return list(self.occupations)
        return None

    @property
    def is_pure(self) -> bool:
        return self.kind in ("neel", "polarized_domain_wall") or (self.kind == "product" and self.occupations is not None)


# ---------------------------------------------------------------------------
# dense state


class DenseState:
    """Pure or mixed state of ``n_qubits`` qubits."""

    def __init__(self, data: NDArray[np.complex128], n_qubits: int, mixed: bool):
        self.n_qubits = n_qubits
        self.mixed = mixed
        shape = (2,) * (2 * n_qubits if mixed else n_qubits)
        self.data = np.asarray(data, dtype=np.complex128).reshape(shape)
        if mixed and n_qubits > MAX_MIXED_QUBITS:
            raise MemoryError(f"mixed mode is capped at {MAX_MIXED_QUBITS} qubits, got {n_qubits}")

    @classmethod
    def from_vector(cls, psi: NDArray[np.complex128]) -> DenseState:
        n = int(round(math.log2(psi.size)))
        return cls(psi, n, False)

    @classmethod
    def from_matrix(cls, rho: NDArray[np.complex128]) -> DenseState:
        n = int(round(math.log2(rho.shape[0])))
        return cls(rho, n, True)

    def copy(self) -> DenseState:
        return DenseState(self.data.copy(), self.n_qubits, self.mixed)

    @property
    def dim(self) -> int:
        return 2**self.n_qubits

    def vector(self) -> NDArray[np.complex128]:
        if self.mixed:
            raise ValueError("mixed state has no state vector")
        return self.data.reshape(self.dim)

    def matrix(self) -> NDArray[np.complex128]:
        if self.mixed:
            return self.data.reshape(self.dim, self.dim)
        v = self.vector()
        return np.outer(v, v.conj())

    def to_mixed(self) -> DenseState:
        if self.mixed:
            return self
        log.info("promoting %d-qubit pure state to mixed mode", self.n_qubits)
        return DenseState(self.matrix(), self.n_qubits, True)

    def trace(self) -> complex:
        if self.mixed:
            return complex(np.trace(self.matrix()))
        return complex(np.vdot(self.vector(), self.vector()))

    def check(self, tol: float = 1e-10) -> None:
        """Assert the DenseState invariants."""
        if self.mixed:
            m = self.matrix()
            if abs(np.trace(m) - 1) > tol:
                raise AssertionError(f"trace {np.trace(m)} != 1")
            if np.max(np.abs(m - m.conj().T)) > tol:
                raise AssertionError("density matrix not Hermitian")
            if np.linalg.eigvalsh(m).min() < -1e-8:
                raise AssertionError("density matrix not positive")
        elif abs(np.linalg.norm(self.vector()) - 1) > tol:
            raise AssertionError("state vector not normalized")

    def reduced(self, sites: Sequence[int]) -> NDArray[np.complex128]:
        """Reduced density matrix on ``sites`` (in the given order)."""
        sites = list(sites)
        n = self.n_qubits
        rest = [q for q in range(n) if q not in sites]
        k = len(sites)
        if self.mixed:
            t = np.transpose(self.data, sites + rest + [n + s for s in sites] + [n + r for r in rest])
            t = t.reshape(2**k, 2 ** len(rest), 2**k, 2 ** len(rest))
            return np.einsum("arbr->ab", t)
        t = np.transpose(self.data, sites + rest).reshape(2**k, 2 ** len(rest))
        return t @ t.conj().T


def product_state(site_matrices: Sequence[NDArray[np.complex128]]) -> DenseState:
    rho = np.array([[1.0 + 0j]])
    for m in site_matrices:
        rho = np.kron(rho, m)
    return DenseState.from_matrix(rho)


def build_initial(spec: InitialStateSpec, chain: ChainSpec, with_ancilla: bool = True) -> DenseState:
    """Data register product state with the ancilla appended in ``|+>``.

    Number-sharp kinds give a pure state; finite ``mu`` gives a mixed one.
    """
    n = chain.n_sites
    occ = spec.occupation_list(n)
    if occ is not None:
        psi = np.array([1.0 + 0j])
        for o in occ:
            psi = np.kron(psi, np.array([1.0 - o, float(o)], dtype=np.complex128))
        if with_ancilla:
            psi = np.kron(psi, PLUS)
        return DenseState.from_vector(psi)
    mats = spec.site_matrices(n)
    if with_ancilla:
        mats = mats + [np.outer(PLUS, PLUS.conj())]
    return product_state(mats)


# ---------------------------------------------------------------------------
# gates and channels


def _as_matrix(gate: TwoSiteUnitary | NDArray[np.complex128]) -> NDArray[np.complex128]:
    return gate.matrix if isinstance(gate, TwoSiteUnitary) else np.asarray(gate, dtype=np.complex128)


def _apply_op(t: NDArray[np.complex128], op: NDArray[np.complex128], axes: Sequence[int]) -> NDArray[np.complex128]:
    k = len(axes)
    op_t = op.reshape((2,) * (2 * k))
    out = np.tensordot(op_t, t, axes=(list(range(k, 2 * k)), list(axes)))
    return np.moveaxis(out, list(range(k)), list(axes))


def apply_gate(state: DenseState, gate: TwoSiteUnitary | NDArray[np.complex128], i: int, j: int) -> DenseState:
    """Apply a two-qubit gate with ``i`` as its first tensor factor."""
    n = state.n_qubits
    if i == j or not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"invalid qubit pair ({i}, {j}) for {n} qubits")
    u = _as_matrix(gate)
    out = _apply_op(state.data, u, (i, j))
    if state.mixed:
        out = _apply_op(out, u.conj(), (n + i, n + j))
    return DenseState(out, n, state.mixed)


def apply_one_site(state: DenseState, op: NDArray[np.complex128], site: int) -> DenseState:
    n = state.n_qubits
    out = _apply_op(state.data, op, (site,))
    if state.mixed:
        out = _apply_op(out, op.conj(), (n + site,))
    return DenseState(out, n, state.mixed)


@dataclass(frozen=True)
class KrausSet:
    operators: tuple
    label: str
    gamma: float

    def __post_init__(self) -> None:
        ops = tuple(np.asarray(k, dtype=np.complex128) for k in self.operators)
        object.__setattr__(self, "operators", ops)
        if completeness_error(ops) > KRAUS_TOL:
            raise ValueError(f"Kraus operators of {self.label} are not complete")

    def superoperator(self) -> NDArray[np.complex128]:
        """Matrix acting on ``vec(rho)`` with row-major (ket, bra) ordering."""
        return sum(np.kron(k, k.conj()) for k in self.operators)

    def apply_to(self, rho: NDArray[np.complex128]) -> NDArray[np.complex128]:
        return sum(k @ rho @ k.conj().T for k in self.operators)

    def embedded(self, dim_after: int) -> KrausSet:
        """Same channel acting on the first factor of ``C^2 (x) C^dim_after``."""
        eye = np.eye(dim_after)
        return KrausSet(tuple(np.kron(k, eye) for k in self.operators), self.label, self.gamma)


def completeness_error(ops: Sequence[NDArray[np.complex128]]) -> float:
    d = ops[0].shape[0]
    s = sum(k.conj().T @ k for k in ops)
    return float(np.max(np.abs(s - np.eye(d))))


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma!r}")


def depolarizing_kraus(gamma: float) -> KrausSet:
    """``K0 = sqrt(1 - 3g/4) I``, ``K1,2,3 = sqrt(g/4) X, Y, Z``."""
    _check_gamma(gamma)
    a = math.sqrt(1.0 - 3.0 * gamma / 4.0)
    b = math.sqrt(gamma / 4.0)
    return KrausSet((a * PAULI_I, b * PAULI_X, b * PAULI_Y, b * PAULI_Z), "depolarizing", gamma)


def amplitude_damping_kraus(gamma: float) -> KrausSet:
    """Decay ``|1> -> |0>`` with probability ``gamma``."""
    _check_gamma(gamma)
    k0 = np.diag([1.0, math.sqrt(1.0 - gamma)]).astype(np.complex128)
    k1 = np.array([[0.0, math.sqrt(gamma)], [0.0, 0.0]], dtype=np.complex128)
    return KrausSet((k0, k1), "amplitude_damping", gamma)


def make_kraus(label: str, gamma: float) -> KrausSet:
    if label == "depolarizing":
        return depolarizing_kraus(gamma)
    if label == "amplitude_damping":
        return amplitude_damping_kraus(gamma)
    raise ValueError(f"unknown noise channel {label!r}")


def apply_channel(state: DenseState, kraus: KrausSet, site: int) -> DenseState:
    """``rho -> sum_p K_p rho K_p^dagger`` on one qubit; pure states are promoted."""
    state = state.to_mixed()
    n = state.n_qubits
    out = np.zeros_like(state.data)
    for k in kraus.operators:
        tmp = _apply_op(state.data, k, (site,))
        out += _apply_op(tmp, k.conj(), (n + site,))
    return DenseState(out, n, True)


# ---------------------------------------------------------------------------
# evolution


@dataclass
class NoiseModel:
    """Single-qubit channel applied to every data qubit after each cycle.

    ``sites`` restricts the channel to a subset of data qubits.
    """

    kraus: KrausSet
    on_ancilla: bool = False
    sites: tuple[int, ...] | None = None

    def targets(self, chain: ChainSpec) -> list[int]:
        out = list(range(chain.n_sites)) if self.sites is None else list(self.sites)
        if self.on_ancilla:
            out.append(chain.ancilla_index)
        return out


def iter_schedule(
    state: DenseState,
    schedule: CircuitSchedule,
    noise: NoiseModel | None = None,
) -> Iterator[tuple[int, DenseState]]:
    """Yield ``(cycle, state)`` for cycle ``0`` (initial) through ``T``."""
    yield 0, state
    for t, layers in enumerate(schedule.cycles):
        for layer in layers:
            for ev in layer.events:
                state = apply_gate(state, ev.gate, *ev.sites)
        if noise is not None and noise.kraus.gamma > 0:
            for q in noise.targets(schedule.chain):
                state = apply_channel(state, noise.kraus, q)
        yield t + 1, state


def run_schedule(state: DenseState, schedule: CircuitSchedule, noise: NoiseModel | None = None) -> list[DenseState]:
    """States after each cycle, starting with the initial state."""
    return [s for _, s in iter_schedule(state, schedule, noise)]


def ancilla_xy(state: DenseState) -> tuple[float, float]:
    """``(<X>, <Y>)`` of the last qubit; ``x + i y = 2 <1|rho_anc|0>``."""
    if state.mixed:
        d = state.dim // 2
        r = state.data.reshape(d, 2, d, 2)
        rho10 = np.einsum("iaib->ab", r)[1, 0]
    else:
        m = state.vector().reshape(-1, 2)
        rho10 = np.vdot(m[:, 0], m[:, 1])
    f = 2 * rho10
    return float(f.real), float(f.imag)


def ancilla_series(
    state: DenseState, schedule: CircuitSchedule, noise: NoiseModel | None = None
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    xs, ys = [], []
    for _, s in iter_schedule(state, schedule, noise):
        x, y = ancilla_xy(s)
        xs.append(x)
        ys.append(y)
    return np.array(xs), np.array(ys)


def number_expectation(state: DenseState, sites: Sequence[int]) -> float:
    total = 0.0
    for q in sites:
        total += float(state.reduced([q])[1, 1].real)
    return total


# ---------------------------------------------------------------------------
# two-point measurement oracle


def _right_counts(n_sites: int, right: Sequence[int]) -> NDArray[np.int64]:
    idx = np.arange(2**n_sites)
    counts = np.zeros(2**n_sites, dtype=np.int64)
    for q in right:
        counts += (idx >> (n_sites - 1 - q)) & 1
    return counts


def data_state(state: DenseState, n_sites: int) -> DenseState:
    """Drop the ancilla (partial trace) if ``state`` carries one."""
    if state.n_qubits == n_sites:
        return state
    if state.n_qubits != n_sites + 1:
        raise ValueError("state size does not match the chain")
    if not state.mixed:
        m = state.vector().reshape(-1, 2)
        u, s, vh = np.linalg.svd(m, full_matrices=False)
        if s[1] < 1e-12 * s[0]:
            return DenseState.from_vector(u[:, 0] * s[0])
        state = state.to_mixed()
    return DenseState.from_matrix(state.reduced(list(range(n_sites))))


def _evolve_data(state: DenseState, schedule: CircuitSchedule) -> Iterator[DenseState]:
    yield state
    for layers in schedule.cycles:
        for layer in layers:
            if layer.kind != "data":
                continue
            for ev in layer.events:
                state = apply_gate(state, ev.gate, *ev.sites)
        yield state


def two_point_oracle_series(initial: DenseState, schedule: CircuitSchedule) -> list[ChargeDistribution]:
    """Distribution of ``N_R(t) - N_R(0)`` for every cycle ``0..T``.

    Turnstile events in ``schedule`` are ignored; only the data gates are used.

    Raises:
        OracleUndefinedError: the initial state mixes right-half number sectors.
    """
    chain = schedule.chain
    n = chain.n_sites
    st = data_state(initial, n)
    counts = _right_counts(n, list(chain.right_half()))
    sectors = np.unique(counts)
    n_t = schedule.n_cycles + 1
    probs: list[dict[int, float]] = [dict() for _ in range(n_t)]

    if st.mixed:
        rho = st.matrix()
        same = counts[:, None] == counts[None, :]
        if np.max(np.abs(rho[~same])) > 1e-12:
            raise OracleUndefinedError("initial state has coherences between right-half number sectors")
    for n0 in sectors:
        mask = counts == n0
        if st.mixed:
            rho = st.matrix()
            block = np.where(mask[:, None] & mask[None, :], rho, 0)
            if np.abs(np.trace(block)) < 1e-300:
                continue
            start = DenseState.from_matrix(block)
        else:
            v = np.where(mask, st.vector(), 0)
            if np.vdot(v, v).real < 1e-300:
                continue
            start = DenseState.from_vector(v)
        for t, s in enumerate(_evolve_data(start, schedule)):
            w = np.real(np.diagonal(s.matrix())) if s.mixed else np.abs(s.vector()) ** 2
            for n1 in sectors:
                p = float(w[counts == n1].sum())
                if p != 0.0:
                    q = int(n1 - n0)
                    probs[t][q] = probs[t].get(q, 0.0) + p
    return [ChargeDistribution.from_dict(p) for p in probs]


def two_point_oracle(initial: DenseState, schedule: CircuitSchedule, cycles: int | None = None) -> ChargeDistribution:
    """Transfer distribution from projective right-half counts at times 0 and ``cycles``."""
    series = two_point_oracle_series(initial, schedule)
    return series[schedule.n_cycles if cycles is None else cycles]
