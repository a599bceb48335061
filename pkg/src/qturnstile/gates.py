"""Two-site gates and brickwork circuit schedules with turnstile insertions.

Sites are 0-based. The chain has ``n_sites`` data qubits followed by one
ancilla at index ``n_sites``. A qubit in ``|1>`` is an occupied site (spin up).

The counted charge is the net number of particles that cross the bond
``(c, c + 1)``, where ``c`` is the central site (by default ``n_sites // 2 - 1``,
the last site of the left half). The right-coupling sublayer, the one that
contains that bond, is bracketed by a controlled phase ``+lambda`` before it and
``-lambda`` after it, so that the phase accumulated on the ancilla equals
``lambda`` times the net transfer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np

if TYPE_CHECKING:
    from numpy.typing import NDArray

UNITARY_TOL = 1e-12

# Off-block entries of a U(1)-conserving 4x4 gate in the |00>,|01>,|10>,|11> basis.
_OFF_BLOCK = np.ones((4, 4), dtype=bool)
_OFF_BLOCK[0, 0] = _OFF_BLOCK[3, 3] = False
_OFF_BLOCK[1:3, 1:3] = False


@dataclass(frozen=True)
class TwoSiteUnitary:
    """A 4x4 gate in the basis ``|00>, |01>, |10>, |11>``.

    The first tensor factor is the first site of the placement.
    """

    matrix: NDArray[np.complex128]
    label: str = ""

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=np.complex128)
        if m.shape != (4, 4):
            raise ValueError(f"two-site gate must be 4x4, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def tensor(self) -> NDArray[np.complex128]:
        """Gate as a (2, 2, 2, 2) tensor ``[out1, out2, in1, in2]``."""
        return self.matrix.reshape(2, 2, 2, 2)

    def is_unitary(self, tol: float = UNITARY_TOL) -> bool:
        return bool(np.allclose(self.matrix.conj().T @ self.matrix, np.eye(4), atol=tol, rtol=0))

    def conserves_charge(self) -> bool:
        return bool(np.all(self.matrix[_OFF_BLOCK] == 0))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(4)))


def xxz_gate(theta: float, phi: float) -> TwoSiteUnitary:
    """Integrable Trotter gate of the XXZ chain.

    Args:
        theta: hopping angle; ``theta = pi/2`` is a perfect swap up to phases.
        phi: interaction phase on ``|11>``.
    """
    c, s = math.cos(theta), math.sin(theta)
    m = np.zeros((4, 4), dtype=np.complex128)
    m[0, 0] = 1.0
    m[1, 1] = m[2, 2] = c
    m[1, 2] = m[2, 1] = -1j * s
    m[3, 3] = np.exp(1j * phi)
    return TwoSiteUnitary(m, label=f"xxz({theta:.6g},{phi:.6g})")


def anisotropy(theta: float, phi: float) -> float:
    """Anisotropy ``Delta = sin(phi/2) / sin(theta)`` of the Trotterized XXZ chain.

    Raises:
        ZeroDivisionError: if ``sin(theta)`` vanishes (non-hopping gate).
    """
    s = math.sin(theta)
    if abs(s) < 1e-15:
        raise ZeroDivisionError("anisotropy undefined for sin(theta) = 0")
    return math.sin(phi / 2) / s


def turnstile_gate(lam: float, sign: int) -> TwoSiteUnitary:
    """Controlled phase on (central qubit, ancilla): ``diag(1, 1, 1, exp(i*sign*lam))``."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    m = np.eye(4, dtype=np.complex128)
    m[3, 3] = np.exp(1j * sign * lam)
    return TwoSiteUnitary(m, label=f"turnstile({'+' if sign > 0 else '-'}{lam:.6g})")


def haar_u1_gate(rng: np.random.Generator) -> TwoSiteUnitary:
    """Random charge-conserving gate: phases on |00>, |11> and a Haar U(2) block."""
    z = (rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))) / math.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    q = q * (d / np.abs(d))
    phases = np.exp(2j * math.pi * rng.random(2))
    m = np.zeros((4, 4), dtype=np.complex128)
    m[0, 0] = phases[0]
    m[1:3, 1:3] = q
    m[3, 3] = phases[1]
    return TwoSiteUnitary(m, label="haar_u1")


@dataclass(frozen=True)
class ChainSpec:
    """Geometry of the data chain plus one ancilla.

    Attributes:
        n_sites: number of data qubits (even).
        central_site: 0-based index of the qubit coupled to the ancilla; defaults
            to ``n_sites // 2 - 1``.
        first_sublayer: which sublayer acts first in every cycle, the one with
            bond ``(c-1, c)`` ("left") or the one with ``(c, c+1)`` ("right").
        leading_turnstile: prepend a single ``-lambda`` turnstile before the very
            first data gate (the literal one-cycle picture). With it the ancilla
            phase counts ``Q - n_c(0)`` instead of ``Q``.
    """

    n_sites: int
    central_site: int | None = None
    first_sublayer: Literal["left", "right"] = "left"
    leading_turnstile: bool = False

    def __post_init__(self) -> None:
        if self.n_sites < 2 or self.n_sites % 2:
            raise ValueError(f"n_sites must be a positive even integer, got {self.n_sites}")
        if self.central_site is None:
            object.__setattr__(self, "central_site", self.n_sites // 2 - 1)
        if not 0 <= self.central_site < self.n_sites:
            raise ValueError("central_site out of range")
        if self.first_sublayer not in ("left", "right"):
            raise ValueError("first_sublayer must be 'left' or 'right'")

    @property
    def ancilla_index(self) -> int:
        return self.n_sites

    @property
    def n_qubits(self) -> int:
        return self.n_sites + 1

    def sublayer_bonds(self, side: Literal["left", "right"]) -> list[tuple[int, int]]:
        """Bonds ``(j, j+1)`` of one sublayer; open boundaries."""
        c = self.central_site
        parity = (c - 1) % 2 if side == "left" else c % 2
        return [(j, j + 1) for j in range(parity, self.n_sites - 1, 2)]

    def right_half(self) -> range:
        return range(self.central_site + 1, self.n_sites)


@dataclass(frozen=True)
class GateEvent:
    gate: TwoSiteUnitary
    sites: tuple[int, int]
    kind: Literal["data", "turnstile"] = "data"


@dataclass(frozen=True)
class Layer:
    """A set of events on disjoint sites that act simultaneously."""

    kind: Literal["data", "turnstile"]
    events: tuple[GateEvent, ...]
    side: str = ""


@dataclass(frozen=True)
class CircuitSchedule:
    chain: ChainSpec
    cycles: tuple[tuple[Layer, ...], ...]
    lam: float
    rng_seed: int | None = None
    model: str = ""
    params: dict = field(default_factory=dict)

    @property
    def n_cycles(self) -> int:
        return len(self.cycles)

    def iter_events(self):
        for layers in self.cycles:
            for layer in layers:
                yield from layer.events

    def data_events(self) -> list[GateEvent]:
        return [e for e in self.iter_events() if e.kind == "data"]

    def turnstile_events(self) -> list[GateEvent]:
        return [e for e in self.iter_events() if e.kind == "turnstile"]

    def without_turnstiles(self) -> CircuitSchedule:
        cycles = tuple(tuple(layer for layer in layers if layer.kind == "data") for layers in self.cycles)
        return CircuitSchedule(self.chain, cycles, 0.0, self.rng_seed, self.model, dict(self.params))


def check_lambda(lam: float) -> None:
    if not (-math.pi < lam <= math.pi):
        raise ValueError(f"lambda must lie in (-pi, pi], got {lam!r}")


def _assemble(chain: ChainSpec, lam: float, cycles: int, gate_for) -> tuple[tuple[Layer, ...], ...]:
    check_lambda(lam)
    if cycles < 0:
        raise ValueError("cycles must be non-negative")
    c, a = chain.central_site, chain.ancilla_index

    def turnstile(sign: int) -> Layer:
        return Layer("turnstile", (GateEvent(turnstile_gate(lam, sign), (c, a), "turnstile"),), side="")

    order = ("left", "right") if chain.first_sublayer == "left" else ("right", "left")
    out = []
    for t in range(cycles):
        layers: list[Layer] = []
        if t == 0 and chain.leading_turnstile and order[0] == "left":
            layers.append(turnstile(-1))
        for side in order:
            if side == "right":
                layers.append(turnstile(+1))
            events = tuple(GateEvent(gate_for(t, bond), bond) for bond in chain.sublayer_bonds(side))
            layers.append(Layer("data", events, side=side))
            if side == "right":
                layers.append(turnstile(-1))
        out.append(tuple(layers))
    return tuple(out)


def build_xxz_schedule(chain: ChainSpec, theta: float, phi: float, lam: float, cycles: int) -> CircuitSchedule:
    """Brickwork XXZ circuit with the turnstile wrapped around the right-coupling sublayer."""
    gate = xxz_gate(theta, phi)
    layers = _assemble(chain, lam, cycles, lambda t, bond: gate)
    return CircuitSchedule(chain, layers, lam, None, "xxz", {"theta": theta, "phi": phi})


def gate_rng(seed: int, cycle: int, bond: int) -> np.random.Generator:
    """Independent stream for the gate on ``bond`` (left site index) in ``cycle``."""
    return np.random.default_rng([seed, cycle, bond])


def build_random_schedule(chain: ChainSpec, lam: float, cycles: int, rng_seed: int) -> CircuitSchedule:
    """U(1) random circuit; each gate is drawn from a stream keyed on (seed, cycle, bond)."""
    layers = _assemble(chain, lam, cycles, lambda t, bond: haar_u1_gate(gate_rng(rng_seed, t, bond[0])))
    return CircuitSchedule(chain, layers, lam, rng_seed, "random", {})
