"""Turnstile protocol on an MPDO: TEBD and DMT evolution drivers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal, Sequence

import numpy as np

from ..exact import PLUS, InitialStateSpec, KrausSet, NoiseModel
from ..gates import ChainSpec, CircuitSchedule, GateEvent, Layer
from .dmt import dmt_apply_gate, dmt_sweep, right_envs
from .mpdo import MPDO, TruncationReport, product_mpdo

if TYPE_CHECKING:
    from numpy.typing import NDArray

log = logging.getLogger(__name__)


class TruncationBudgetExceeded(RuntimeError):
    """Cumulative discarded weight went over the configured budget."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


def mpdo_from_product(spec: InitialStateSpec, chain: ChainSpec) -> MPDO:
    """Bond-dimension-1 MPDO; the central site is fused with the ancilla in ``|+><+|``."""
    mats = spec.site_matrices(chain.n_sites)
    c = chain.central_site
    plus = np.outer(PLUS, PLUS.conj())
    mats = list(mats)
    mats[c] = np.kron(mats[c], plus)
    return product_mpdo(mats, super_site=c)


def _embed_data_gate(mpdo: MPDO, u: NDArray[np.complex128], i: int) -> NDArray[np.complex128]:
    """Lift a 4x4 data gate on ``(i, i+1)`` to the physical legs of the MPDO sites."""
    c = mpdo.super_site
    if c is None or c not in (i, i + 1):
        return u
    eye = np.eye(2)
    if c == i + 1:
        # sites (i: q_i) (i+1: q_c, anc)
        return np.kron(u, eye)
    # sites (i: q_c, anc) (i+1: q_{c+1}); u acts on (q_c, q_{c+1})
    u4 = u.reshape(2, 2, 2, 2)
    full = np.einsum("xyab,ec->xeyacb", u4, eye)
    return full.reshape(8, 8)


def _check_adjacent(ev: GateEvent, mpdo: MPDO) -> None:
    i, j = ev.sites
    if ev.kind == "turnstile":
        if mpdo.super_site is None or i != mpdo.super_site:
            raise ValueError("turnstile must act on the super-site")
        return
    if j != i + 1:
        raise ValueError(f"gate on non-adjacent sites {ev.sites}")


def tebd_apply_layer(
    mpdo: MPDO,
    layer: Layer | Sequence[GateEvent],
    max_bond: int | None = None,
    trunc_tol: float = 0.0,
    mode: Literal["svd", "qr"] = "svd",
) -> TruncationReport:
    """Apply one layer of gates on disjoint sites.

    ``mode="svd"`` truncates at every gate (TEBD); ``mode="qr"`` splits exactly
    and leaves truncation to a later sweep.
    """
    t0 = time.perf_counter()
    rep = TruncationReport()
    events = list(layer.events if isinstance(layer, Layer) else layer)
    for ev in events:
        _check_adjacent(ev, mpdo)
    singles = [ev for ev in events if ev.kind == "turnstile"]
    pairs = sorted((ev for ev in events if ev.kind == "data"), key=lambda e: e.sites[0])
    for ev in singles:
        mpdo.apply_unitary(ev.gate.matrix, ev.sites[0])
    if pairs:
        center = mpdo.center if mpdo.center is not None else 0
        go_right = abs(center - pairs[0].sites[0]) <= abs(center - pairs[-1].sites[1])
        if not go_right:
            pairs = pairs[::-1]
        for ev in pairs:
            i = ev.sites[0]
            u = _embed_data_gate(mpdo, ev.gate.matrix, i)
            w = mpdo.apply_two_site(u, i, max_bond, trunc_tol, "right" if go_right else "left", mode)
            rep.add(i, w)
        if mode == "svd" and any(w > 0 for _, w in rep.discarded):
            rep.renorm_factors.append(mpdo.normalize_trace())
    rep.max_bond = mpdo.max_bond_dim
    rep.wall_time = time.perf_counter() - t0
    return rep


def _site_kraus(mpdo: MPDO, kraus: KrausSet, q: int, chain: ChainSpec) -> tuple[int, KrausSet]:
    c = mpdo.super_site
    if q == chain.ancilla_index:
        eye = np.eye(2)
        return c, KrausSet(tuple(np.kron(eye, k) for k in kraus.operators), kraus.label, kraus.gamma)
    if q == c:
        return c, kraus.embedded(2)
    return q, kraus


def apply_channel_mpdo(mpdo: MPDO, kraus: KrausSet, site: int, chain: ChainSpec | None = None) -> MPDO:
    """Apply a single-qubit channel to data qubit ``site`` (or the ancilla index).

    Bond dimensions are unchanged; the orthogonality center moves to the site.
    """
    if kraus.gamma == 0:
        return mpdo
    if chain is not None:
        site, kraus = _site_kraus(mpdo, kraus, site, chain)
    elif site == mpdo.super_site and mpdo.dims[site] == 4 and kraus.operators[0].shape[0] == 2:
        kraus = kraus.embedded(2)
    mpdo.apply_superop(kraus.superoperator(), site, unitary=False)
    return mpdo


def apply_noise(mpdo: MPDO, noise: NoiseModel, chain: ChainSpec) -> None:
    targets = noise.targets(chain)
    by_site: dict[int, list[KrausSet]] = {}
    for q in targets:
        s, k = _site_kraus(mpdo, noise.kraus, q, chain)
        by_site.setdefault(s, []).append(k)
    order = sorted(by_site)
    if mpdo.center is not None and mpdo.center > len(mpdo) // 2:
        order = order[::-1]
    for s in order:
        for k in by_site[s]:
            mpdo.apply_superop(k.superoperator(), s, unitary=False)


@dataclass
class CycleRecord:
    cycle: int
    x: float
    y: float
    report: TruncationReport = field(default_factory=TruncationReport)
    trace: float = 1.0


def evolve(
    mpdo: MPDO,
    schedule: CircuitSchedule,
    noise: NoiseModel | None = None,
    algorithm: Literal["tebd", "dmt"] = "tebd",
    max_bond: int = 256,
    trunc_tol: float = 0.0,
    cadence: Literal["layer", "gate"] = "layer",
    weight_budget: float | None = None,
    callback=None,
) -> list[CycleRecord]:
    """Run the schedule, recording the ancilla readout after every cycle.

    Args:
        mpdo: initial state; modified in place.
        schedule: circuit over the same chain.
        noise: per-cycle single-qubit channel, applied after the last sublayer.
        algorithm: "tebd" truncates at every gate; "dmt" splits gates exactly and
            then truncates with DMT, either in a full sweep after every data
            sublayer (``cadence="layer"``) or right after each gate
            (``cadence="gate"``).
        max_bond: bond dimension cap.
        trunc_tol: relative discarded-weight tolerance per truncation.
        weight_budget: abort when the cumulative discarded weight exceeds it.
        callback: called with every ``CycleRecord`` as it is produced.

    Raises:
        TruncationBudgetExceeded: carries the records produced so far.
    """
    chain = schedule.chain
    x, y = mpdo.ancilla_xy()
    records = [CycleRecord(0, x, y, TruncationReport(max_bond=mpdo.max_bond_dim), mpdo.trace().real)]
    if callback:
        callback(records[0])
    cumulative = 0.0
    for t, layers in enumerate(schedule.cycles):
        t0 = time.perf_counter()
        rep = TruncationReport()
        for layer in layers:
            if algorithm == "tebd" or layer.kind == "turnstile":
                rep.merge(tebd_apply_layer(mpdo, layer, max_bond, trunc_tol, "svd"))
            elif cadence == "gate":
                rep.merge(_dmt_gate_layer(mpdo, layer, max_bond, trunc_tol))
            else:
                rep.merge(tebd_apply_layer(mpdo, layer, None, 0.0, "qr"))
                rep.merge(dmt_sweep(mpdo, max_bond, trunc_tol))
        if noise is not None and noise.kraus.gamma > 0:
            apply_noise(mpdo, noise, chain)
        rep.renorm_factors.append(mpdo.normalize_trace())
        rep.wall_time = time.perf_counter() - t0
        rep.max_bond = mpdo.max_bond_dim
        x, y = mpdo.ancilla_xy()
        rec = CycleRecord(t + 1, x, y, rep, mpdo.trace().real)
        records.append(rec)
        if callback:
            callback(rec)
        cumulative += rep.cumulative
        log.debug("cycle %d: x=%.6f y=%.6f chi=%d dw=%.2e (%.2fs)", t + 1, x, y, rep.max_bond, rep.cumulative, rep.wall_time)
        if weight_budget is not None and cumulative > weight_budget:
            raise TruncationBudgetExceeded(
                f"cumulative discarded weight {cumulative:.3g} exceeds budget {weight_budget:.3g} at cycle {t + 1}",
                records,
            )
    return records


def _dmt_gate_layer(mpdo: MPDO, layer: Layer, max_bond: int, trunc_tol: float) -> TruncationReport:
    """Gate-by-gate DMT over one sublayer, left to right, with incremental environments."""
    t0 = time.perf_counter()
    rep = TruncationReport()
    pairs = sorted(layer.events, key=lambda e: e.sites[0])
    for ev in pairs:
        _check_adjacent(ev, mpdo)
    if not pairs:
        return rep
    first = pairs[0].sites[0]
    mpdo.move_center(first)
    r_envs = right_envs(mpdo)
    e_left = mpdo.left_env(first)
    pos = first
    for ev in pairs:
        i = ev.sites[0]
        mpdo.move_center(i)
        for j in range(pos, i):
            e_left = e_left @ np.tensordot(mpdo.tensors[j], mpdo._local_vector(j, None), axes=([1], [0]))
        u = _embed_data_gate(mpdo, ev.gate.matrix, i)
        w = dmt_apply_gate(mpdo, u, i, max_bond, trunc_tol, e_left, r_envs[i + 2], rep)
        rep.add(i, w)
        pos = i
    rep.max_bond = mpdo.max_bond_dim
    rep.wall_time = time.perf_counter() - t0
    return rep
