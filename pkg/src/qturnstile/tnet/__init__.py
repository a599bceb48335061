"""Matrix-product density operator backend (TEBD and DMT)."""

from .dmt import DMTContractError, dmt_apply_gate, dmt_sweep, dmt_truncate_bond, dmt_truncate_matrix
from .evolve import (
    CycleRecord,
    TruncationBudgetExceeded,
    apply_channel_mpdo,
    evolve,
    mpdo_from_product,
    tebd_apply_layer,
)
from .mpdo import MPDO, TruncationReport, product_mpdo

__all__ = [
    "MPDO",
    "CycleRecord",
    "DMTContractError",
    "TruncationBudgetExceeded",
    "TruncationReport",
    "apply_channel_mpdo",
    "dmt_apply_gate",
    "dmt_sweep",
    "dmt_truncate_bond",
    "dmt_truncate_matrix",
    "evolve",
    "mpdo_from_product",
    "product_mpdo",
    "tebd_apply_layer",
]
