"""Packed building blocks and their composition into the inference protocol."""
from .comparison import (ComparisonBlinding, compare_blind, compare_recover, compare_recover_times,
                         compare_respond, forest_compare_adjust, oblivious_compare, oblivious_compare_plus,
                         range_audit, sample_blinding, scalar_compare_trace, sign_bits)
from .outsourced import EncryptedModel, OutsourcedResult, outsource_model, outsourced_infer
from .path import (PathBlinding, PathPlan, path_blind, path_costs, path_sums_plain, path_unblind,
                   sample_path_blinding)
from .selection import (block_sum, feature_sel_pack, feature_select_I, feature_select_II, left_rotations,
                        select_diagonal, selection_shifts)
from .session import ClientSession, InferenceResult, ServerSession, client_shifts, forest_infer

__all__ = [
    "ClientSession", "ComparisonBlinding", "EncryptedModel", "InferenceResult", "OutsourcedResult",
    "PathBlinding", "PathPlan", "ServerSession", "block_sum", "client_shifts", "compare_blind",
    "compare_recover", "compare_recover_times", "compare_respond", "feature_sel_pack", "feature_select_I",
    "feature_select_II", "forest_compare_adjust", "forest_infer", "left_rotations", "oblivious_compare",
    "oblivious_compare_plus", "outsource_model", "outsourced_infer", "path_blind", "path_costs",
    "path_sums_plain", "path_unblind", "range_audit", "sample_blinding", "sample_path_blinding",
    "scalar_compare_trace", "select_diagonal", "selection_shifts", "sign_bits",
]
