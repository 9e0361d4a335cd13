"""Tolerance-aware optimistic verification for floating-point tensor programs."""

from .bounds import BoundTensor, FpModel, co_execute, gamma, gamma_tilde
from .calibration import (PERCENTILE_GRID, ThresholdSet, build_thresholds, calibrate,
                          percentile, stability_report)
from .commitments import (Commitment, MerkleProof, MerkleTree, build_tree, canon_tensor,
                          interface_hash, make_commitment, op_signature, prove, verify)
from .engine import DeviceProfile, Trace, execute, execute_fp64, reduce_values
from .graph import Graph, OpNode, Slice, build_graph, extract_subgraph, frontiers, partition
from .models import build_model
from .tensor import Rng, Tensor, max_abs_diff, rng_uniform, tensor_new

__version__ = "0.1.0"
