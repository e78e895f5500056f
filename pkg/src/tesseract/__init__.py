"""Tensorised multi-agent RL: CP-decomposed Q functions, model-based and
model-free learning on factored action spaces."""

from .tensor_core import (CpTensor, ShapeError, as_dense, contract, cp_inner_product,
                          cp_reconstruct, frobenius_norm, outer_product, random_cp)
from .cp_decomp import (AlsConfig, ObservedEntries, als_decompose, approx_rank,
                        boosted_estimate, coherence, complete_from_samples)
from .mmdp import (FactoredPolicy, Mmdp, TensorGame, Trajectory, generate_low_rank_mmdp,
                   generate_tensor_game, load_env, rollout, save_env)
from .bellman import (bellman_apply, improve_policy, policy_evaluate_exact,
                      policy_evaluate_iterative, policy_iteration, verify_rank_bound)
from .model_based import MbConfig, estimate_dynamics, run_model_based, thm3_bound, verify_thm3
from .model_free import (LearningCurve, MfConfig, fql_to_cp, train_iac, train_tensor_game,
                         train_vdn, vdn_to_cp)

__version__ = "0.1.0"

__all__ = [
    "CpTensor",
    "ShapeError",
    "as_dense",
    "contract",
    "cp_inner_product",
    "cp_reconstruct",
    "frobenius_norm",
    "outer_product",
    "random_cp",
    "AlsConfig",
    "ObservedEntries",
    "als_decompose",
    "approx_rank",
    "boosted_estimate",
    "coherence",
    "complete_from_samples",
    "FactoredPolicy",
    "Mmdp",
    "TensorGame",
    "Trajectory",
    "generate_low_rank_mmdp",
    "generate_tensor_game",
    "load_env",
    "rollout",
    "save_env",
    "bellman_apply",
    "improve_policy",
    "policy_evaluate_exact",
    "policy_evaluate_iterative",
    "policy_iteration",
    "verify_rank_bound",
    "MbConfig",
    "estimate_dynamics",
    "run_model_based",
    "thm3_bound",
    "verify_thm3",
    "LearningCurve",
    "MfConfig",
    "fql_to_cp",
    "train_iac",
    "train_tensor_game",
    "train_vdn",
    "vdn_to_cp",
]
