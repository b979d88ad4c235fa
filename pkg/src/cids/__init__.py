"""Causal state-representation learning for reinforcement-learning recommenders.

Modules:

* ``causal_graph`` -- temporal DAGs, d-separation, exact action-influenced
  state sets and their conditional-independence characterizations.
* ``env`` -- synthetic recommender MDP with known structure, trajectory logs,
  tabular SCMs and the CTR metric.
* ``nn`` -- numpy MLPs, Gaussian likelihood heads, Adam, checkpoints.
* ``cmi_learner`` -- mask learning via conditional mutual information.
* ``policy`` -- DDPG on masked states with selector ablations.
* ``harness`` -- the ``cids`` command-line interface.
"""

__version__ = "0.1.0"

from .causal_graph import (  # noqa: E402
    JointTable,
    NodeRef,
    TemporalDag,
    aia_exact,
    build_temporal_dag,
    cmi_from_joint,
    d_separated,
    dais_exact,
    verify_aia_characterization,
    verify_dais_characterization,
)
from .cmi_learner import CIDSMaskLearner, LearnerConfig, MaskReport, extract_binary_masks, mask_metrics, train_masks  # noqa: E402
from .env import EnvConfig, TrajectoryLog, collect, ctr, generate_config, make_env  # noqa: E402
from .exceptions import (  # noqa: E402
    CIDSError,
    ConfigError,
    DataError,
    DegenerateMaskWarning,
    FingerprintMismatchWarning,
    LogParseError,
    StageError,
    StructuralAssumptionError,
)
from .policy import DDPGRecommender, PolicyConfig, StateSelector, compose_cids_mask, train_policy  # noqa: E402
from .structures import StructureMasks  # noqa: E402

__all__ = [
    "__version__",
    "CIDSError",
    "CIDSMaskLearner",
    "ConfigError",
    "DDPGRecommender",
    "DataError",
    "DegenerateMaskWarning",
    "EnvConfig",
    "FingerprintMismatchWarning",
    "JointTable",
    "LearnerConfig",
    "LogParseError",
    "MaskReport",
    "NodeRef",
    "PolicyConfig",
    "StageError",
    "StateSelector",
    "StructuralAssumptionError",
    "StructureMasks",
    "TemporalDag",
    "TrajectoryLog",
    "aia_exact",
    "build_temporal_dag",
    "cmi_from_joint",
    "collect",
    "compose_cids_mask",
    "ctr",
    "d_separated",
    "dais_exact",
    "extract_binary_masks",
    "generate_config",
    "make_env",
    "mask_metrics",
    "train_masks",
    "train_policy",
    "verify_aia_characterization",
    "verify_dais_characterization",
]
