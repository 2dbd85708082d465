"""Coarse-to-fine Q-learning over action sequences, on numpy."""
from . import kernels
from .c2f import ActionScaler, ActionSpaceSpec, ControlSemantics, IntervalBox, LevelPath, decode, encode_actions
from .critic import CriticConfig, SequenceCritic
from .envs import make_env, scripted_demo
from .executor import EnsembleBuffer, RecedingHorizon, explore
from .harness import RunLog, RunRow, evaluate, make_config, rtg_regression, run_training
from .learning import TrainConfig, critic_loss, soft_update
from .replay import Episode, ReplayStore

__version__ = "0.1.0"
BACKEND = kernels.BACKEND
