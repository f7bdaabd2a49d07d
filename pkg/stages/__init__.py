"""Stage workers driven by the orchestrator.

Each worker owns a logger, a status string and its per-stage records,
and runs its blocking torch loop in a thread.
"""
from .data import DataStage  # noqa: F401
from .diffusion import DiffusionStage  # noqa: F401
from .mim import MimStage  # noqa: F401
from .registration import RegistrationStage  # noqa: F401
from .evaluation import EvaluationStage  # noqa: F401
