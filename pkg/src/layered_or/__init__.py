"""Two-level or-parallel search runtime.

Workers inside a team share memory and redistribute open alternatives
dynamically through or-frames; teams exchange work through messages carrying
copied, statically split execution stacks.
"""

from .api import (  # noqa: F401
    EngineHandle,
    GoalSpec,
    TeamSpec,
    par_create_parallel_engine,
    par_free_parallel_engine,
    par_get_answers,
    par_probe_answers,
    par_run_goal,
    parse_goal,
)
from .config import EngineOptions  # noqa: F401
from .errors import (  # noqa: F401
    EngineCreationError,
    EngineError,
    GoalError,
    ProtocolViolation,
)
