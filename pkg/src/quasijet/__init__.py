"""Recovery of quasilinear conductivity jets from boundary flux data on planar domains."""
from ._version import __version__
from .errors import *  # noqa: F401,F403
from .tensor_core import *  # noqa: F401,F403
from .expressions import parse_expression, Taylor, TaylorSpace
from .coefficients import *  # noqa: F401,F403
from .geometry import *  # noqa: F401,F403
from .fem import *  # noqa: F401,F403
from .cascade import *  # noqa: F401,F403
from .measurement import *  # noqa: F401,F403
from .reconstruction import *  # noqa: F401,F403
from .stability import *  # noqa: F401,F403
from .cli import RunConfig, run
