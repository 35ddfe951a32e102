"""Energy-based attention: energies, attention variants, descent and verification.

Token sets are N x d float arrays, one token per row.
"""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401
