"""Joint eye authentication and presentation attack detection at desk scale:
distillation training strategies, a synthetic periocular benchmark, and the
user-to-user / OFRR evaluation protocols.
"""

from ._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
