"""State-alignment imitation learning at desk scale.

Submodules: ``nn`` (autodiff and MLPs), ``envs`` (toy environments and demos),
``align`` (next-state VAE, inverse dynamics, action prior), ``critic``
(Wasserstein potential and rewards), ``train`` (regularized PPO and baselines),
``analysis`` (evaluation, exact 1-D W1, reward decomposability), ``cli``.
"""

from .errors import ContractError, DimensionError, NonFiniteError, StageError

__version__ = "0.1.0"

__all__ = ["ContractError", "DimensionError", "NonFiniteError", "StageError", "__version__"]
