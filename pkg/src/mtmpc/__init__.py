"""Bayesian multi-task residual-dynamics learning for model predictive control.

Modules
-------
plant      reduced simulated plants, disturbance tasks, RK4 integration
features   trigonometric / constant / MLP features and Bayesian linear regression
metatrain  multi-task hyperparameter learning
adapt      Kalman adaptation of the task weights and the acceleration estimator
mpc        multiple-shooting Gauss-Newton SQP and real-time iteration
bench      study configurations, closed-loop benchmark and CLI
"""

from .errors import (ConfigurationError, InvalidArgumentError, MtmpcError, NumericError,
                     NumericOverflowError, OptimizationFailed, SolverFailure)

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "InvalidArgumentError", "MtmpcError", "NumericError",
           "NumericOverflowError", "OptimizationFailed", "SolverFailure", "__version__"]
