"""sohode: battery SOH trajectory prediction with a neural ODE core.

The model treats a battery's health state (SOH plus normalized
charging-time features) as the state of an ordinary differential
equation whose vector field is a learned attention/conv/LSTM/linear
network, integrated over a dimensionless cycle coordinate. Everything
numeric is built in-package: reverse-mode autodiff, adaptive and
fixed-step Runge-Kutta solvers, adjoint gradients, AdamW + Lookahead.
"""

from .backend import BACKEND_NAME

__version__ = "0.1.0"

__all__ = ["BACKEND_NAME", "__version__"]
