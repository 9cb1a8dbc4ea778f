"""Neural solvers for coupled FBSDEs from stochastic optimal control."""

__version__ = "0.1.0"
