"""Finite-difference oracles shared by the test modules.

These only call the plain network forward pass, never the jet propagation
they are used to check.
"""

from hjb_linf.checks import fd_jet, fd_param_grad, rel_err  # noqa: F401
