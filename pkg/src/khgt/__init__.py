"""Multi-behavior graph transformer recommender."""

from khgt.autodiff import Tape, Var, backward, grad_check

__all__ = ["Tape", "Var", "backward", "grad_check"]
