"""Minimal dense tensor library with reverse-mode automatic differentiation."""

from csasr.numerics import ops
from csasr.numerics.gradcheck import finite_diff_check
from csasr.numerics.serialize import read_array, write_array
from csasr.numerics.tensor import Tape, Tensor, active_tape

__all__ = ["Tape", "Tensor", "active_tape", "finite_diff_check", "ops", "read_array", "write_array"]
