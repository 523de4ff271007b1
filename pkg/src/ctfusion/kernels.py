"""Backend selection for the hot spline kernel.

The compiled extension is used when importable; set ``CTFUSION_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active choice.
"""
import os

from . import _so3spline_py

python_so3_spline_eval = _so3spline_py.so3_spline_eval
python_accumulate_normal_equations = _so3spline_py.accumulate_normal_equations
python_accumulate_schur_blocks = _so3spline_py.accumulate_schur_blocks

try:
    if os.environ.get("CTFUSION_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from ._so3spline import accumulate_normal_equations as compiled_accumulate_normal_equations
    from ._so3spline import accumulate_schur_blocks as compiled_accumulate_schur_blocks
    from ._so3spline import so3_spline_eval as compiled_so3_spline_eval
except ImportError:
    compiled_so3_spline_eval = None
    compiled_accumulate_normal_equations = None
    compiled_accumulate_schur_blocks = None

if compiled_so3_spline_eval is not None:
    so3_spline_eval = compiled_so3_spline_eval
    accumulate_normal_equations = compiled_accumulate_normal_equations
    accumulate_schur_blocks = compiled_accumulate_schur_blocks
    BACKEND = "compiled"
else:
    so3_spline_eval = python_so3_spline_eval
    accumulate_normal_equations = python_accumulate_normal_equations
    accumulate_schur_blocks = python_accumulate_schur_blocks
    BACKEND = "python"

__all__ = ["so3_spline_eval", "accumulate_normal_equations", "python_so3_spline_eval",
           "compiled_so3_spline_eval", "python_accumulate_normal_equations",
           "compiled_accumulate_normal_equations", "accumulate_schur_blocks",
           "python_accumulate_schur_blocks", "compiled_accumulate_schur_blocks", "BACKEND"]
