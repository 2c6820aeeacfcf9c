"""Alias for :mod:`psens.tape` under its interface name.

``tape`` is the primary module name because ``exec`` shadows a builtin when
imported bare.
"""

from psens.tape import (  # noqa: F401
    CompileError,
    EvalOutcome,
    Instruction,
    Program,
    compile,
    evaluate,
    evaluate_batch,
    interpret,
)
