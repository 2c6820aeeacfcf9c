"""Elementwise float64 kernels shared by constant folding, the tape and the
reference interpreter.

Every kernel maps numpy arrays to a numpy array of the broadcast shape.
Domain violations (division by zero, ``ln`` of a non-positive number, ``sqrt``
of a negative number) produce NaN so that they poison every dependent value.
Callers are expected to run under ``np.errstate(all="ignore")``.
"""

import numpy as np

_NAN = np.nan


def k_add(a, b):
    return a + b


def k_sub(a, b):
    return a - b


def k_mul(a, b):
    return a * b


def k_div(a, b):
    out = a / b
    zero = b == 0.0
    if zero.any():
        out = np.where(zero, _NAN, out)
    return out


def k_neg(a):
    return -a


def k_pow(a, exponent):
    return np.power(a, exponent)


def k_exp(a):
    return np.exp(a)


def k_ln(a):
    out = np.log(a)
    # log(0) is -inf rather than NaN; treat it as a domain violation too
    zero = a == 0.0
    if zero.any():
        out = np.where(zero, _NAN, out)
    return out


def k_sqrt(a):
    return np.sqrt(a)


def k_sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


BINARY = {"add": k_add, "sub": k_sub, "mul": k_mul, "div": k_div}
UNARY = {"neg": k_neg, "exp": k_exp, "ln": k_ln, "sqrt": k_sqrt, "sigmoid": k_sigmoid}
