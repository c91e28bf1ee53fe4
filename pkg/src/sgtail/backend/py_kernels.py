"""NumPy fallback kernels.

Same call surface as the compiled core. Reduction order inside matmul/sum is
delegated to numpy/BLAS, which is deterministic run-to-run in-process but not
bit-identical to the compiled core's strict left-to-right accumulation.
"""

import numpy as np

NAME = "py"


def matmul(a, b):
    """a (n,k) @ b (k,m) -> (n,m)."""
    return a @ b


def matmul_t1(a, b):
    """a.T @ b for a (n,k), b (n,m) -> (k,m). Gradient of W in y = x @ W."""
    return a.T @ b


def matmul_t2(a, b):
    """a @ b.T for a (n,m), b (k,m) -> (n,k). Gradient of x in y = x @ W."""
    return a @ b.T


def colsum(a):
    """Column sums of a (n,m) -> (m,)."""
    return a.sum(axis=0)


def softmax_rows(z, tau):
    """Row-wise softmax(z / tau) with max subtraction."""
    m = z.max(axis=1, keepdims=True)
    e = np.exp((z - m) / tau)
    return e / e.sum(axis=1, keepdims=True)
