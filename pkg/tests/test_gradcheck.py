"""Analytic gradients vs central finite differences over random configs.

Each case draws a small random chain (dense -> optional batchnorm ->
relu/tanh -> dense -> cross-entropy or KL head) and checks every parameter
gradient plus the input gradient. Cases whose relu pre-activations sit
within 1e-3 of the kink are redrawn deterministically: finite differences
are only meaningful away from the nondifferentiable point.
"""

import time

import numpy as np

from oracles import finite_difference, rel_error
from sgtail import numerics as N
from sgtail.seeding import derive


def _draw_case(seed, attempt):
    rng = np.random.default_rng(derive(seed, "gradcheck", attempt))
    n = int(rng.integers(3, 7))
    din = int(rng.integers(2, 6))
    dh = int(rng.integers(2, 6))
    k = int(rng.integers(2, 5))

    w1 = N.Param("w1", rng.standard_normal((din, dh)) * 0.7)
    b1 = N.Param("b1", rng.standard_normal(dh) * 0.2) if rng.random() < 0.8 else None
    w2 = N.Param("w2", rng.standard_normal((dh, k)) * 0.7)
    lin1, lin2 = N.Linear(w1, b1), N.Linear(w2)
    use_relu = rng.random() < 0.5
    act = N.Relu() if use_relu else N.Tanh()
    params = [p for p in (w1, b1, w2) if p is not None]

    norm = ["train", "eval", "none"][int(rng.integers(3))]
    bn = None
    if norm != "none":
        g = N.Param("g", 1.0 + 0.2 * rng.standard_normal(dh))
        be = N.Param("be", 0.2 * rng.standard_normal(dh))
        bn = N.BatchNorm(g, be)
        bn.running_mean = 0.3 * rng.standard_normal(dh)
        bn.running_var = 0.5 + rng.random(dh)
        params += [g, be]

    x = rng.standard_normal((n, din))
    y = rng.integers(0, k, size=n)
    tau = float(rng.choice([0.7, 1.0, 4.0, 10.0]))
    use_kl = rng.random() < 0.5
    teacher = N.softmax_temp(rng.standard_normal((n, k)), tau)
    head = N.SoftmaxKL() if use_kl else N.SoftmaxCrossEntropy()
    weights = rng.random(n) + 0.1 if (not use_kl and rng.random() < 0.4) else None

    def forward(tape=None, xv=None):
        h = lin1.forward(x if xv is None else xv, tape)
        if bn is not None:
            h = bn.forward(h, tape, train=(norm == "train"))
        h = act.forward(h, tape)
        z = lin2.forward(h, tape)
        if use_kl:
            return head.forward(z, teacher, tape, tau=tau)[0]
        return head.forward(z, y, tape, tau=tau, weights=weights)[0]

    # pre-activation margin guard for the relu kink
    if use_relu:
        h = lin1.forward(x)
        if bn is not None:
            h = bn.forward(h, train=(norm == "train"))
        if np.abs(h).min() < 1e-3:
            return None
    return forward, (lin1, bn, act, lin2, head, use_kl), params, x


def run_case(seed):
    """Gradcheck one random configuration; returns the worst relative error."""
    for attempt in range(50):
        drawn = _draw_case(seed, attempt)
        if drawn is not None:
            break
    else:
        raise AssertionError("could not draw a kink-free case for seed %d" % seed)
    forward, chain, params, x = drawn
    lin1, bn, act, lin2, head, use_kl = chain

    tape = N.Tape()
    forward(tape)
    d = head.backward(tape)
    d = lin2.backward(d, tape)
    d = act.backward(d, tape)
    if bn is not None:
        d = bn.backward(d, tape)
    dx = lin1.backward(d, tape)
    assert len(tape) == 0

    worst = rel_error(dx, finite_difference(lambda v: forward(xv=v), x.copy()))
    for p in params:
        def f(v, p=p):
            old = p.value.copy()
            p.value[...] = v
            out = forward()
            p.value[...] = old
            return out

        worst = max(worst, rel_error(p.grad, finite_difference(f, p.value.copy())))
    return worst


def run_suite(n_configs=100):
    """Returns (worst relative error, elapsed seconds) over n_configs cases."""
    t0 = time.time()
    worst = 0.0
    for seed in range(n_configs):
        worst = max(worst, run_case(seed))
    return worst, time.time() - t0


def test_gradient_suite_100_random_configs():
    worst, elapsed = run_suite(100)
    assert worst < 1e-4, "worst rel error %.3g" % worst
    assert elapsed < 30.0, "gradient suite took %.1fs" % elapsed
