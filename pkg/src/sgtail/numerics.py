"""Dense-layer numerics with handwritten gradients.

Everything runs in float64 with a fixed reduction order (delegated to the
active backend kernels), so repeated runs are bit-identical. The layer set
is exactly what the relation model needs: dense, relu, tanh, batch norm,
temperature softmax, cross-entropy, and KL against a constant teacher.
There is no general autograd graph; each forward records its intermediates
on an explicit tape and the matching backward consumes them.
"""

import numpy as np

from . import backend

FLOOR = 1e-12  # probability floor applied before any log


class NumericsError(Exception):
    """Base class for numeric-engine failures."""


class ShapeError(NumericsError):
    pass


class InvalidParameterError(NumericsError):
    pass


class InvalidBatchError(NumericsError):
    pass


class TapeError(NumericsError):
    pass


# Floored-probability events are counted, not silently absorbed.
_clamp_count = 0


def clamp_warning_count():
    """How many probabilities hit the 1e-12 floor inside a log so far."""
    return _clamp_count


def reset_clamp_warnings():
    global _clamp_count
    _clamp_count = 0


def _note_clamps(n):
    global _clamp_count
    if n:
        _clamp_count += int(n)


def as_matrix(a, name="array"):
    """Coerce to a C-contiguous float64 matrix or raise ShapeError."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError("%s: expected 2-d, got %d-d" % (name, out.ndim))
    return out


def require_finite(a, name="array"):
    if not np.all(np.isfinite(a)):
        raise NumericsError("%s contains non-finite entries" % name)
    return a


class Tape:
    """LIFO record of forward intermediates.

    Every forward pushes one entry and the matching backward pops it, so
    backward calls must mirror forward order exactly and each forward is
    consumed at most once. Violations raise TapeError instead of producing
    silently wrong gradients.
    """

    def __init__(self):
        self._entries = []

    def push(self, op, cache):
        self._entries.append((op, cache))

    def pop(self, op):
        if not self._entries:
            raise TapeError("backward(%s) without a recorded forward" % op)
        got, cache = self._entries.pop()
        if got != op:
            raise TapeError(
                "backward order violation: tape top is %s, requested %s" % (got, op)
            )
        return cache

    def __len__(self):
        return len(self._entries)


class Param:
    """Named trainable array paired with an accumulated gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


def softmax_temp(logits, tau):
    """Temperature softmax with max-subtraction; a vector or rows of a matrix."""
    tau = float(tau)
    if not tau > 0:
        raise InvalidParameterError("softmax temperature must be > 0, got %r" % tau)
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        row = np.ascontiguousarray(z[None, :])
        return backend.kernels.softmax_rows(row, tau)[0]
    if z.ndim == 2:
        return backend.kernels.softmax_rows(np.ascontiguousarray(z), tau)
    raise ShapeError("softmax_temp expects a vector or matrix, got %d-d" % z.ndim)


def linear_forward(x, w, b=None):
    """y = w^T x + b for a single vector (row convention x @ w + b)."""
    x = np.asarray(x, dtype=np.float64)
    w = as_matrix(w, "weight")
    if x.ndim != 1 or x.shape[0] != w.shape[0]:
        raise ShapeError(
            "linear_forward: input %s does not match weight %s" % (x.shape, w.shape)
        )
    y = backend.kernels.matmul(np.ascontiguousarray(x[None, :]), w)[0]
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (w.shape[1],):
            raise ShapeError("linear_forward: bias %s vs out width %d" % (b.shape, w.shape[1]))
        y = y + b
    return y


def activation(x, kind):
    """Elementwise nonlinearity, kind in {relu, tanh}."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    raise InvalidParameterError("unknown activation kind: %r" % (kind,))


class Linear:
    """Dense layer y = x @ w + b over batched rows; bias optional.

    Classifier matrices (entity, teacher, predicate) use the no-bias form,
    matching a plain weight-matrix softmax head.
    """

    def __init__(self, w: Param, b: Param | None = None):
        self.w = w
        self.b = b
        self._op = "linear:%s" % w.name

    def forward(self, x, tape=None):
        x = as_matrix(x, "linear input")
        if x.shape[1] != self.w.value.shape[0]:
            raise ShapeError(
                "linear: input width %d != weight rows %d"
                % (x.shape[1], self.w.value.shape[0])
            )
        y = backend.kernels.matmul(x, self.w.value)
        if self.b is not None:
            y = y + self.b.value
        if tape is not None:
            tape.push(self._op, x)
        return y

    def backward(self, dy, tape):
        x = tape.pop(self._op)
        dy = as_matrix(dy, "linear upstream grad")
        self.w.grad += backend.kernels.matmul_t1(x, dy)
        if self.b is not None:
            self.b.grad += backend.kernels.colsum(dy)
        return backend.kernels.matmul_t2(dy, self.w.value)


class Relu:
    def forward(self, x, tape=None):
        x = np.asarray(x, dtype=np.float64)
        if tape is not None:
            tape.push("relu", x > 0.0)
        return np.maximum(x, 0.0)

    def backward(self, dy, tape):
        mask = tape.pop("relu")
        return np.where(mask, dy, 0.0)


class Tanh:
    def forward(self, x, tape=None):
        y = np.tanh(np.asarray(x, dtype=np.float64))
        if tape is not None:
            tape.push("tanh", y)
        return y

    def backward(self, dy, tape):
        y = tape.pop("tanh")
        return dy * (1.0 - y * y)


class BatchNorm:
    """Per-feature batch normalization, eps 1e-5, running-stat momentum 0.1.

    Train mode requires batch size >= 2 and uses biased (1/n) batch variance
    for both normalization and the running estimate, so a two-point batch
    {1, 3} normalizes to {-1, +1} up to epsilon. Eval mode reads the running
    stats only and is therefore batch-size independent.
    """

    def __init__(self, gamma: Param, beta: Param, eps=1e-5, momentum=0.1):
        if gamma.value.shape != beta.value.shape or gamma.value.ndim != 1:
            raise ShapeError("batchnorm gamma/beta must be equal-length vectors")
        self.gamma = gamma
        self.beta = beta
        self.eps = float(eps)
        self.momentum = float(momentum)
        self._op = "batchnorm:%s" % gamma.name
        width = gamma.value.shape[0]
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def forward(self, x, tape=None, train=True):
        x = as_matrix(x, "batchnorm input")
        if x.shape[1] != self.gamma.value.shape[0]:
            raise ShapeError(
                "batchnorm: width %d != %d" % (x.shape[1], self.gamma.value.shape[0])
            )
        if train:
            n = x.shape[0]
            if n < 2:
                raise InvalidBatchError("batchnorm train mode needs >= 2 rows, got %d" % n)
            mean = backend.kernels.colsum(x) / n
            centered = x - mean
            var = backend.kernels.colsum(centered * centered) / n
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = centered * inv_std
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean
            self.running_var = (1.0 - m) * self.running_var + m * var
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv_std
        if tape is not None:
            tape.push(self._op, (xhat, inv_std, train))
        return self.gamma.value * xhat + self.beta.value

    def backward(self, dy, tape):
        xhat, inv_std, was_train = tape.pop(self._op)
        dy = as_matrix(dy, "batchnorm upstream grad")
        self.gamma.grad += backend.kernels.colsum(dy * xhat)
        self.beta.grad += backend.kernels.colsum(dy)
        if not was_train:
            return dy * (self.gamma.value * inv_std)
        n = dy.shape[0]
        sum_dy = backend.kernels.colsum(dy)
        sum_dy_xhat = backend.kernels.colsum(dy * xhat)
        return (self.gamma.value * inv_std / n) * (n * dy - sum_dy - xhat * sum_dy_xhat)


def _target_index(target, width):
    if isinstance(target, (int, np.integer)):
        idx = int(target)
        if not 0 <= idx < width:
            raise InvalidParameterError("target index %d out of range [0, %d)" % (idx, width))
        return idx
    t = np.asarray(target, dtype=np.float64)
    if t.shape != (width,) or np.count_nonzero(t) != 1 or t.max() != 1.0:
        raise InvalidParameterError("target must be an index or a one-hot vector")
    return int(np.argmax(t))


def cross_entropy(pred, target):
    """-log pred[target] for one probability vector; target index or one-hot."""
    p = np.asarray(pred, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError("cross_entropy expects a probability vector")
    if p.min() < 0 or abs(float(p.sum()) - 1.0) > 1e-6:
        raise InvalidParameterError("cross_entropy input is not a probability vector")
    v = float(p[_target_index(target, p.shape[0])])
    if v < FLOOR:
        _note_clamps(1)
        v = FLOOR
    return float(-np.log(v))


def kl_divergence(student, teacher):
    """Sum_i s_i log(s_i / t_i) with 0 log 0 := 0; zero teacher mass is floored."""
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if s.ndim != 1 or s.shape != t.shape:
        raise ShapeError("kl_divergence expects two equal-length probability vectors")
    for name, v in (("student", s), ("teacher", t)):
        if v.min() < 0 or abs(float(v.sum()) - 1.0) > 1e-6:
            raise InvalidParameterError("kl_divergence %s is not a probability vector" % name)
    mask = s > 0.0
    ss = s[mask]
    tt = t[mask]
    low = tt < FLOOR
    if low.any():
        _note_clamps(int(low.sum()))
        tt = np.maximum(tt, FLOOR)
    val = float(np.sum(ss * (np.log(ss) - np.log(tt))))
    return max(0.0, val)


class SoftmaxCrossEntropy:
    """Weighted -log softmax_temp(logits)[target] over rows, fused gradient.

    With weights omitted every row carries 1/n (a plain mean). Per-image
    averaging hands in weights 1 / (n_images * instances_in_image) instead.
    backward returns d(loss)/d(logits) = w_i * (p - onehot) / tau.
    """

    def forward(self, logits, targets, tape=None, tau=1.0, weights=None):
        tau = float(tau)
        if not tau > 0:
            raise InvalidParameterError("temperature must be > 0, got %r" % tau)
        z = as_matrix(logits, "logits")
        y = np.asarray(targets)
        if y.shape != (z.shape[0],):
            raise ShapeError("targets %s do not match %d logit rows" % (y.shape, z.shape[0]))
        y = y.astype(np.int64)
        if z.shape[0] and (y.min() < 0 or y.max() >= z.shape[1]):
            raise InvalidParameterError("target ids out of class range")
        n = z.shape[0]
        if weights is None:
            w = np.full(n, 1.0 / n) if n else np.zeros(0)
        else:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (n,):
                raise ShapeError("weights %s do not match %d rows" % (w.shape, n))
        p = backend.kernels.softmax_rows(z, tau)
        picked = p[np.arange(n), y]
        low = picked < FLOOR
        if low.any():
            _note_clamps(int(low.sum()))
            picked = np.maximum(picked, FLOOR)
        loss = float(np.sum(w * -np.log(picked)))
        if tape is not None:
            tape.push("softmax_xent", (p, y, w, tau))
        return loss, p

    def backward(self, tape):
        p, y, w, tau = tape.pop("softmax_xent")
        d = p.copy()
        d[np.arange(p.shape[0]), y] -= 1.0
        return d * (w / tau)[:, None]


class SoftmaxKL:
    """Mean KL(softmax(student logits / tau) || teacher rows).

    The teacher rows are already-softened constants; no gradient flows to
    them. backward returns the student-logit gradient
    (1 / (n * tau)) * s * (log(s / t) - KL_row).
    """

    def forward(self, student_logits, teacher_probs, tape=None, tau=1.0):
        tau = float(tau)
        if not tau > 0:
            raise InvalidParameterError("temperature must be > 0, got %r" % tau)
        z = as_matrix(student_logits, "student logits")
        t = as_matrix(teacher_probs, "teacher probabilities")
        if z.shape != t.shape:
            raise ShapeError("student %s vs teacher %s" % (z.shape, t.shape))
        s = backend.kernels.softmax_rows(z, tau)
        low = (t < FLOOR) & (s > 0.0)
        if low.any():
            _note_clamps(int(low.sum()))
        t_safe = np.maximum(t, FLOOR)
        # s == 0 exactly kills its term (0 log 0 := 0); the inner floor only
        # keeps the log finite where the product is already zero.
        log_ratio = np.log(np.maximum(s, FLOOR)) - np.log(t_safe)
        kl_rows = np.sum(np.where(s > 0.0, s * log_ratio, 0.0), axis=1)
        loss = float(np.mean(kl_rows)) if kl_rows.size else 0.0
        if tape is not None:
            tape.push("softmax_kl", (s, log_ratio, kl_rows, tau))
        return loss, s

    def backward(self, tape):
        s, log_ratio, kl_rows, tau = tape.pop("softmax_kl")
        n = s.shape[0]
        return s * (log_ratio - kl_rows[:, None]) / (n * tau)
