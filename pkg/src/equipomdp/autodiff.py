"""Dense reverse-mode automatic differentiation on numpy arrays.

Define-by-run: every primitive records its parents and a backward closure on
the produced node; ``backward`` replays the graph in reverse topological order.
Everything runs in float64.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class RankError(AutodiffError):
    pass


class NonFiniteGradientError(AutodiffError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "bwd", "name")

    def __init__(self, value, parents=(), bwd=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape})"

    # Small operator sugar; everything routes through the module primitives.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(value, name: str) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), name=name)


def constant(value) -> Tensor:
    return Tensor(value)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitives.
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        val = a.value + b.value
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def bwd(g):
        a.grad += _unbroadcast(g, a.value.shape)
        b.grad += _unbroadcast(g, b.value.shape)

    return Tensor(val, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        a.grad += s * g

    return Tensor(a.value * s, (a,), bwd)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    try:
        val = a.value * b.value
    except ValueError as e:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}") from e

    def bwd(g):
        a.grad += _unbroadcast(g * b.value, a.value.shape)
        b.grad += _unbroadcast(g * a.value, b.value.shape)

    return Tensor(val, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim > 2 or bv.ndim > 2 or av.ndim == 0 or bv.ndim == 0:
        raise ShapeError(f"matmul supports 1D/2D operands, got {av.shape}@{bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
    val = av @ bv

    def bwd(g):
        if av.ndim == 1 and bv.ndim == 1:  # dot product
            a.grad += g * bv
            b.grad += g * av
        elif av.ndim == 1:  # (k,) @ (k,n) -> (n,)
            a.grad += bv @ g
            b.grad += np.outer(av, g)
        elif bv.ndim == 1:  # (m,k) @ (k,) -> (m,)
            a.grad += np.outer(g, bv)
            b.grad += av.T @ g
        else:
            a.grad += g @ bv.T
            b.grad += av.T @ g

    return Tensor(val, (a, b), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        a.grad += g * val * (1.0 - val)

    return Tensor(val, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    val = np.tanh(a.value)

    def bwd(g):
        a.grad += g * (1.0 - val * val)

    return Tensor(val, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    val = np.maximum(a.value, 0.0)

    def bwd(g):
        a.grad += g * (a.value > 0)

    return Tensor(val, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.value)

    def bwd(g):
        a.grad += g * val

    return Tensor(val, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    x = a.value
    shifted = x - x.max(axis=-1, keepdims=True)
    val = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bwd(g):
        a.grad += g - np.exp(val) * g.sum(axis=-1, keepdims=True)

    return Tensor(val, (a,), bwd)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Pick one entry per row of a 2D tensor: out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.value.shape[0]:
        raise ShapeError(f"gather_rows: {a.shape} with index {idx.shape}")
    rows = np.arange(a.value.shape[0])
    val = a.value[rows, idx]

    def bwd(g):
        np.add.at(a.grad, (rows, idx), g)

    return Tensor(val, (a,), bwd)


def take(a: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Gather entries of ``a`` (flattened) at the given index array."""
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    val = a.value.reshape(-1)[flat_idx]

    def bwd(g):
        flat = np.zeros(a.value.size)
        np.add.at(flat, flat_idx.ravel(), g.ravel())
        a.grad += flat.reshape(a.value.shape)

    return Tensor(val, (a,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    val = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.grad += piece

    return Tensor(val, tuple(tensors), bwd)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis."""
    val = a.value[..., start:stop]

    def bwd(g):
        a.grad[..., start:stop] += g

    return Tensor(val, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    val = a.value.reshape(shape)

    def bwd(g):
        a.grad += g.reshape(a.value.shape)

    return Tensor(val, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        a.grad += g.transpose(inv)

    return Tensor(a.value.transpose(axes), (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        a.grad += g * np.ones_like(a.value)

    return Tensor(a.value.sum(), (a,), bwd)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    def bwd(g):
        a.grad += np.expand_dims(g, axis)

    return Tensor(a.value.sum(axis=axis), (a,), bwd)


def mean(a: Tensor) -> Tensor:
    n = a.value.size

    def bwd(g):
        a.grad += g * np.ones_like(a.value) / n

    return Tensor(a.value.mean(), (a,), bwd)


def conv2d_np(x: np.ndarray, k: np.ndarray, padding: str) -> np.ndarray:
    """Cross-correlation of (B,C,H,W) with kernels (F,C,kh,kw) -> (B,F,H',W')."""
    kh, kw = k.shape[-2], k.shape[-1]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("same padding needs odd kernel sizes")
        x = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    elif padding != "valid":
        raise ShapeError(f"unknown padding {padding!r}")
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return np.einsum("bchwuv,fcuv->bfhw", windows, k, optimize=True)


def conv2d(x: Tensor, k: Tensor, padding: str = "valid") -> Tensor:
    xv, kv = x.value, k.value
    if xv.ndim != 4 or kv.ndim != 4 or xv.shape[1] != kv.shape[1]:
        raise ShapeError(f"conv2d: input {xv.shape}, kernel {kv.shape}")
    kh, kw = kv.shape[-2], kv.shape[-1]
    if padding == "valid" and (xv.shape[2] < kh or xv.shape[3] < kw):
        raise ShapeError(f"conv2d: input {xv.shape} smaller than kernel {kv.shape}")
    val = conv2d_np(xv, kv, padding)

    def bwd(g):
        xp = xv
        if padding == "same":
            xp = np.pad(xv, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        k.grad += np.einsum("bchwuv,bfhw->fcuv", windows, g, optimize=True)
        gx = np.zeros_like(xp)
        hh, ww = g.shape[2], g.shape[3]
        for u in range(kh):
            for v in range(kw):
                gx[:, :, u : u + hh, v : v + ww] += np.einsum(
                    "bfhw,fc->bchw", g, kv[:, :, u, v], optimize=True
                )
        if padding == "same":
            gx = gx[:, :, kh // 2 : kh // 2 + xv.shape[2], kw // 2 : kw // 2 + xv.shape[3]]
        x.grad += gx

    return Tensor(val, (x, k), bwd)


# ---------------------------------------------------------------------------
# Backward pass.
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` (a scalar) into every reachable node."""
    if loss.value.size != 1:
        raise RankError(f"loss must be scalar, got shape {loss.value.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in topo:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node.bwd is not None:
            node.bwd(node.grad)


# ---------------------------------------------------------------------------
# Optimizers.
# ---------------------------------------------------------------------------

def _check_finite(p: Tensor):
    if p.grad is not None and not np.all(np.isfinite(p.grad)):
        raise NonFiniteGradientError(f"non-finite gradient on parameter {p.name!r}")


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class Sgd:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            _check_finite(p)
            p.value -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            _check_finite(p)
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mhat = self.m[i] / (1 - self.beta1 ** self.t)
            vhat = self.v[i] / (1 - self.beta2 ** self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoints: versioned plain-text parameter listing.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "equipomdp-params 1"


def save_checkpoint(path, named_params: dict[str, np.ndarray]) -> None:
    with open(path, "w") as f:
        f.write(CHECKPOINT_MAGIC + "\n")
        for name, value in named_params.items():
            value = np.asarray(value, dtype=np.float64)
            dims = " ".join(str(d) for d in value.shape)
            f.write(f"param {name} {value.ndim} {dims}".rstrip() + "\n")
            f.write(" ".join("%.17g" % v for v in value.reshape(-1)) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != CHECKPOINT_MAGIC:
            raise AutodiffError(f"not a checkpoint file (header {header!r})")
        out: dict[str, np.ndarray] = {}
        while True:
            line = f.readline()
            if not line:
                break
            fields = line.split()
            if fields[0] != "param":
                raise AutodiffError(f"malformed checkpoint line: {line!r}")
            name, ndim = fields[1], int(fields[2])
            shape = tuple(int(d) for d in fields[3 : 3 + ndim])
            row = f.readline().split()
            values = np.array(row, dtype=np.float64) if row else np.zeros(0)
            out[name] = values.reshape(shape)
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.
# ---------------------------------------------------------------------------

def finite_difference_grad(build_loss, param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``build_loss()`` w.r.t. one parameter."""
    grad = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = float(build_loss().value)
        flat[i] = keep - eps
        lo = float(build_loss().value)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def gradcheck(build_loss, params, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences."""
    loss = build_loss()
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        g_fd = finite_difference_grad(build_loss, p, eps)
        if g_ad is None:
            g_ad = np.zeros_like(g_fd)
        err = float(np.max(np.abs(g_ad - g_fd))) if g_fd.size else 0.0
        ref = max(1.0, float(np.max(np.abs(g_fd))) if g_fd.size else 0.0)
        worst = max(worst, err / ref)
    return worst


def primitive_gradcheck_battery(seed: int = 0) -> dict[str, float]:
    """Finite-difference check of every primitive; returns per-primitive errors."""
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(3, 4))
    v4 = rng.normal(size=4)
    v3 = rng.normal(size=3)
    img = rng.normal(size=(2, 3, 5, 5))
    ker = rng.normal(size=(4, 3, 3, 3))
    idx = np.array([2, 0, 3])
    flat_idx = rng.integers(0, 12, size=20)
    cases = {
        "add": (lambda p: tsum(add(p, Tensor(v4))), (3, 4)),
        "scale": (lambda p: tsum(scale(p, -2.5)), (3, 4)),
        "hadamard": (lambda p: tsum(hadamard(p, Tensor(np.abs(v4) + 0.5))), (3, 4)),
        "matmul": (lambda p: tsum(matmul(p, Tensor(m))), (2, 3)),
        "matmul_vec": (lambda p: tsum(matmul(p, Tensor(v4))), (3, 4)),
        "sigmoid": (lambda p: tsum(sigmoid(p)), (3, 4)),
        "tanh": (lambda p: tsum(tanh(p)), (3, 4)),
        "relu": (lambda p: tsum(relu(p)), (3, 4)),
        "exp": (lambda p: tsum(exp(p)), (3, 4)),
        "log_softmax": (lambda p: tsum(hadamard(log_softmax(p), Tensor(m))), (3, 4)),
        "gather_rows": (lambda p: tsum(gather_rows(p, idx)), (3, 4)),
        "take": (lambda p: tsum(take(p, flat_idx)), (3, 4)),
        "concat": (lambda p: tsum(concat([p, tanh(p)], axis=-1)), (3, 4)),
        "slice_last": (lambda p: tsum(slice_last(p, 1, 3)), (3, 4)),
        "reshape": (lambda p: tsum(tanh(reshape(p, (2, 6)))), (3, 4)),
        "transpose": (lambda p: tsum(matmul(transpose(p, (1, 0)), Tensor(v3))), (3, 4)),
        "sum": (lambda p: tsum(tanh(p)), (3, 4)),
        "sum_axis": (lambda p: tsum(tanh(sum_axis(p, -1))), (3, 4)),
        "mean": (lambda p: mean(tanh(p)), (3, 4)),
        "conv2d": (lambda p: tsum(conv2d(p, Tensor(ker), "same")), (2, 3, 5, 5)),
        "conv2d_kernel": (lambda p: tsum(conv2d(Tensor(img), p, "valid")), (4, 3, 3, 3)),
    }
    out = {}
    for name, (build, shape) in cases.items():
        # offsets keep relu inputs away from the kink
        p = parameter(rng.normal(size=shape) * 0.5 + 0.3, "p")
        out[name] = gradcheck(lambda: build(p), [p])
    return out
