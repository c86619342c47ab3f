"""Dense tensors with reverse-mode automatic differentiation.

Every layer the networks need (conv2d, avgpool2d, elu, tempered softmax,
dense) lives here together with the small set of elementwise and
reduction ops the losses are composed from.  Arrays are plain numpy;
gradients are accumulated in ``Tensor.grad`` by :func:`backward`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

# kernels at least this wide (stride 1 along width) are correlated in the
# frequency domain
FFT_MIN_KERNEL_WIDTH = 32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An n-d array with an optional gradient slot and graph links.

    Model code mostly uses 4-axis tensors laid out as (batch, maps, height,
    width); heads and losses work on (batch, classes) matrices.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "attrs", "_backward", "name")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self.attrs: dict = {}
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar used by the losses
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _pair_operands(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the tensor operand's dtype (no float32 -> float64 upcast)
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn, **attrs) -> Tensor:
    out = Tensor(data)
    out.op = op
    out.attrs = attrs
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph + backward


@dataclass
class GraphNode:
    op: str
    parents: tuple[int, ...]
    attrs: dict
    tensor: Tensor


@dataclass
class ComputeGraph:
    """Topologically ordered view of everything an output depends on."""

    nodes: list[GraphNode] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        index: dict[int, int] = {}
        # iterative post-order DFS, parents visited in argument order
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        seen: set[int] = set()
        while stack:
            t, expanded = stack.pop()
            if expanded:
                index[id(t)] = len(order)
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in reversed(t.parents):
                if id(p) not in seen:
                    stack.append((p, False))
        nodes = [
            GraphNode(t.op, tuple(index[id(p)] for p in t.parents), t.attrs, t) for t in order
        ]
        return cls(nodes)

    @property
    def output(self) -> Tensor:
        return self.nodes[-1].tensor

    def is_topological(self) -> bool:
        return all(p < i for i, n in enumerate(self.nodes) for p in n.parents)


def backward(output: Tensor) -> ComputeGraph:
    """Accumulate d(output)/d(node) into ``grad`` for every node in the graph."""
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    graph = ComputeGraph.from_output(output)
    for node in graph.nodes:
        if node.tensor.op != "leaf":
            node.tensor.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(graph.nodes):
        t = node.tensor
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    return graph


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _pair_operands(a, b)

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", _bw)


def sub(a, b) -> Tensor:
    a, b = _pair_operands(a, b)

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", _bw)


def mul(a, b) -> Tensor:
    a, b = _pair_operands(a, b)

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", _bw)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; zero gradient where the floor binds."""
    x = as_tensor(x)
    clipped = np.maximum(x.data, floor) if floor > 0 else x.data

    def _bw(g):
        active = x.data > floor if floor > 0 else np.ones(x.shape, dtype=bool)
        _accumulate(x, np.where(active, g / clipped, 0.0))

    with np.errstate(divide="ignore"):
        out = np.log(clipped)
    return _make(out, (x,), "log", _bw, floor=floor)


def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)

    def _bw(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(np.sum(x.data, axis=axis), (x,), "sum", _bw, axis=axis)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)

    def _bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", _bw, shape=tuple(shape))


def take(x: Tensor, index) -> Tensor:
    """Basic/advanced indexing with scatter-add backward."""
    x = as_tensor(x)

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full)

    return _make(x.data[index], (x,), "take", _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", _bw, axis=axis)


# ---------------------------------------------------------------------------
# network layers


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, alpha * np.expm1(np.minimum(x.data, 0)))

    def _bw(g):
        _accumulate(x, g * np.where(pos, 1.0, out + alpha))

    return _make(out.astype(x.dtype, copy=False), (x,), "elu", _bw, alpha=alpha)


def tempered_softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """softmax(z / temperature) along the last axis, max-subtracted."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = as_tensor(logits)
    z = logits.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(logits, p * (g - inner) / temperature)

    return _make(p, (logits,), "tempered_softmax", _bw, temperature=temperature)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b``; x is (n,) or (batch, n), W is (m, n)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"dense: input {x.shape} does not match weights {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"dense: bias {bias.shape} does not match weights {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            _accumulate(weight, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, parents, "dense", _bw)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def conv_output_shape(in_shape, kernel_shape, stride=(1, 1), padding=(0, 0)) -> tuple[int, int, int, int]:
    b, _, h, w = in_shape
    o, _, kh, kw = kernel_shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    return (b, o, (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=(1, 1), padding=(0, 0),
           method: str = "auto") -> Tensor:
    """2-d cross-correlation (no kernel flip) with zero padding.

    ``method`` picks the kernel: ``"direct"`` (im2col + matmul), ``"fft"``
    (frequency-domain along width, stride 1 along width only) or ``"auto"``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    _, _, h, w = x.shape
    o, _, kh, kw = kernel.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if method == "auto":
        method = "fft" if (sw == 1 and kw >= FFT_MIN_KERNEL_WIDTH) else "direct"
    if method == "fft" and sw != 1:
        raise ValueError("conv2d: fft method needs unit stride along width")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    if method == "direct":
        out, grads = _conv_direct(xp, kernel.data, sh, sw)
    elif method == "fft":
        out, grads = _conv_fft(xp, kernel.data, sh)
    else:
        raise ValueError(f"conv2d: unknown method {method!r}")
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _bw(g):
        g = np.ascontiguousarray(g)
        dxp, dk = grads(g, x.requires_grad, kernel.requires_grad)
        if dxp is not None:
            _accumulate(x, dxp[:, :, ph:ph + h, pw:pw + w])
        if dk is not None:
            _accumulate(kernel, dk)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return _make(out, parents, "conv2d", _bw, stride=(sh, sw), padding=(ph, pw), method=method)


def _conv_direct(xp: np.ndarray, k: np.ndarray, sh: int, sw: int):
    b, c, hp, wp = xp.shape
    o, _, kh, kw = k.shape
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    kmat = k.reshape(o, -1)
    out = (cols @ kmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def grads(g, need_x, need_k):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dk = (gm.T @ cols).reshape(k.shape) if need_k else None
        dxp = None
        if need_x and sh == sw == 1:
            # full correlation of the output gradient with the flipped, transposed kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            kflip = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dxp, _ = _conv_direct(gp, kflip, 1, 1)
        elif need_x:
            dcols = (gm @ kmat).reshape(b, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[..., i, j].transpose(0, 3, 1, 2)
        return dxp, dk

    return out, grads


def _conv_fft(xp: np.ndarray, k: np.ndarray, sh: int):
    b, c, hp, wp = xp.shape
    o, _, kh, kw = k.shape
    ho, wo = (hp - kh) // sh + 1, wp - kw + 1
    n = sfft.next_fast_len(wp, real=True)
    xf = sfft.rfft(xp, n, axis=3)  # (b, c, hp, f)
    nf = xf.shape[3]
    # rows feeding output row h are h*sh + i, i < kh
    xw = sliding_window_view(xf, kh, axis=2)[:, :, ::sh][:, :, :ho]  # (b, c, ho, f, kh)
    a = np.ascontiguousarray(xw.transpose(3, 0, 2, 1, 4)).reshape(nf, b * ho, c * kh)
    kf = sfft.rfft(k, n, axis=3)  # (o, c, kh, f)
    km = np.ascontiguousarray(kf.transpose(3, 1, 2, 0)).reshape(nf, c * kh, o)
    of = (a @ km.conj()).reshape(nf, b, ho, o)
    out = sfft.irfft(np.ascontiguousarray(of.transpose(1, 3, 2, 0)), n, axis=3)[..., :wo]
    out = np.ascontiguousarray(out)

    def grads(g, need_x, need_k):
        gf = sfft.rfft(g, n, axis=3)  # (b, o, ho, f)
        gm = np.ascontiguousarray(gf.transpose(3, 0, 2, 1)).reshape(nf, b * ho, o)
        dk = dxp = None
        if need_k:
            dkf = (a.transpose(0, 2, 1) @ gm.conj()).reshape(nf, c, kh, o)
            dk = sfft.irfft(np.ascontiguousarray(dkf.transpose(3, 1, 2, 0)), n, axis=3)[..., :kw]
            dk = np.ascontiguousarray(dk)
        if need_x:
            kfm = np.ascontiguousarray(kf.transpose(3, 0, 1, 2)).reshape(nf, o, c * kh)
            dxw = (gm @ kfm).reshape(nf, b, ho, c, kh)
            dxf = np.zeros((b, c, hp, nf), dtype=xf.dtype)
            for i in range(kh):
                dxf[:, :, i:i + sh * ho:sh] += dxw[..., i].transpose(1, 3, 2, 0)
            dxp = sfft.irfft(dxf, n, axis=3)[..., :wp]
        return dxp, dk

    return out, grads


def avgpool2d(x: Tensor, window=(1, 3), stride=None) -> Tensor:
    """Mean pooling without padding; trailing cells that do not fill a window are dropped."""
    x = as_tensor(x)
    wh, ww = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    if x.data.ndim != 4:
        raise ValueError(f"avgpool2d expects a 4-axis tensor, got {x.shape}")
    b, c, h, w = x.shape
    if wh > h or ww > w:
        raise ValueError(f"avgpool2d: window {(wh, ww)} larger than input {x.shape}")
    ho, wo = (h - wh) // sh + 1, (w - ww) // sw + 1
    if (wh, ww) == (sh, sw) and h == ho * wh:
        # non-overlapping tiles: a reshape is much faster than a window view
        out = x.data[..., :wo * ww].reshape(b, c, ho, wh, wo, ww).mean(axis=(3, 5))
    else:
        win = sliding_window_view(x.data, (wh, ww), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        out = win.mean(axis=(-2, -1))
    scale = 1.0 / (wh * ww)

    def _bw(g):
        dx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(wh):
            for j in range(ww):
                dx[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gs
        _accumulate(x, dx)

    return _make(np.ascontiguousarray(out), (x,), "avgpool2d", _bw, window=(wh, ww), stride=(sh, sw))


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` maps Tensors to a scalar Tensor.  The error per entry is
    ``|g_ad - g_fd| / max(1, |g_fd|)``.  With ``max_entries`` only a random
    subset of each input's entries is probed.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(fn(*tensors))
    worst = 0.0
    for idx, (arr, t) in enumerate(zip(arrays, tensors)):
        ad = t.grad if t.grad is not None else np.zeros_like(arr)
        flat = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat = (rng or np.random.default_rng(0)).choice(arr.size, max_entries, replace=False)
        for f in flat:
            pos = np.unravel_index(f, arr.shape)
            orig = arr[pos]

            def _eval(v):
                arr[pos] = v
                with no_grad():
                    return float(fn(*[Tensor(a) for a in arrays]).data)

            fd = (_eval(orig + eps) - _eval(orig - eps)) / (2 * eps)
            arr[pos] = orig
            worst = max(worst, abs(ad[pos] - fd) / max(1.0, abs(fd)))
    return worst
