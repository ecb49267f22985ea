"""Neural network building blocks.

Dense layers operate on single-sample channels-first maps (C,H,W) or row
matrices (N,F); sparse layers operate on :class:`SparseTensor`. Batching
is done one graph per sample upstream, so batch-norm statistics are taken
over the spatial/row extent of the sample in training mode and over
running averages in eval mode.

Sparse convolutions come in two modes:

* submanifold: output coordinates equal input coordinates; a tap only
  contributes where its shifted coordinate is active.
* strided (stride 2, kernel 3): output coordinates are the unique
  floor-halved input coordinates on a ceil-halved lattice.

Both accumulate kernel taps in ascending x-major tap order, and each tap's
gather/scatter indices are one-to-one, so results do not depend on worker
count or input permutation.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .autodiff import _node  # custom-op hook shared within the package
from .sparse import SparseTensor, linearize

__all__ = [
    "Module", "ModuleList", "Linear", "BatchNorm1d", "BatchNorm2d",
    "Conv2d", "ConvBlock2d", "SubMConv3d", "SparseDownConv3d",
    "AsymResidualBlock", "AsymDownBlock", "AsymUpBlock", "DDCMBlock",
    "sparse_conv3d",
]


class Module:
    """Minimal layer base: tracks parameters, buffers and submodules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array: np.ndarray) -> None:
        """Non-trainable state (e.g. running statistics), mutated in place."""
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_training(self, flag: bool) -> None:
        object.__setattr__(self, "training", bool(flag))
        for child in self._children.values():
            child.set_training(flag)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._list = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._list))] = module
        self._list.append(module)

    def __iter__(self):
        return iter(self._list)

    def __getitem__(self, i):
        return self._list[i]

    def __len__(self):
        return len(self._list)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Tensor(_uniform(rng, (in_features, out_features), in_features),
                             requires_grad=True)
        self.bias = Tensor(_uniform(rng, (out_features,), in_features),
                           requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class BatchNorm1d(Module):
    """Normalisation over the row axis of (N, C) activations."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features))
        self.register_buffer("running_var", np.ones(num_features))

    def __call__(self, x: Tensor) -> Tensor:
        n = x.data.shape[0]
        if self.training and n >= 2:
            m = ad.tmean(x, axis=0)
            xc = x - m
            var = ad.tmean(ad.mul(xc, xc), axis=0)
            mom = self.momentum
            self.running_mean *= 1.0 - mom
            self.running_mean += mom * m.data
            self.running_var *= 1.0 - mom
            self.running_var += mom * var.data * (n / (n - 1.0))
            inv = ad.pow_const(var + Tensor(np.full_like(var.data, self.eps)), -0.5)
            y = ad.mul(xc, inv)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            y = ad.mul(x - Tensor(self.running_mean), Tensor(inv))
        return ad.mul(y, self.gamma) + self.beta


class BatchNorm2d(Module):
    """Per-channel normalisation of a (C, H, W) map over its spatial extent."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones((num_features, 1, 1)), requires_grad=True)
        self.beta = Tensor(np.zeros((num_features, 1, 1)), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features))
        self.register_buffer("running_var", np.ones(num_features))

    def __call__(self, x: Tensor) -> Tensor:
        n = x.data.shape[1] * x.data.shape[2]
        if self.training and n >= 2:
            m = ad.tmean(x, axis=(1, 2), keepdims=True)
            xc = x - m
            var = ad.tmean(ad.mul(xc, xc), axis=(1, 2), keepdims=True)
            mom = self.momentum
            self.running_mean *= 1.0 - mom
            self.running_mean += mom * m.data.reshape(-1)
            self.running_var *= 1.0 - mom
            self.running_var += mom * var.data.reshape(-1) * (n / (n - 1.0))
            inv = ad.pow_const(var + Tensor(np.full_like(var.data, self.eps)), -0.5)
            y = ad.mul(xc, inv)
        else:
            inv = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(-1, 1, 1)
            y = ad.mul(x - Tensor(self.running_mean.reshape(-1, 1, 1)), Tensor(inv))
        return ad.mul(y, self.gamma) + self.beta


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding=None, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in),
                             requires_grad=True)
        self.bias = Tensor(_uniform(rng, (out_ch, 1, 1), fan_in),
                           requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = y + self.bias
        return y

    def kernel_weight_count(self) -> int:
        return self.weight.size


class ConvBlock2d(Module):
    """Conv -> batch-norm -> relu."""

    def __init__(self, in_ch: int, out_ch: int, rng, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, stride=stride, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(self.bn(self.conv(x)))


# ---------------------------------------------------------------------------
# sparse 3-D convolution
# ---------------------------------------------------------------------------

def _tap_offsets(kernel) -> np.ndarray:
    """Kernel tap offsets in ascending x-major order, centred per axis."""
    kx, ky, kz = kernel
    taps = np.array(list(itertools.product(range(kx), range(ky), range(kz))),
                    dtype=np.int64)
    return taps - np.array([(kx - 1) // 2, (ky - 1) // 2, (kz - 1) // 2])


def _submanifold_pairs(st: SparseTensor, kernel):
    key = ("subm", tuple(kernel))
    cached = st.pair_cache.get(key)
    if cached is not None:
        return cached
    pairs = []
    for off in _tap_offsets(kernel):
        rows = st.rows_of(st.coords + off)
        valid = np.flatnonzero(rows >= 0)
        pairs.append((valid, rows[valid]))
    st.pair_cache[key] = pairs
    return pairs


def halved_lattice(lattice_shape):
    return tuple((s + 1) // 2 for s in lattice_shape)


def _strided_out_coords(st: SparseTensor):
    """Unique floor-halved coordinates, canonical order, plus their lattice."""
    out_lattice = halved_lattice(st.lattice_shape)
    half = st.coords // 2
    lin = linearize(half, out_lattice)
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]
    keep = np.r_[True, np.diff(lin_sorted) != 0] if lin_sorted.size else \
        np.zeros(0, dtype=bool)
    return half[order][keep], out_lattice


def _strided_pairs(st: SparseTensor, kernel):
    key = ("strided", tuple(kernel))
    cached = st.pair_cache.get(key)
    if cached is not None:
        return cached
    out_coords, out_lattice = _strided_out_coords(st)
    pairs = []
    for off in _tap_offsets(kernel):
        rows = st.rows_of(out_coords * 2 + off)
        valid = np.flatnonzero(rows >= 0)
        pairs.append((valid, rows[valid]))
    st.pair_cache[key] = (out_coords, out_lattice, pairs)
    return st.pair_cache[key]


def _sparse_conv_apply(features: Tensor, weight: Tensor, bias, pairs,
                       n_out: int) -> Tensor:
    cout = weight.data.shape[2]
    if bias is not None:
        out = np.tile(bias.data, (n_out, 1))
    else:
        out = np.zeros((n_out, cout))
    for t, (orow, irow) in enumerate(pairs):
        if orow.size:
            out[orow] += features.data[irow] @ weight.data[t]

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        dw = np.zeros_like(weight.data) if weight.requires_grad else None
        df = np.zeros_like(features.data) if features.requires_grad else None
        for t, (orow, irow) in enumerate(pairs):
            if orow.size == 0:
                continue
            go = g[orow]
            if dw is not None:
                dw[t] = features.data[irow].T @ go
            if df is not None:
                # within one tap the input rows are distinct, so a plain
                # fancy-indexed add is collision-free
                df[irow] += go @ weight.data[t].T
        if dw is not None:
            weight._accumulate(dw)
        if df is not None:
            features._accumulate(df)

    parents = (features, weight) if bias is None else (features, weight, bias)
    return _node(out, parents, backward)


class SubMConv3d(Module):
    """Submanifold sparse convolution: active set is preserved exactly."""

    def __init__(self, in_ch: int, out_ch: int, kernel, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        if any(k % 2 == 0 for k in kernel):
            raise ValueError(f"submanifold kernel must be odd, got {kernel}")
        self.kernel = kernel
        taps = kernel[0] * kernel[1] * kernel[2]
        fan_in = in_ch * taps
        self.weight = Tensor(_uniform(rng, (taps, in_ch, out_ch), fan_in),
                             requires_grad=True)
        self.bias = Tensor(_uniform(rng, (out_ch,), fan_in),
                           requires_grad=True) if bias else None
        self.in_ch = in_ch

    def __call__(self, st: SparseTensor) -> SparseTensor:
        if st.feature_dim != self.in_ch:
            raise ValueError(
                f"channel mismatch: tensor has {st.feature_dim}, layer expects {self.in_ch}")
        pairs = _submanifold_pairs(st, self.kernel)
        feats = _sparse_conv_apply(st.features, self.weight, self.bias, pairs,
                                   st.n_active)
        return st.with_features(feats)

    def kernel_weight_count(self) -> int:
        return self.weight.size


class SparseDownConv3d(Module):
    """Stride-2 kernel-3 sparse convolution onto the floor-halved lattice."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.kernel = (3, 3, 3)
        fan_in = in_ch * 27
        self.weight = Tensor(_uniform(rng, (27, in_ch, out_ch), fan_in),
                             requires_grad=True)
        self.bias = Tensor(_uniform(rng, (out_ch,), fan_in),
                           requires_grad=True) if bias else None
        self.in_ch = in_ch

    def __call__(self, st: SparseTensor) -> SparseTensor:
        if st.feature_dim != self.in_ch:
            raise ValueError(
                f"channel mismatch: tensor has {st.feature_dim}, layer expects {self.in_ch}")
        out_coords, out_lattice, pairs = _strided_pairs(st, self.kernel)
        feats = _sparse_conv_apply(st.features, self.weight, self.bias, pairs,
                                   out_coords.shape[0])
        return SparseTensor(out_coords, feats, out_lattice)


def sparse_conv3d(st: SparseTensor, weight: Tensor, bias, kernel,
                  mode: str = "submanifold") -> SparseTensor:
    """Functional sparse convolution; `weight` is (taps, in_ch, out_ch)
    with taps in ascending x-major offset order."""
    kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
    if weight.data.shape[1] != st.feature_dim:
        raise ValueError(
            f"channel mismatch: tensor has {st.feature_dim}, "
            f"kernel expects {weight.data.shape[1]}")
    if mode == "submanifold":
        pairs = _submanifold_pairs(st, kernel)
        feats = _sparse_conv_apply(st.features, weight, bias, pairs, st.n_active)
        return st.with_features(feats)
    if mode == "strided":
        if kernel != (3, 3, 3):
            raise ValueError("strided mode supports kernel (3,3,3) only")
        out_coords, out_lattice, pairs = _strided_pairs(st, kernel)
        feats = _sparse_conv_apply(st.features, weight, bias, pairs,
                                   out_coords.shape[0])
        return SparseTensor(out_coords, feats, out_lattice)
    raise ValueError(f"unknown mode {mode!r}")


class _SubMConvBlock(Module):
    """Submanifold conv -> batch-norm -> relu on the feature rows."""

    def __init__(self, in_ch: int, out_ch: int, kernel, rng):
        super().__init__()
        self.conv = SubMConv3d(in_ch, out_ch, kernel, rng, bias=False)
        self.bn = BatchNorm1d(out_ch)

    def __call__(self, st: SparseTensor) -> SparseTensor:
        st = self.conv(st)
        return st.with_features(ad.relu(self.bn(st.features)))


class AsymResidualBlock(Module):
    """Residual unit with two mirrored factored-kernel paths.

    Each path slides a (3,1,3) and a (1,3,3) kernel (one in each order),
    covering the same 3x3x3 neighbourhood as a two-layer cubic stack with
    two thirds of the kernel weights. Input and output channel counts are
    equal so the identity skip adds directly.
    """

    def __init__(self, ch: int, rng):
        super().__init__()
        self.a1 = _SubMConvBlock(ch, ch, (3, 1, 3), rng)
        self.a2 = _SubMConvBlock(ch, ch, (1, 3, 3), rng)
        self.b1 = _SubMConvBlock(ch, ch, (1, 3, 3), rng)
        self.b2 = _SubMConvBlock(ch, ch, (3, 1, 3), rng)

    def __call__(self, st: SparseTensor) -> SparseTensor:
        pa = self.a2(self.a1(st))
        pb = self.b2(self.b1(st))
        return st.with_features(pa.features + pb.features + st.features)

    def kernel_weight_count(self) -> int:
        return sum(b.conv.kernel_weight_count()
                   for b in (self.a1, self.a2, self.b1, self.b2))


class AsymDownBlock(Module):
    """Asymmetric residual stage followed by a stride-2 downsample."""

    def __init__(self, in_ch: int, out_ch: int, rng):
        super().__init__()
        self.res = AsymResidualBlock(in_ch, rng)
        self.down = SparseDownConv3d(in_ch, out_ch, rng, bias=False)
        self.bn = BatchNorm1d(out_ch)

    def __call__(self, st: SparseTensor) -> SparseTensor:
        st = self.down(self.res(st))
        return st.with_features(ad.relu(self.bn(st.features)))


class AsymUpBlock(Module):
    """Scatter decoder features back onto the paired skip's coordinates.

    The gather map of the matching downsample is inverted exactly: each
    skip coordinate reads the row of its floor-halved parent. No new
    voxels are ever created. Combined features (projected decoder + skip)
    run through an asymmetric residual stage.
    """

    def __init__(self, in_ch: int, skip_ch: int, rng):
        super().__init__()
        self.proj = Linear(in_ch, skip_ch, rng, bias=False)
        self.bn = BatchNorm1d(skip_ch)
        self.res = AsymResidualBlock(skip_ch, rng)
        self.in_ch = in_ch

    def __call__(self, st: SparseTensor, skip: SparseTensor) -> SparseTensor:
        if halved_lattice(skip.lattice_shape) != st.lattice_shape:
            raise ValueError(
                f"level mismatch: decoder lattice {st.lattice_shape} is not the "
                f"halved skip lattice {halved_lattice(skip.lattice_shape)}")
        parent_rows = st.rows_of(skip.coords // 2)
        if np.any(parent_rows < 0):
            raise ValueError("skip has coordinates with no active parent; "
                             "not the paired encoder level")
        up = ad.take_rows(st.features, parent_rows)
        up = ad.relu(self.bn(self.proj(up)))
        combined = skip.with_features(up + skip.features)
        return self.res(combined)


class DDCMBlock(Module):
    """Per-axis context gating: x + sum_axis sigmoid(conv_axis(x)) * x."""

    def __init__(self, ch: int, rng):
        super().__init__()
        self.conv_x = SubMConv3d(ch, ch, (3, 1, 1), rng)
        self.conv_y = SubMConv3d(ch, ch, (1, 3, 1), rng)
        self.conv_z = SubMConv3d(ch, ch, (1, 1, 3), rng)

    def __call__(self, st: SparseTensor) -> SparseTensor:
        x = st.features
        out = x
        for conv in (self.conv_x, self.conv_y, self.conv_z):
            gate = ad.sigmoid(conv(st).features)
            out = out + ad.mul(gate, x)
        return st.with_features(out)
