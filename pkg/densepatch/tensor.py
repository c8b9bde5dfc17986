import concurrent.futures
import contextlib
import math

import attr
import numpy

from densepatch.errors import NumericalError, ShapeError

# Dense row-major N-d arrays and the kernels every layer is built from.
#
# Layout is fixed to row-major, and image batches are always N x C x H x W.
# Convolution is cross-correlation (no kernel flip). Kernels never modify
# their inputs and always produce a fresh, contiguous result.

PRECISIONS = {
    'single': numpy.float32,
    'double': numpy.float64,
}

_default_dtype = numpy.float32
_num_threads = 1

# tile edge for the blocked matmul
MATMUL_BLOCK = 128

def default_dtype():
    return _default_dtype

def set_default_dtype(precision):
    global _default_dtype
    try:
        _default_dtype = PRECISIONS[precision]
    except KeyError:
        raise ValueError('unknown precision: {}'.format(precision))

@contextlib.contextmanager
def precision(name):
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = saved

def num_threads():
    return _num_threads

def set_num_threads(n):
    global _num_threads
    if n < 1:
        raise ValueError('thread count must be positive: {}'.format(n))
    _num_threads = int(n)

def _as_array(value):
    arr = numpy.ascontiguousarray(value)
    if arr.dtype not in PRECISIONS.values():
        arr = arr.astype(_default_dtype)
    return arr

@attr.s(eq=False, repr=False)
class Tensor:
    data = attr.ib(converter=_as_array)

    def __repr__(self):
        return '<Tensor shape={} dtype={}>'.format(list(self.shape), self.dtype.name)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def strides(self):
        # element strides, not byte strides
        strides = []
        step = 1
        for extent in reversed(self.shape):
            strides.insert(0, step)
            step *= extent
        return tuple(strides)

    def offset(self, index):
        if len(index) != self.ndim:
            raise ShapeError('index {} has wrong rank for shape {}'.format(index, list(self.shape)))
        for i, extent in zip(index, self.shape):
            if not 0 <= i < extent:
                raise IndexError('index {} out of range for shape {}'.format(index, list(self.shape)))
        return sum(i * s for i, s in zip(index, self.strides))

    def flat(self):
        return self.data.reshape(-1)

    def copy(self):
        return Tensor(self.data.copy())

    def astype(self, precision):
        return Tensor(self.data.astype(PRECISIONS[precision]))

    def item(self):
        if self.size != 1:
            raise ShapeError('item() needs a single element, got shape {}'.format(list(self.shape)))
        return float(self.data.reshape(-1)[0])

def tensor_new(shape, fill=0.0, dtype=None):
    shape = tuple(int(e) for e in shape)
    if any(e < 0 for e in shape):
        raise ShapeError('negative extent in shape {}'.format(list(shape)))
    dtype = dtype or _default_dtype
    if numpy.isscalar(fill):
        return Tensor(numpy.full(shape, fill, dtype=dtype))
    values = numpy.asarray(fill, dtype=dtype).reshape(-1)
    if values.size != math.prod(shape):
        raise ShapeError('{} values given for shape {} ({} elements)'.format(values.size, list(shape), math.prod(shape)))
    return Tensor(values.reshape(shape))

def check_finite(arr, what):
    if not numpy.all(numpy.isfinite(arr)):
        raise NumericalError('non-finite value produced by {}'.format(what))
    return arr

def matmul_naive(a, b):
    """Reference triple loop, kept as the oracle for the blocked kernel."""
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError('inner dimensions differ: {} vs {}'.format(k, k2))
    out = numpy.zeros((m, n), dtype=numpy.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a.data[i, p]) * float(b.data[p, j])
            out[i, j] = acc
    return Tensor(out.astype(numpy.result_type(a.dtype, b.dtype)))

def _matmul_rows(a, b, out, i0, i1, block):
    k = a.shape[1]
    n = b.shape[1]
    for j0 in range(0, n, block):
        j1 = min(j0 + block, n)
        for p0 in range(0, k, block):
            p1 = min(p0 + block, k)
            out[i0:i1, j0:j1] += a[i0:i1, p0:p1] @ b[p0:p1, j0:j1]

def _matmul(a, b, block=None):
    # array-level kernel shared by the autodiff backward passes
    block = block or MATMUL_BLOCK
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError('matmul needs matrices, got {} and {}'.format(list(a.shape), list(b.shape)))
    if a.shape[1] != b.shape[0]:
        raise ShapeError('inner dimensions differ: {} vs {}'.format(list(a.shape), list(b.shape)))
    m = a.shape[0]
    out = numpy.zeros((m, b.shape[1]), dtype=numpy.result_type(a.dtype, b.dtype))
    row_blocks = [(i0, min(i0 + block, m)) for i0 in range(0, m, block)]
    if _num_threads > 1 and len(row_blocks) > 1:
        # each output block is owned by exactly one task, so the reduction
        # order per element does not depend on the thread count
        with concurrent.futures.ThreadPoolExecutor(max_workers=_num_threads) as pool:
            futures = [pool.submit(_matmul_rows, a, b, out, i0, i1, block) for i0, i1 in row_blocks]
            for f in futures:
                f.result()
    else:
        for i0, i1 in row_blocks:
            _matmul_rows(a, b, out, i0, i1, block)
    return out

def matmul(a, b, block=None):
    return Tensor(check_finite(_matmul(a.data, b.data, block), 'matmul'))

@attr.s(frozen=True)
class ConvSpec:
    kernel_h = attr.ib(default=3)
    kernel_w = attr.ib(default=3)
    stride = attr.ib(default=1)
    padding = attr.ib(default=0)

    @kernel_h.validator
    @kernel_w.validator
    @stride.validator
    def _check_positive(self, attribute, value):
        if value < 1:
            raise ShapeError('{} must be positive, got {}'.format(attribute.name, value))

    @padding.validator
    def _check_padding(self, attribute, value):
        if value < 0:
            raise ShapeError('negative padding: {}'.format(value))

    def output_extent(self, in_h, in_w):
        extents = []
        for size, kernel in [(in_h, self.kernel_h), (in_w, self.kernel_w)]:
            span = size + 2 * self.padding - kernel
            if span < 0 or span % self.stride:
                raise ShapeError('input extent {} does not tile with kernel {}, stride {}, padding {}'.format(size, kernel, self.stride, self.padding))
            extents.append(span // self.stride + 1)
        return tuple(extents)

def im2col(x, spec):
    n, c, h, w = x.shape
    oh, ow = spec.output_extent(h, w)
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    xp = numpy.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = numpy.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)

def col2im(cols, x_shape, spec):
    n, c, h, w = x_shape
    oh, ow = spec.output_extent(h, w)
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = numpy.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + s * oh:s, j:j + s * ow:s] += cols[:, :, i, j]
    return numpy.ascontiguousarray(xp[:, :, p:p + h, p:p + w])

def _check_conv_shapes(x, weight, bias):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError('conv2d needs rank-4 input and weight, got {} and {}'.format(list(x.shape), list(weight.shape)))
    if x.shape[1] != weight.shape[1]:
        raise ShapeError('input has {} channels but weight expects {}'.format(x.shape[1], weight.shape[1]))
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError('bias shape {} does not match {} output channels'.format(list(bias.shape), weight.shape[0]))

def _conv2d(x, weight, bias, spec):
    # returns the output and the im2col buffer the backward pass reuses
    _check_conv_shapes(x, weight, bias)
    n, _, h, w = x.shape
    cout = weight.shape[0]
    oh, ow = spec.output_extent(h, w)
    cols = im2col(x, spec)
    out = _matmul(cols, weight.reshape(cout, -1).T)
    if bias is not None:
        out += bias
    out = numpy.ascontiguousarray(out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))
    return out, cols

def conv2d(input, weight, bias, spec):
    out, _ = _conv2d(input.data, weight.data, None if bias is None else bias.data, spec)
    return Tensor(check_finite(out, 'conv2d'))

def conv2d_direct(input, weight, bias, spec):
    """Direct seven-loop convolution, the oracle for the im2col path."""
    x, wt = input.data, weight.data
    _check_conv_shapes(x, wt, None if bias is None else bias.data)
    n, cin, h, w = x.shape
    cout, _, kh, kw = wt.shape
    oh, ow = spec.output_extent(h, w)
    p, s = spec.padding, spec.stride
    out = numpy.zeros((n, cout, oh, ow), dtype=numpy.float64)
    for b in range(n):
        for o in range(cout):
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0 if bias is None else float(bias.data[o])
                    for c in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                yy = y * s + i - p
                                zz = z * s + j - p
                                if 0 <= yy < h and 0 <= zz < w:
                                    acc += float(x[b, c, yy, zz]) * float(wt[o, c, i, j])
                    out[b, o, y, z] = acc
    return Tensor(out.astype(x.dtype))

def sigmoid(arr):
    out = numpy.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + numpy.exp(-arr[pos]))
    e = numpy.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    return out

def _check_concat(shapes):
    if not shapes:
        raise ShapeError('concat_channels needs at least one part')
    for shape in shapes:
        if len(shape) != 4:
            raise ShapeError('concat_channels needs rank-4 parts, got {}'.format(list(shape)))
    n, _, h, w = shapes[0]
    for shape in shapes[1:]:
        if (shape[0], shape[2], shape[3]) != (n, h, w):
            raise ShapeError('cannot concatenate {} with {}: N, H, W must match'.format(list(shapes[0]), list(shape)))

def concat_channels(parts):
    _check_concat([p.shape for p in parts])
    return Tensor(numpy.concatenate([p.data for p in parts], axis=1))

def slice_channels(x, start, stop):
    if not 0 <= start <= stop <= x.shape[1]:
        raise ShapeError('channel range {}:{} outside {} channels'.format(start, stop, x.shape[1]))
    return Tensor(x.data[:, start:stop].copy())

def _channel_moments(x):
    if x.ndim != 4:
        raise ShapeError('channel_moments needs N x C x H x W, got {}'.format(list(x.shape)))
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise ShapeError('channel_moments over an empty batch')
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean.reshape(1, c, 1, 1)) ** 2).mean(axis=(0, 2, 3))
    return mean, var

def channel_moments(x):
    mean, var = _channel_moments(x.data)
    return Tensor(mean), Tensor(var)
