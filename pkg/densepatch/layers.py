import enum

import attr
import numpy

from densepatch.autodiff import OpKind, Tape, register_backward
from densepatch.errors import ShapeError
import densepatch.tensor
from densepatch.tensor import ConvSpec

# Building blocks of the composite function H: BatchNorm -> ReLU -> Conv.
#
# Every layer comes twice: a tape-recording version taking (tape, node, ...)
# that models are assembled from, and a *_forward version over plain tensors.

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

class Mode(enum.Enum):
    TRAIN = 'train'
    EVAL = 'eval'

def _join(prefix, part):
    return '{}.{}'.format(prefix, part) if prefix else part

@attr.s(eq=False)
class BnState:
    gamma = attr.ib()
    beta = attr.ib()
    running_mean = attr.ib()
    running_var = attr.ib()
    momentum = attr.ib(default=BN_MOMENTUM)
    epsilon = attr.ib(default=BN_EPSILON)
    prefix = attr.ib(default='bn')

    @momentum.validator
    def _check_momentum(self, attribute, value):
        if not 0 < value <= 1:
            raise ValueError('batchnorm momentum must be in (0, 1]: {}'.format(value))

    @epsilon.validator
    def _check_epsilon(self, attribute, value):
        if value <= 0:
            raise ValueError('batchnorm epsilon must be positive: {}'.format(value))

    def __attrs_post_init__(self):
        shapes = {t.shape for t in [self.gamma, self.beta, self.running_mean, self.running_var]}
        if len(shapes) != 1 or len(self.gamma.shape) != 1:
            raise ShapeError('batchnorm tensors must all be [C], got {}'.format(sorted(shapes)))

    @property
    def channels(self):
        return self.gamma.shape[0]

    def name(self, part):
        return _join(self.prefix, part)

    def tensors(self):
        return [
            (self.name('gamma'), self.gamma),
            (self.name('beta'), self.beta),
            (self.name('running_mean'), self.running_mean),
            (self.name('running_var'), self.running_var),
        ]

    @classmethod
    def fresh(cls, channels, prefix='bn', **kwargs):
        return cls(
            gamma=densepatch.tensor.tensor_new([channels], 1.0),
            beta=densepatch.tensor.tensor_new([channels], 0.0),
            running_mean=densepatch.tensor.tensor_new([channels], 0.0),
            running_var=densepatch.tensor.tensor_new([channels], 1.0),
            prefix=prefix,
            **kwargs
        )

@attr.s(eq=False)
class HParams:
    bn = attr.ib()
    conv_weight = attr.ib()
    conv_bias = attr.ib()
    prefix = attr.ib(default='')

    def __attrs_post_init__(self):
        w = self.conv_weight
        if len(w.shape) != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 != 1:
            raise ShapeError('conv weight must be k x Cin x s x s with odd s, got {}'.format(list(w.shape)))
        if w.shape[1] != self.bn.channels:
            raise ShapeError('conv expects {} input channels but batchnorm has {}'.format(w.shape[1], self.bn.channels))
        if self.conv_bias.shape != (w.shape[0],):
            raise ShapeError('conv bias {} does not match {} outputs'.format(list(self.conv_bias.shape), w.shape[0]))

    @property
    def in_channels(self):
        return self.conv_weight.shape[1]

    @property
    def out_channels(self):
        return self.conv_weight.shape[0]

    @property
    def conv_spec(self):
        size = self.conv_weight.shape[2]
        # odd kernels with "same" padding keep the spatial extent
        return ConvSpec(kernel_h=size, kernel_w=size, stride=1, padding=size // 2)

    def name(self, part):
        return _join(self.prefix, part)

    def tensors(self):
        return self.bn.tensors() + [
            (self.name('conv.weight'), self.conv_weight),
            (self.name('conv.bias'), self.conv_bias),
        ]

def batchnorm(tape, x, state, mode):
    mode = Mode(mode)
    value = tape.value(x).data
    if value.ndim != 4 or value.shape[1] != state.channels:
        raise ShapeError('batchnorm over {} channels got input {}'.format(state.channels, list(value.shape)))
    gamma = tape.param(state.name('gamma'), state.gamma)
    beta = tape.param(state.name('beta'), state.beta)
    c = state.channels
    if mode == Mode.TRAIN:
        mean, var = densepatch.tensor._channel_moments(value)
        state.running_mean.data[...] = (1 - state.momentum) * state.running_mean.data + state.momentum * mean
        state.running_var.data[...] = (1 - state.momentum) * state.running_var.data + state.momentum * var
    else:
        n, _, h, w = value.shape
        if n * h * w == 0:
            raise ShapeError('batchnorm over an empty batch')
        mean = state.running_mean.data
        var = state.running_var.data
    inv_std = (1.0 / numpy.sqrt(var + state.epsilon)).astype(value.dtype)
    xhat = (value - mean.reshape(1, c, 1, 1).astype(value.dtype)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * state.gamma.data.reshape(1, c, 1, 1) + state.beta.data.reshape(1, c, 1, 1)
    return tape.record(OpKind.BATCHNORM, (x, gamma, beta), out, saved=dict(xhat=xhat, inv_std=inv_std, mode=mode))

@register_backward(OpKind.BATCHNORM)
def _batchnorm_backward(node, grad, tape):
    xhat = node.saved['xhat']
    inv_std = node.saved['inv_std']
    gamma = tape.value(node.input_ids[1]).data
    c = gamma.shape[0]
    dgamma = (grad * xhat).sum(axis=(0, 2, 3))
    dbeta = grad.sum(axis=(0, 2, 3))
    dxhat = grad * gamma.reshape(1, c, 1, 1)
    if node.saved['mode'] == Mode.TRAIN:
        # batch statistics depend on x, so their terms enter the Jacobian
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        dx = (inv_std.reshape(1, c, 1, 1) / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        )
    else:
        dx = dxhat * inv_std.reshape(1, c, 1, 1)
    return [dx, dgamma, dbeta]

def relu(tape, x):
    value = tape.value(x).data
    mask = value > 0
    return tape.record(OpKind.RELU, (x,), numpy.where(mask, value, 0).astype(value.dtype), saved=dict(mask=mask))

@register_backward(OpKind.RELU)
def _relu_backward(node, grad, tape):
    # subgradient at exactly 0 is 0
    return [grad * node.saved['mask']]

def conv(tape, x, weight, bias, spec):
    w = tape.value(weight).data
    b = tape.value(bias).data
    out, cols = densepatch.tensor._conv2d(tape.value(x).data, w, b, spec)
    densepatch.tensor.check_finite(out, 'conv2d')
    return tape.record(OpKind.CONV2D, (x, weight, bias), out, saved=dict(cols=cols, spec=spec))

@register_backward(OpKind.CONV2D)
def _conv_backward(node, grad, tape):
    x_shape = tape.value(node.input_ids[0]).shape
    w = tape.value(node.input_ids[1]).data
    cout = w.shape[0]
    gmat = grad.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = densepatch.tensor._matmul(gmat.T, node.saved['cols']).reshape(w.shape)
    db = gmat.sum(axis=0)
    dcols = densepatch.tensor._matmul(gmat, w.reshape(cout, -1))
    dx = densepatch.tensor.col2im(dcols, x_shape, node.saved['spec'])
    return [dx, dw, db]

def composite_h(tape, x, p, mode):
    cin = tape.value(x).shape[1]
    if cin != p.in_channels:
        raise ShapeError('layer {} expects {} input channels, got {}'.format(p.prefix or '<anonymous>', p.in_channels, cin))
    y = batchnorm(tape, x, p.bn, mode)
    y = relu(tape, y)
    weight = tape.param(p.name('conv.weight'), p.conv_weight)
    bias = tape.param(p.name('conv.bias'), p.conv_bias)
    return conv(tape, y, weight, bias, p.conv_spec)

def _pool_windows(value):
    n, c, h, w = value.shape
    if h < 2 or w < 2:
        raise ShapeError('2x2 pooling needs H, W >= 2, got {}x{}'.format(h, w))
    oh, ow = h // 2, w // 2
    return value[:, :, :2 * oh, :2 * ow].reshape(n, c, oh, 2, ow, 2)

def avgpool2(tape, x):
    value = tape.value(x).data
    out = _pool_windows(value).mean(axis=(3, 5))
    return tape.record(OpKind.AVGPOOL2, (x,), out)

@register_backward(OpKind.AVGPOOL2)
def _avgpool2_backward(node, grad, tape):
    n, c, h, w = tape.value(node.input_ids[0]).shape
    oh, ow = grad.shape[2], grad.shape[3]
    dx = numpy.zeros((n, c, h, w), dtype=grad.dtype)
    spread = numpy.broadcast_to((grad / 4).reshape(n, c, oh, 1, ow, 1), (n, c, oh, 2, ow, 2))
    dx[:, :, :2 * oh, :2 * ow] = spread.reshape(n, c, 2 * oh, 2 * ow)
    return [dx]

def maxpool2(tape, x):
    value = tape.value(x).data
    windows = _pool_windows(value)
    n, c, oh, _, ow, _ = windows.shape
    flat = windows.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    # ties go to the first position in the window
    choice = flat.argmax(axis=-1)
    out = numpy.take_along_axis(flat, choice[..., None], axis=-1)[..., 0]
    return tape.record(OpKind.MAXPOOL2, (x,), out, saved=dict(choice=choice))

@register_backward(OpKind.MAXPOOL2)
def _maxpool2_backward(node, grad, tape):
    n, c, h, w = tape.value(node.input_ids[0]).shape
    oh, ow = grad.shape[2], grad.shape[3]
    onehot = numpy.zeros((n, c, oh, ow, 4), dtype=grad.dtype)
    numpy.put_along_axis(onehot, node.saved['choice'][..., None], grad[..., None], axis=-1)
    dx = numpy.zeros((n, c, h, w), dtype=grad.dtype)
    dx[:, :, :2 * oh, :2 * ow] = onehot.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)
    return [dx]

def global_avgpool(tape, x):
    value = tape.value(x).data
    if value.ndim != 4:
        raise ShapeError('global pooling needs N x C x H x W, got {}'.format(list(value.shape)))
    return tape.record(OpKind.GLOBAL_AVGPOOL, (x,), value.mean(axis=(2, 3)))

@register_backward(OpKind.GLOBAL_AVGPOOL)
def _global_avgpool_backward(node, grad, tape):
    n, c, h, w = tape.value(node.input_ids[0]).shape
    return [numpy.broadcast_to((grad / (h * w)).reshape(n, c, 1, 1), (n, c, h, w)).copy()]

def linear(tape, x, weight, bias):
    xv = tape.value(x).data
    wv = tape.value(weight).data
    bv = tape.value(bias).data
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError('linear expects N x F input for a {} weight, got {}'.format(list(wv.shape), list(xv.shape)))
    if bv.shape != (wv.shape[1],):
        raise ShapeError('linear bias {} does not match {} outputs'.format(list(bv.shape), wv.shape[1]))
    out = densepatch.tensor._matmul(xv, wv) + bv
    densepatch.tensor.check_finite(out, 'linear')
    return tape.record(OpKind.LINEAR, (x, weight, bias), out)

@register_backward(OpKind.LINEAR)
def _linear_backward(node, grad, tape):
    xv = tape.value(node.input_ids[0]).data
    wv = tape.value(node.input_ids[1]).data
    return [densepatch.tensor._matmul(grad, wv.T), densepatch.tensor._matmul(xv.T, grad), grad.sum(axis=0)]

def _run(build, x, *args):
    tape = Tape()
    out = build(tape, tape.constant(x), *args)
    return tape.value(out)

def batchnorm_forward(x, state, mode):
    return _run(batchnorm, x, state, mode)

def relu_forward(x):
    return _run(relu, x)

def composite_h_forward(x, p, mode):
    return _run(composite_h, x, p, mode)

def avgpool2_forward(x):
    return _run(avgpool2, x)

def maxpool2_forward(x):
    return _run(maxpool2, x)

def linear_forward(x, w, b):
    def build(tape, xs):
        return linear(tape, xs, tape.constant(w), tape.constant(b))
    return _run(build, x)
