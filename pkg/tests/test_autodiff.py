import numpy
import numpy.testing
import pytest

from densepatch.autodiff import OpKind, Tape
from densepatch.errors import NumericalError, ShapeError, TapeError
from densepatch.layers import Mode
from densepatch.tensor import ConvSpec, Tensor
import densepatch.architectures
import densepatch.autodiff as AD
import densepatch.layers
import densepatch.trainer

@pytest.fixture
def rng():
    return numpy.random.Generator(numpy.random.PCG64(7))

def test_record_add(rng):
    tape = Tape()
    a = tape.leaf(Tensor(rng.standard_normal((2, 3))))
    b = tape.leaf(Tensor(rng.standard_normal((2, 3))))
    c = AD.add(tape, a, b)
    numpy.testing.assert_array_equal(tape.value(c).data, tape.value(a).data + tape.value(b).data)
    assert tape.node(c).op_kind == OpKind.ADD
    assert tape.node(c).input_ids == (a, b)

def test_record_concat(rng):
    tape = Tape()
    a = tape.leaf(Tensor(rng.standard_normal((1, 2, 3, 3))))
    b = tape.leaf(Tensor(rng.standard_normal((1, 3, 3, 3))))
    c = AD.concat_channels(tape, [a, b])
    assert tape.value(c).shape == (1, 5, 3, 3)

def test_record_dangling_input():
    tape = Tape()
    tape.leaf(Tensor(numpy.zeros(2)))
    with pytest.raises(TapeError):
        tape.record(OpKind.ADD, (0, 5), Tensor(numpy.zeros(2)))

def test_backward_square(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    tape = Tape()
    xs = tape.leaf(x)
    loss = AD.sum_all(tape, AD.mul(tape, xs, xs))
    grads = AD.backward(tape, loss)
    numpy.testing.assert_allclose(grads[xs].data, 2 * x.data)

def test_backward_needs_scalar(rng):
    tape = Tape()
    xs = tape.leaf(Tensor(rng.standard_normal((3,))))
    with pytest.raises(ShapeError):
        AD.backward(tape, xs)

def test_concat_backward_splits_channels(rng):
    tape = Tape()
    a = tape.leaf(Tensor(rng.standard_normal((2, 2, 3, 3))))
    b = tape.leaf(Tensor(rng.standard_normal((2, 3, 3, 3))))
    loss = AD.sum_all(tape, AD.concat_channels(tape, [a, b]))
    grads = AD.backward(tape, loss)
    numpy.testing.assert_array_equal(grads[a].data, numpy.ones((2, 2, 3, 3)))
    numpy.testing.assert_array_equal(grads[b].data, numpy.ones((2, 3, 3, 3)))

def test_fan_out_sums_paths(rng):
    x = Tensor(rng.standard_normal((4,)))
    weights = Tensor(rng.standard_normal((4,)))

    tape = Tape()
    xs = tape.leaf(x)
    twice = AD.add(tape, xs, xs)
    loss = AD.sum_all(tape, AD.mul(tape, twice, tape.constant(weights)))
    fanned = AD.backward(tape, loss)[xs].data

    tape = Tape()
    xs = tape.leaf(x)
    scaled = AD.scale(tape, xs, 2.0)
    loss = AD.sum_all(tape, AD.mul(tape, scaled, tape.constant(weights)))
    direct = AD.backward(tape, loss)[xs].data

    numpy.testing.assert_array_equal(fanned, direct)

def test_backward_leaves_forward_values(rng):
    tape = Tape()
    xs = tape.leaf(Tensor(rng.standard_normal((2, 3))))
    ys = tape.leaf(Tensor(rng.standard_normal((3, 2))))
    loss = AD.mean_all(tape, AD.matmul(tape, xs, ys))
    before = [node.output.data.copy() for node in tape.nodes]
    AD.backward(tape, loss)
    for value, node in zip(before, tape.nodes):
        numpy.testing.assert_array_equal(value, node.output.data)

def test_unreachable_gradient_is_zero(rng):
    tape = Tape()
    xs = tape.leaf(Tensor(rng.standard_normal((2,))))
    unused = tape.leaf(Tensor(rng.standard_normal((3,))))
    grads = AD.backward(tape, AD.sum_all(tape, xs))
    numpy.testing.assert_array_equal(grads[unused].data, numpy.zeros(3))

def test_param_name_is_bound_once():
    tape = Tape()
    t = Tensor(numpy.zeros(2))
    assert tape.param('w', t) == tape.param('w', t)
    with pytest.raises(TapeError):
        tape.param('w', Tensor(numpy.zeros(2)))

def test_residual_identity_path_counted_once(rng):
    p = densepatch.architectures.make_hparams(3, 3, seed=1, dtype=numpy.float64)
    p.conv_weight.data[...] = 0
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    tape = Tape()
    xs = tape.param('x', x)
    loss = AD.sum_all(tape, densepatch.architectures.residual_block(tape, xs, p, Mode.TRAIN))
    grads = AD.backward(tape, loss)
    # H contributes nothing with zero conv weights
    numpy.testing.assert_array_equal(grads.param('x').data, numpy.ones(x.shape))

def test_grad_check_quadratic():
    params = {'theta': Tensor(numpy.array([0.3, -1.2, 2.0]))}

    def fragment(tape, ids):
        return AD.sum_all(tape, AD.mul(tape, ids['theta'], ids['theta']))
    assert AD.grad_check(fragment, params) < 1e-8

def test_grad_check_conv_mean_loss(rng):
    params = {
        'input': Tensor(rng.standard_normal((1, 2, 6, 6))),
        'weight': Tensor(rng.standard_normal((3, 2, 3, 3))),
        'bias': Tensor(rng.standard_normal(3)),
    }
    spec = ConvSpec(kernel_h=3, kernel_w=3, stride=1, padding=1)

    def fragment(tape, ids):
        return AD.mean_all(tape, densepatch.layers.conv(tape, ids['input'], ids['weight'], ids['bias'], spec))
    assert AD.grad_check(fragment, params) < 1e-4

def test_grad_check_dense_block_bce(rng):
    layers = densepatch.architectures.make_dense_params(4, 3, 3, seed=3, dtype=numpy.float64)
    params = {'input': Tensor(rng.standard_normal((2, 4, 5, 5)))}
    for p in layers:
        for name, t in p.tensors():
            if 'running' not in name:
                params[name] = t
    head = Tensor(rng.standard_normal((13, 1)))
    bias = Tensor(numpy.zeros(1))
    labels = numpy.array([0.0, 1.0])

    def fragment(tape, ids):
        y = densepatch.architectures.dense_block(tape, ids['input'], layers, Mode.TRAIN)
        pooled = densepatch.layers.global_avgpool(tape, y)
        logits = densepatch.layers.linear(tape, pooled, tape.constant(head), tape.constant(bias))
        return densepatch.trainer.bce_loss(tape, logits, labels)
    assert AD.grad_check(fragment, params, eps=1e-6) < 1e-4

def test_grad_check_needs_double():
    params = {'theta': Tensor(numpy.ones(2, dtype=numpy.float32))}
    with pytest.raises(NumericalError):
        AD.grad_check(lambda tape, ids: AD.sum_all(tape, ids['theta']), params)

def test_grad_check_non_finite_loss():
    params = {'theta': Tensor(numpy.array([1.0]))}

    def fragment(tape, ids):
        value = tape.value(ids['theta']).data
        # blows up on any perturbation
        out = numpy.where(value == 1.0, 1.0, numpy.inf)
        return tape.record(OpKind.SCALE, (ids['theta'],), out.reshape(()), saved=dict(factor=1.0))
    with pytest.raises(NumericalError):
        AD.grad_check(fragment, params)
