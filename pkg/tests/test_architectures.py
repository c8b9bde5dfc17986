import numpy
import numpy.testing
import pytest

from densepatch.architectures import Connectivity, ModelConfig
from densepatch.autodiff import Tape
from densepatch.errors import ConfigError, ShapeError
from densepatch.layers import Mode
from densepatch.tensor import Tensor
import densepatch.architectures as A
import densepatch.autodiff
import densepatch.layers
import densepatch.presets
import densepatch.tensor

@pytest.fixture
def rng():
    return numpy.random.Generator(numpy.random.PCG64(11))

@pytest.mark.parametrize('k0,k,l,expected', [(64, 32, 1, 64), (64, 32, 3, 128), (3, 12, 5, 51)])
def test_feature_map_count(k0, k, l, expected):
    assert A.feature_map_count(k0, k, l) == expected

def test_feature_map_count_rejects_non_positive():
    with pytest.raises(ValueError):
        A.feature_map_count(0, 1, 1)
    with pytest.raises(ValueError):
        A.feature_map_count(1, 1, 0)

def test_dense_growth_law_sweep():
    sweep = numpy.random.Generator(numpy.random.PCG64(2024))
    for _ in range(40):
        k0 = int(sweep.integers(1, 17))
        k = int(sweep.integers(1, 9))
        count = int(sweep.integers(1, 7))
        layers = A.make_dense_params(k0, k, count, dtype=numpy.float64)
        tape = Tape()
        trace = []
        x = tape.constant(Tensor(numpy.zeros((1, k0, 3, 3))))
        out = A.dense_block(tape, x, layers, Mode.EVAL, trace=trace)
        assert [tape.value(ref).shape[1] for ref in trace] == [A.feature_map_count(k0, k, l) for l in range(1, count + 1)]
        assert tape.value(out).shape[1] == k0 + count * k

def test_dense_block_example_channels(rng):
    layers = A.make_dense_params(4, 3, 3, dtype=numpy.float64)
    assert [p.in_channels for p in layers] == [4, 7, 10]
    out = A.dense_block_forward(Tensor(rng.standard_normal((2, 4, 5, 5))), layers, Mode.EVAL)
    assert out.shape == (2, 13, 5, 5)

def test_dense_block_without_layers_is_identity(rng):
    x = Tensor(rng.standard_normal((1, 3, 4, 4)))
    numpy.testing.assert_array_equal(A.dense_block_forward(x, [], Mode.EVAL).data, x.data)

def test_dense_block_single_layer_is_concat(rng):
    layers = A.make_dense_params(3, 2, 1, dtype=numpy.float64)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    h = densepatch.layers.composite_h_forward(x, layers[0], Mode.EVAL)
    expected = densepatch.tensor.concat_channels([x, h])
    numpy.testing.assert_array_equal(A.dense_block_forward(x, layers, Mode.EVAL).data, expected.data)

def test_dense_block_input_reaches_every_layer(rng):
    layers = A.make_dense_params(2, 2, 3, dtype=numpy.float64)
    x = rng.standard_normal((1, 2, 4, 4))
    probe = x.copy()
    probe[0, 1, 2, 2] += 1.0

    def layer_inputs(value):
        tape = Tape()
        trace = []
        A.dense_block(tape, tape.constant(Tensor(value)), layers, Mode.EVAL, trace=trace)
        return [tape.value(ref).data for ref in trace]
    for before, after in zip(layer_inputs(x), layer_inputs(probe)):
        assert not numpy.array_equal(before[:, :2], after[:, :2])

def test_dense_block_rejects_wrong_widths():
    layers = A.make_dense_params(4, 3, 2, dtype=numpy.float64)
    layers[1] = A.make_hparams(6, 3, prefix='bad', dtype=numpy.float64)
    with pytest.raises(ShapeError):
        A.dense_block_forward(Tensor(numpy.zeros((1, 4, 3, 3))), layers, Mode.EVAL)

def test_dense_gradient_reaches_input_through_every_layer(rng):
    layers = A.make_dense_params(2, 2, 3, seed=9, dtype=numpy.float64)
    x = Tensor(rng.standard_normal((2, 2, 4, 4)))

    def input_grad(cut):
        tape = Tape()
        xs = tape.param('x', x)
        features = [xs]
        for l, p in enumerate(layers, start=1):
            parts = list(features)
            if l == cut:
                # feed this layer a copy of x that is off the tape
                parts[0] = tape.constant(x)
            inputs = densepatch.autodiff.concat_channels(tape, parts) if len(parts) > 1 else parts[0]
            features.append(densepatch.layers.composite_h(tape, inputs, p, Mode.TRAIN))
        out = densepatch.autodiff.concat_channels(tape, features)
        weights = tape.constant(Tensor(numpy.linspace(-1, 1, tape.value(out).size).reshape(tape.value(out).shape)))
        loss = densepatch.autodiff.sum_all(tape, densepatch.autodiff.mul(tape, out, weights))
        return densepatch.autodiff.backward(tape, loss).param('x').data
    full = input_grad(None)
    for cut in (1, 2, 3):
        assert not numpy.allclose(input_grad(cut), full)

def test_plain_block(rng):
    layers = [A.make_hparams(3, 4, seed=1, prefix='a', dtype=numpy.float64), A.make_hparams(4, 4, seed=2, prefix='b', dtype=numpy.float64)]
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    manual = densepatch.layers.composite_h_forward(densepatch.layers.composite_h_forward(x, layers[0], Mode.EVAL), layers[1], Mode.EVAL)
    numpy.testing.assert_array_equal(A.plain_block_forward(x, layers, Mode.EVAL).data, manual.data)
    numpy.testing.assert_array_equal(A.plain_block_forward(x, [], Mode.EVAL).data, x.data)

def test_plain_block_channel_chain():
    layers = [A.make_hparams(3, 4, prefix='a', dtype=numpy.float64), A.make_hparams(5, 4, prefix='b', dtype=numpy.float64)]
    with pytest.raises(ShapeError):
        A.plain_block_forward(Tensor(numpy.zeros((1, 3, 4, 4))), layers, Mode.EVAL)

def test_residual_zero_h_is_identity(rng):
    p = A.make_hparams(3, 3, dtype=numpy.float64)
    p.conv_weight.data[...] = 0
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    numpy.testing.assert_array_equal(A.residual_block_forward(x, p, Mode.TRAIN).data, x.data)

def test_residual_is_h_plus_x(rng):
    p = A.make_hparams(3, 3, seed=4, dtype=numpy.float64)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    h = densepatch.layers.composite_h_forward(x, p, Mode.EVAL)
    out = A.residual_block_forward(x, p, Mode.EVAL)
    numpy.testing.assert_array_equal(out.data, h.data + x.data)
    numpy.testing.assert_allclose(out.data - h.data, x.data, atol=1e-12)

def test_residual_width_mismatch():
    with pytest.raises(ShapeError):
        A.residual_block_forward(Tensor(numpy.zeros((1, 3, 4, 4))), A.make_hparams(3, 4, dtype=numpy.float64), Mode.EVAL)

@pytest.mark.parametrize('compression,channels,expected', [(1.0, 8, 8), (0.5, 8, 4), (0.5, 7, 4)])
def test_transition_extents(rng, compression, channels, expected):
    p = A.make_transition(channels, compression, dtype=numpy.float64)
    out = A.transition_forward(Tensor(rng.standard_normal((1, channels, 8, 8))), p, Mode.EVAL)
    assert out.shape == (1, expected, 4, 4)

def test_transition_max_pool(rng):
    p = A.make_transition(4, 0.5, dtype=numpy.float64)
    out = A.transition_forward(Tensor(rng.standard_normal((1, 4, 6, 6))), p, Mode.EVAL, pool='max')
    assert out.shape == (1, 2, 3, 3)

def test_transition_undersized():
    p = A.make_transition(4, 0.5, dtype=numpy.float64)
    with pytest.raises(ShapeError):
        A.transition_forward(Tensor(numpy.zeros((1, 4, 1, 4))), p, Mode.EVAL)

def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(block_layer_counts=())
    with pytest.raises(ConfigError):
        ModelConfig(transition_compression=0.0)
    with pytest.raises(ConfigError):
        ModelConfig(growth_rate=0)
    with pytest.raises(ConfigError):
        ModelConfig(input_hw=(2, 2), block_layer_counts=(1, 1, 1))
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({'depth': 3})

def test_model_config_round_trips_through_dict():
    cfg = ModelConfig(connectivity='residual', block_layer_counts=[1, 2, 3], input_hw=[32, 32])
    assert cfg.connectivity == Connectivity.RESIDUAL
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg

@pytest.mark.parametrize('connectivity', ['plain', 'residual', 'dense'])
def test_classifier_output_shape(rng, connectivity):
    cfg = ModelConfig(connectivity=connectivity, input_channels=8, growth_rate=4, block_layer_counts=(2, 2), input_hw=(16, 16))
    params, forward = A.build_classifier(cfg, seed=0)
    tape = Tape()
    out = forward(tape, tape.constant(Tensor(rng.uniform(size=(3, 1, 16, 16)).astype(numpy.float32))), Mode.EVAL)
    assert tape.value(out).shape == (3, cfg.num_classes)

def test_classifier_is_seeded():
    cfg = ModelConfig()
    a, _ = A.build_classifier(cfg, seed=5)
    b, _ = A.build_classifier(cfg, seed=5)
    c, _ = A.build_classifier(cfg, seed=6)
    assert a.names() == b.names()
    for name in a.names():
        numpy.testing.assert_array_equal(a[name].data, b[name].data)
    assert not numpy.array_equal(a['stem.conv.weight'].data, c['stem.conv.weight'].data)

def test_param_names_follow_config():
    cfg = ModelConfig(block_layer_counts=(1, 1))
    names = A.init_params(cfg, seed=0).names()
    assert names == [spec.name for spec in A.param_plan(cfg)]
    assert names[:2] == ['stem.conv.weight', 'stem.conv.bias']
    assert 'block0.layer1.conv.weight' in names
    assert 'transition0.conv.weight' in names
    assert names[-2:] == ['head.linear.weight', 'head.linear.bias']

def test_init_scheme():
    params = A.init_params(ModelConfig(), seed=1)
    w = params['block0.layer1.conv.weight'].data
    bound = numpy.sqrt(1.0 / (w.shape[1] * 9))
    assert numpy.all(numpy.abs(w) <= bound * (1 + 1e-6))
    numpy.testing.assert_array_equal(params['block0.layer1.bn.gamma'].data, 1)
    numpy.testing.assert_array_equal(params['block0.layer1.conv.bias'].data, 0)
    assert 'block0.layer1.bn.running_mean' in params.buffers
    assert 'block0.layer1.bn.running_mean' not in params.trainable()

def test_densenet169_shape_builds():
    cfg = ModelConfig.from_dict(densepatch.presets.model_shape('densenet169'))
    assert cfg.block_layer_counts == (6, 12, 32, 32)
    blocks, transitions, head = A.layout(cfg)
    assert [len(b) for b in blocks] == [6, 12, 32, 32]
    assert blocks[0][-1].in_channels == A.feature_map_count(64, 32, 6)
    assert len(transitions) == 3
    count = sum(spec.size for spec in A.param_plan(cfg) if not spec.buffer)
    assert count > 10 ** 6

@pytest.mark.parametrize('name', ['dense-small', 'residual-small', 'plain-small', 'dense-maxpool', 'dense-block', 'residual-block', 'transition'])
def test_model_gradients(name):
    assert densepatch.presets.run_gradcheck(name) < 1e-4
