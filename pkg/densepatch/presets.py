import collections
import pathlib

import numpy
import toml

from densepatch.architectures import Classifier, ModelConfig
from densepatch.autodiff import mul, sum_all
from densepatch.errors import ConfigError
from densepatch.layers import BnState, Mode
from densepatch.tensor import ConvSpec, Tensor
import densepatch.architectures
import densepatch.autodiff
import densepatch.layers
import densepatch.tensor
import densepatch.trainer

DATA = pathlib.Path(__file__).parent / 'data'

# every fragment is reduced to a scalar with the same fixed weights
WEIGHT_SEED = 1234
DEFAULT_EPS = 1e-4

_datacache = {}

def get_data(path, load=toml.load):
    if path not in _datacache:
        with open(str(DATA / path)) as f:
            _datacache[path] = load(f)
    return _datacache[path]

def model_names():
    return sorted(get_data('presets.toml')['models'])

def model_shape(name):
    models = get_data('presets.toml')['models']
    if name not in models:
        raise ConfigError('unknown model preset {!r}, known: {}'.format(name, ', '.join(model_names())))
    return dict(models[name])

def gradcheck_names():
    return sorted(get_data('presets.toml')['gradcheck'])

FRAGMENTS = {}

def register_fragment(name):
    def wrap(f):
        FRAGMENTS[name] = f
        return f
    return wrap

def _weighted_sum(tape, node):
    shape = tape.value(node).shape
    weights = numpy.random.Generator(numpy.random.PCG64(WEIGHT_SEED)).standard_normal(shape)
    return sum_all(tape, mul(tape, node, tape.constant(Tensor(weights))))

def _images(rng, preset, channels):
    hw = preset['hw']
    return Tensor(rng.standard_normal((preset['batch'], channels, hw, hw)))

def _trainable(pairs):
    return collections.OrderedDict((name, t) for name, t in pairs if not name.rsplit('.', 1)[-1].startswith('running_'))

@register_fragment('model')
def _model(preset, rng):
    shape = {k: v for k, v in preset.items() if k not in ('fragment', 'batch', 'eps')}
    cfg = ModelConfig.from_dict(shape)
    model = Classifier.build(cfg, seed=int(rng.integers(1 << 32)), dtype=numpy.float64)
    h, w = cfg.input_hw
    x = Tensor(rng.uniform(0.0, 1.0, size=(preset['batch'], cfg.image_channels, h, w)))
    labels = numpy.arange(preset['batch']) % 2

    def fragment(tape, ids):
        logits = model.forward(tape, tape.constant(x), Mode.TRAIN)
        return densepatch.trainer.bce_loss(tape, logits, labels)
    return fragment, model.params.trainable()

@register_fragment('conv')
def _conv(preset, rng):
    k = preset['kernel']
    spec = ConvSpec(kernel_h=k, kernel_w=k, stride=1, padding=k // 2)
    params = collections.OrderedDict([
        ('input', _images(rng, preset, preset['in_channels'])),
        ('conv.weight', Tensor(rng.standard_normal((preset['out_channels'], preset['in_channels'], k, k)))),
        ('conv.bias', Tensor(rng.standard_normal(preset['out_channels']))),
    ])

    def fragment(tape, ids):
        y = densepatch.layers.conv(tape, ids['input'], ids['conv.weight'], ids['conv.bias'], spec)
        return _weighted_sum(tape, y)
    return fragment, params

@register_fragment('batchnorm')
def _batchnorm(preset, rng):
    c = preset['in_channels']
    state = BnState(
        gamma=Tensor(1 + 0.1 * rng.standard_normal(c)),
        beta=Tensor(0.1 * rng.standard_normal(c)),
        running_mean=Tensor(numpy.zeros(c)),
        running_var=Tensor(numpy.ones(c)),
    )
    params = collections.OrderedDict([('input', _images(rng, preset, c))])
    params.update(_trainable(state.tensors()))

    def fragment(tape, ids):
        return _weighted_sum(tape, densepatch.layers.batchnorm(tape, ids['input'], state, Mode.TRAIN))
    return fragment, params

def _unary(op):
    def build(preset, rng):
        params = collections.OrderedDict([('input', _images(rng, preset, preset['in_channels']))])

        def fragment(tape, ids):
            return _weighted_sum(tape, op(tape, ids['input']))
        return fragment, params
    return build

register_fragment('relu')(_unary(densepatch.layers.relu))
register_fragment('avgpool')(_unary(densepatch.layers.avgpool2))
register_fragment('maxpool')(_unary(densepatch.layers.maxpool2))
register_fragment('global-avgpool')(_unary(densepatch.layers.global_avgpool))

def _with_input(rng, preset, layer_pairs):
    params = collections.OrderedDict([('input', _images(rng, preset, preset['in_channels']))])
    params.update(_trainable(layer_pairs))
    return params

def _seed(rng):
    return int(rng.integers(1 << 32))

@register_fragment('composite')
def _composite(preset, rng):
    p = densepatch.architectures.make_hparams(preset['in_channels'], preset['out_channels'], preset['kernel'], seed=_seed(rng), dtype=numpy.float64)

    def fragment(tape, ids):
        return _weighted_sum(tape, densepatch.layers.composite_h(tape, ids['input'], p, Mode.TRAIN))
    return fragment, _with_input(rng, preset, p.tensors())

@register_fragment('dense-block')
def _dense_block(preset, rng):
    layers = densepatch.architectures.make_dense_params(preset['in_channels'], preset['growth_rate'], preset['layers'], seed=_seed(rng), dtype=numpy.float64)

    def fragment(tape, ids):
        return _weighted_sum(tape, densepatch.architectures.dense_block(tape, ids['input'], layers, Mode.TRAIN))
    return fragment, _with_input(rng, preset, [pair for p in layers for pair in p.tensors()])

@register_fragment('residual-block')
def _residual_block(preset, rng):
    c = preset['in_channels']
    p = densepatch.architectures.make_hparams(c, c, 3, seed=_seed(rng), dtype=numpy.float64)

    def fragment(tape, ids):
        return _weighted_sum(tape, densepatch.architectures.residual_block(tape, ids['input'], p, Mode.TRAIN))
    return fragment, _with_input(rng, preset, p.tensors())

@register_fragment('transition')
def _transition(preset, rng):
    p = densepatch.architectures.make_transition(preset['in_channels'], preset.get('compression', 0.5), seed=_seed(rng), dtype=numpy.float64)
    pool = preset.get('pool', 'avg')

    def fragment(tape, ids):
        return _weighted_sum(tape, densepatch.architectures.transition(tape, ids['input'], p, Mode.TRAIN, pool))
    return fragment, _with_input(rng, preset, p.tensors())

@register_fragment('linear')
def _linear(preset, rng):
    f, o = preset['in_features'], preset['out_features']
    params = collections.OrderedDict([
        ('input', Tensor(rng.standard_normal((preset['batch'], f)))),
        ('weight', Tensor(rng.standard_normal((f, o)))),
        ('bias', Tensor(rng.standard_normal(o))),
    ])

    def fragment(tape, ids):
        return _weighted_sum(tape, densepatch.layers.linear(tape, ids['input'], ids['weight'], ids['bias']))
    return fragment, params

@register_fragment('bce')
def _bce(preset, rng):
    n = preset['batch']
    params = collections.OrderedDict([('input', Tensor(2 * rng.standard_normal((n, 1))))])
    labels = numpy.arange(n) % 2

    def fragment(tape, ids):
        return densepatch.trainer.bce_loss(tape, ids['input'], labels)
    return fragment, params

def gradcheck_case(name, seed=0):
    """(fragment, params, eps) for a named gradient-check preset."""
    presets = get_data('presets.toml')['gradcheck']
    if name not in presets:
        raise ConfigError('unknown gradcheck preset {!r}, known: {}'.format(name, ', '.join(gradcheck_names())))
    preset = dict(presets[name])
    kind = preset.get('fragment')
    if kind not in FRAGMENTS:
        raise ConfigError('gradcheck preset {!r} names unknown fragment {!r}'.format(name, kind))
    rng = numpy.random.Generator(numpy.random.PCG64(seed))
    with densepatch.tensor.precision('double'):
        fragment, params = FRAGMENTS[kind](preset, rng)
    return fragment, params, preset.get('eps', DEFAULT_EPS)

def run_gradcheck(name, seed=0):
    fragment, params, eps = gradcheck_case(name, seed)
    return densepatch.autodiff.grad_check(fragment, params, eps=eps)
