import collections
import enum
import logging
import math

import attr
import numpy

from densepatch.autodiff import Tape
from densepatch.errors import ConfigError, ShapeError
import densepatch.autodiff
import densepatch.layers
import densepatch.tensor
from densepatch.layers import BnState, HParams, Mode
from densepatch.tensor import ConvSpec, Tensor

logger = logging.getLogger(__name__)

STEM_SPEC = ConvSpec(kernel_h=3, kernel_w=3, stride=1, padding=1)

class Connectivity(enum.Enum):
    PLAIN = 'plain'
    RESIDUAL = 'residual'
    DENSE = 'dense'

def _to_tuple(value):
    return tuple(int(v) for v in value)

@attr.s(frozen=True)
class ModelConfig:
    connectivity = attr.ib(default=Connectivity.DENSE, converter=Connectivity)
    input_channels = attr.ib(default=8)
    growth_rate = attr.ib(default=4)
    block_layer_counts = attr.ib(default=(2, 2), converter=_to_tuple)
    transition_compression = attr.ib(default=0.5)
    num_classes = attr.ib(default=1)
    input_hw = attr.ib(default=(16, 16), converter=_to_tuple)
    image_channels = attr.ib(default=1)
    transition_pool = attr.ib(default='avg')
    bn_momentum = attr.ib(default=densepatch.layers.BN_MOMENTUM)
    bn_epsilon = attr.ib(default=densepatch.layers.BN_EPSILON)

    @input_channels.validator
    @growth_rate.validator
    @num_classes.validator
    @image_channels.validator
    def _check_positive(self, attribute, value):
        if int(value) != value or value < 1:
            raise ConfigError('{} must be a positive integer, got {}'.format(attribute.name, value))

    @block_layer_counts.validator
    def _check_blocks(self, attribute, value):
        if not value:
            raise ConfigError('at least one block is required')
        if any(v < 1 for v in value):
            raise ConfigError('block layer counts must be positive: {}'.format(list(value)))

    @transition_compression.validator
    def _check_compression(self, attribute, value):
        if not 0 < value <= 1:
            raise ConfigError('transition_compression must be in (0, 1]: {}'.format(value))

    @input_hw.validator
    def _check_hw(self, attribute, value):
        if len(value) != 2 or min(value) < 1:
            raise ConfigError('input_hw must be two positive extents: {}'.format(list(value)))
        h, w = value
        for _ in range(len(self.block_layer_counts) - 1):
            if h < 2 or w < 2:
                raise ConfigError('input {}x{} is too small for {} transitions'.format(value[0], value[1], len(self.block_layer_counts) - 1))
            h, w = h // 2, w // 2

    @transition_pool.validator
    def _check_pool(self, attribute, value):
        if value not in ('avg', 'max'):
            raise ConfigError('transition_pool must be "avg" or "max": {}'.format(value))

    def to_dict(self):
        data = attr.asdict(self)
        data['connectivity'] = self.connectivity.value
        data['block_layer_counts'] = list(self.block_layer_counts)
        data['input_hw'] = list(self.input_hw)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        unknown = set(data) - {a.name for a in attr.fields(cls)}
        if unknown:
            raise ConfigError('unknown model keys: {}'.format(sorted(unknown)))
        return cls(**data)

def feature_map_count(k0, k, l):
    if k0 < 1 or k < 1 or l < 1:
        raise ValueError('feature_map_count needs positive arguments, got k0={}, k={}, l={}'.format(k0, k, l))
    return k0 + k * (l - 1)

@attr.s(frozen=True)
class LayerSpec:
    prefix = attr.ib()
    in_channels = attr.ib()
    out_channels = attr.ib()
    kernel = attr.ib(default=3)

def layout(cfg):
    """Channel plan of a config: (layer specs per block, transition specs, head channels)."""
    channels = cfg.input_channels
    blocks = []
    transitions = []
    last = len(cfg.block_layer_counts) - 1
    for b, count in enumerate(cfg.block_layer_counts):
        layers = []
        for l in range(1, count + 1):
            prefix = 'block{}.layer{}'.format(b, l)
            if cfg.connectivity == Connectivity.DENSE:
                cin = feature_map_count(channels, cfg.growth_rate, l)
                layers.append(LayerSpec(prefix, cin, cfg.growth_rate))
            elif cfg.connectivity == Connectivity.PLAIN:
                cin = channels if l == 1 else cfg.growth_rate
                layers.append(LayerSpec(prefix, cin, cfg.growth_rate))
            else:
                # identity shortcut: every residual unit keeps its width
                layers.append(LayerSpec(prefix, channels, channels))
        if cfg.connectivity == Connectivity.DENSE:
            channels = channels + count * cfg.growth_rate
        elif cfg.connectivity == Connectivity.PLAIN:
            channels = cfg.growth_rate
        blocks.append(layers)
        if b < last:
            out = math.ceil(cfg.transition_compression * channels)
            transitions.append(LayerSpec('transition{}'.format(b), channels, out, kernel=1))
            channels = out
    return blocks, transitions, channels

@attr.s(eq=False)
class ParamStore:
    tensors = attr.ib(factory=collections.OrderedDict)
    # running statistics: serialized with the model, never optimized
    buffers = attr.ib(factory=set)

    def add(self, name, tensor, buffer=False):
        if name in self.tensors:
            raise KeyError('duplicate parameter name: {}'.format(name))
        self.tensors[name] = tensor
        if buffer:
            self.buffers.add(name)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def trainable(self):
        return collections.OrderedDict((k, v) for k, v in self.tensors.items() if k not in self.buffers)

    def count(self, trainable_only=True):
        source = self.trainable() if trainable_only else self.tensors
        return sum(t.size for t in source.values())

    def astype(self, precision):
        out = ParamStore()
        for name, t in self.tensors.items():
            out.add(name, t.astype(precision), buffer=name in self.buffers)
        return out

    def copy(self):
        out = ParamStore()
        for name, t in self.tensors.items():
            out.add(name, t.copy(), buffer=name in self.buffers)
        return out

    def bn(self, prefix, momentum=densepatch.layers.BN_MOMENTUM, epsilon=densepatch.layers.BN_EPSILON):
        return BnState(
            gamma=self[prefix + '.gamma'],
            beta=self[prefix + '.beta'],
            running_mean=self[prefix + '.running_mean'],
            running_var=self[prefix + '.running_var'],
            momentum=momentum,
            epsilon=epsilon,
            prefix=prefix,
        )

    def hparams(self, prefix, momentum=densepatch.layers.BN_MOMENTUM, epsilon=densepatch.layers.BN_EPSILON):
        return HParams(
            bn=self.bn(prefix + '.bn', momentum, epsilon),
            conv_weight=self[prefix + '.conv.weight'],
            conv_bias=self[prefix + '.conv.bias'],
            prefix=prefix,
        )

@attr.s(frozen=True)
class ParamSpec:
    name = attr.ib()
    shape = attr.ib(converter=tuple)
    # 'uniform' (scaled by fan_in), 'zeros' or 'ones'
    init = attr.ib()
    fan_in = attr.ib(default=None)
    buffer = attr.ib(default=False)

    @property
    def size(self):
        return math.prod(self.shape)

def _bn_specs(prefix, channels):
    yield ParamSpec(prefix + '.gamma', (channels,), 'ones')
    yield ParamSpec(prefix + '.beta', (channels,), 'zeros')
    yield ParamSpec(prefix + '.running_mean', (channels,), 'zeros', buffer=True)
    yield ParamSpec(prefix + '.running_var', (channels,), 'ones', buffer=True)

def _conv_specs(prefix, cin, cout, kernel):
    yield ParamSpec(prefix + '.weight', (cout, cin, kernel, kernel), 'uniform', fan_in=cin * kernel * kernel)
    yield ParamSpec(prefix + '.bias', (cout,), 'zeros')

def _layer_specs(spec):
    yield from _bn_specs(spec.prefix + '.bn', spec.in_channels)
    yield from _conv_specs(spec.prefix + '.conv', spec.in_channels, spec.out_channels, spec.kernel)

def param_plan(cfg):
    """Every tensor a config owns, in the order it is created and stored."""
    blocks, transitions, head = layout(cfg)
    plan = list(_conv_specs('stem.conv', cfg.image_channels, cfg.input_channels, 3))
    for b, layers in enumerate(blocks):
        for spec in layers:
            plan.extend(_layer_specs(spec))
        if b < len(transitions):
            plan.extend(_layer_specs(transitions[b]))
    plan.extend(_bn_specs('head.bn', head))
    plan.append(ParamSpec('head.linear.weight', (head, cfg.num_classes), 'uniform', fan_in=head))
    plan.append(ParamSpec('head.linear.bias', (cfg.num_classes,), 'zeros'))
    return plan

def _materialize(plan, seed, dtype):
    rng = numpy.random.Generator(numpy.random.PCG64(seed))
    store = ParamStore()
    for spec in plan:
        if spec.init == 'uniform':
            bound = math.sqrt(1.0 / spec.fan_in)
            value = rng.uniform(-bound, bound, size=spec.shape)
        elif spec.init == 'ones':
            value = numpy.ones(spec.shape)
        else:
            value = numpy.zeros(spec.shape)
        store.add(spec.name, Tensor(value.astype(dtype)), buffer=spec.buffer)
    return store

def init_params(cfg, seed, dtype=None):
    """Seeded parameters for a config.

    Conv and linear weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), biases 0,
    batchnorm gamma 1 and beta 0. Tensors are drawn in plan order from one
    PCG64 stream, so (cfg, seed) always gives the same store.
    """
    return _materialize(param_plan(cfg), seed, dtype or densepatch.tensor.default_dtype())

def make_hparams(cin, cout, kernel=3, seed=0, prefix='layer', dtype=None):
    """Standalone seeded HParams, outside of any model config."""
    plan = list(_layer_specs(LayerSpec(prefix, cin, cout, kernel)))
    return _materialize(plan, seed, dtype or densepatch.tensor.default_dtype()).hparams(prefix)

def make_dense_params(k0, k, count, seed=0, dtype=None):
    return [make_hparams(feature_map_count(k0, k, l), k, seed=seed + l, prefix='layer{}'.format(l), dtype=dtype) for l in range(1, count + 1)]

def plain_block(tape, x, layer_params, mode):
    for p in layer_params:
        x = densepatch.layers.composite_h(tape, x, p, mode)
    return x

def residual_block(tape, x, p, mode):
    cin = tape.value(x).shape[1]
    if p.out_channels != cin:
        raise ShapeError('residual unit maps {} channels to {}; the identity shortcut needs them equal'.format(cin, p.out_channels))
    h = densepatch.layers.composite_h(tape, x, p, mode)
    return densepatch.autodiff.add(tape, h, x)

def dense_block(tape, x, layer_params, mode, trace=None):
    """Each layer sees the concatenation of the block input and all earlier outputs.

    If `trace` is a list, the node holding each layer's concatenated input
    is appended to it.
    """
    if not layer_params:
        return x
    k0 = tape.value(x).shape[1]
    k = layer_params[0].out_channels
    features = [x]
    for l, p in enumerate(layer_params, start=1):
        expected = feature_map_count(k0, k, l)
        if p.out_channels != k or p.in_channels != expected:
            raise ShapeError('dense layer {} must map {} channels to {}, has {} -> {}'.format(l, expected, k, p.in_channels, p.out_channels))
        inputs = features[0] if len(features) == 1 else densepatch.autodiff.concat_channels(tape, features)
        if trace is not None:
            trace.append(inputs)
        features.append(densepatch.layers.composite_h(tape, inputs, p, mode))
    return densepatch.autodiff.concat_channels(tape, features)

def transition(tape, x, p, mode, pool='avg'):
    if p.conv_weight.shape[2] != 1:
        raise ShapeError('transition convolution must be 1x1, got {}'.format(list(p.conv_weight.shape)))
    y = densepatch.layers.composite_h(tape, x, p, mode)
    if pool == 'max':
        return densepatch.layers.maxpool2(tape, y)
    return densepatch.layers.avgpool2(tape, y)

def make_transition(channels, compression, seed=0, dtype=None):
    if not 0 < compression <= 1:
        raise ConfigError('compression must be in (0, 1]: {}'.format(compression))
    return make_hparams(channels, math.ceil(compression * channels), kernel=1, seed=seed, prefix='transition', dtype=dtype)

def _run(build, x, *args):
    tape = Tape()
    return tape.value(build(tape, tape.constant(x), *args))

def plain_block_forward(x, layer_params, mode):
    return _run(plain_block, x, layer_params, mode)

def residual_block_forward(x, p, mode):
    return _run(residual_block, x, p, mode)

def dense_block_forward(x, layer_params, mode):
    return _run(dense_block, x, layer_params, mode)

def transition_forward(x, params, mode, pool='avg'):
    return _run(transition, x, params, mode, pool)

@attr.s(eq=False)
class Classifier:
    config = attr.ib()
    params = attr.ib()

    def __attrs_post_init__(self):
        cfg = self.config
        bn = dict(momentum=cfg.bn_momentum, epsilon=cfg.bn_epsilon)
        blocks, transitions, _ = layout(cfg)
        self.blocks = [[self.params.hparams(spec.prefix, **bn) for spec in layers] for layers in blocks]
        self.transitions = [self.params.hparams(spec.prefix, **bn) for spec in transitions]
        self.head_bn = self.params.bn('head.bn', **bn)

    @classmethod
    def build(cls, cfg, seed, dtype=None):
        return cls(config=cfg, params=init_params(cfg, seed, dtype=dtype))

    def forward(self, tape, x, mode):
        cfg = self.config
        channels = tape.value(x).shape[1]
        if channels != cfg.image_channels:
            raise ShapeError('model expects {} image channels, got {}'.format(cfg.image_channels, channels))
        y = densepatch.layers.conv(
            tape, x,
            tape.param('stem.conv.weight', self.params['stem.conv.weight']),
            tape.param('stem.conv.bias', self.params['stem.conv.bias']),
            STEM_SPEC,
        )
        for b, layers in enumerate(self.blocks):
            if cfg.connectivity == Connectivity.DENSE:
                y = dense_block(tape, y, layers, mode)
            elif cfg.connectivity == Connectivity.PLAIN:
                y = plain_block(tape, y, layers, mode)
            else:
                for p in layers:
                    y = residual_block(tape, y, p, mode)
            if b < len(self.transitions):
                y = transition(tape, y, self.transitions[b], mode, cfg.transition_pool)
        y = densepatch.layers.batchnorm(tape, y, self.head_bn, mode)
        y = densepatch.layers.relu(tape, y)
        y = densepatch.layers.global_avgpool(tape, y)
        return densepatch.layers.linear(
            tape, y,
            tape.param('head.linear.weight', self.params['head.linear.weight']),
            tape.param('head.linear.bias', self.params['head.linear.bias']),
        )

    def __call__(self, x, mode=Mode.EVAL):
        tape = Tape()
        return tape.value(self.forward(tape, tape.constant(x), mode))

    def scores(self, images, batch_size=256):
        """Eval-mode sigmoid scores of the first logit, one per sample."""
        out = []
        for start in range(0, images.shape[0], batch_size):
            logits = self(Tensor(images[start:start + batch_size]), Mode.EVAL)
            out.append(densepatch.tensor.sigmoid(logits.data[:, 0].astype(numpy.float64)))
        if not out:
            return numpy.zeros(0)
        return numpy.concatenate(out)

def build_classifier(cfg, seed):
    model = Classifier.build(cfg, seed)
    logger.info('built %s classifier with %d parameters', cfg.connectivity.value, model.params.count())
    return model.params, model.forward
