import os
import pathlib

import attr
import humanfriendly
import toml

from densepatch.architectures import ModelConfig
from densepatch.errors import ConfigError
from densepatch.optimizers import OptimizerKind, OptimState
import densepatch.presets

MODEL_KEYS = [a.name for a in attr.fields(ModelConfig)]
OPTIMIZER_KEYS = ['lr', 'beta1', 'beta2', 'epsilon', 'weight_decay', 'momentum']

def _fraction(instance, attribute, value):
    if not 0 < value < 1:
        raise ConfigError('{} must be in (0, 1): {}'.format(attribute.name, value))

def _positive(instance, attribute, value):
    if int(value) != value or value < 1:
        raise ConfigError('{} must be a positive integer: {}'.format(attribute.name, value))

@attr.s
class TrainConfig:
    model = attr.ib(factory=ModelConfig)

    optimizer = attr.ib(default=OptimizerKind.RADAM, converter=OptimizerKind)
    lr = attr.ib(default=1e-4)
    beta1 = attr.ib(default=0.9)
    beta2 = attr.ib(default=0.999)
    epsilon = attr.ib(default=1e-8)
    weight_decay = attr.ib(default=0.0)
    momentum = attr.ib(default=0.9)

    batch_size = attr.ib(default=128, validator=_positive)
    epochs = attr.ib(default=1, validator=_positive)
    train_fraction = attr.ib(default=0.8)
    validation_fraction = attr.ib(default=0.1, validator=_fraction)
    validation_every = attr.ib(default=50, validator=_positive)
    seed = attr.ib(default=0)

    threads = attr.ib(default=1, validator=_positive)
    deterministic = attr.ib(default=False)
    prefetch = attr.ib(default=True)
    # how much batch data the prefetch thread may hold
    prefetch_bytes = attr.ib(default=64 * 1024 * 1024)

    data = attr.ib(default=None)
    out = attr.ib(default=None)

    @train_fraction.validator
    def _check_train_fraction(self, attribute, value):
        if not 0 < value <= 1:
            raise ConfigError('train_fraction must be in (0, 1]: {}'.format(value))

    def set_if_present(self, data, k, trans=lambda x: x):
        if k in data:
            setattr(self, k, trans(data.pop(k)))

    def merge(self, data, root):
        model = {}
        if 'preset' in data:
            model.update(densepatch.presets.model_shape(data.pop('preset')))
        for k in MODEL_KEYS:
            if k in data:
                model[k] = data.pop(k)
        if model:
            try:
                self.model = attr.evolve(self.model, **model)
            except (TypeError, ValueError) as e:
                raise ConfigError(str(e))

        self.set_if_present(data, 'optimizer', OptimizerKind)
        for k in OPTIMIZER_KEYS:
            self.set_if_present(data, k, float)

        for k in ['batch_size', 'epochs', 'validation_every', 'seed', 'threads']:
            self.set_if_present(data, k, int)
        for k in ['train_fraction', 'validation_fraction']:
            self.set_if_present(data, k, float)
        for k in ['deterministic', 'prefetch']:
            self.set_if_present(data, k, bool)

        self.set_if_present(data, 'prefetch_bytes')
        if not isinstance(self.prefetch_bytes, int):
            self.prefetch_bytes = humanfriendly.parse_size(self.prefetch_bytes)

        self.set_if_present(data, 'data', lambda x: (root / pathlib.Path(x).expanduser()).resolve())
        self.set_if_present(data, 'out', lambda x: (root / pathlib.Path(x).expanduser()).resolve())

        attr.validate(self)

    @classmethod
    def load_file(cls, path, merge=None):
        path = pathlib.Path(path)
        root = path.parent
        try:
            with open(str(path)) as f:
                data = toml.load(f)
        except toml.TomlDecodeError as e:
            raise ConfigError('cannot parse {}: {}'.format(path, e))

        if merge is None:
            merge = cls()

        for inherited in data.pop('inherit', []):
            cls.load_file(root / inherited, merge=merge)

        merge.merge(data, root)
        if data:
            raise ConfigError('unknown config keys: {}'.format(list(data.keys())))
        return merge

    def optim_state(self):
        return OptimState(
            kind=self.optimizer,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
        )

    def to_dict(self):
        data = self.model.to_dict()
        data['optimizer'] = self.optimizer.value
        for k in OPTIMIZER_KEYS + ['batch_size', 'epochs', 'train_fraction', 'validation_fraction', 'validation_every', 'seed', 'threads', 'deterministic', 'prefetch', 'prefetch_bytes']:
            data[k] = getattr(self, k)
        for k in ['data', 'out']:
            if getattr(self, k) is not None:
                data[k] = str(getattr(self, k))
        return data

def discover(extras=[]):
    paths = extras + [os.environ.get('DENSEPATCH'), '~/.densepatch.toml']
    paths = [pathlib.Path(p).expanduser() for p in paths if p]
    paths = [p for p in paths if p.exists()]

    for path in paths:
        return TrainConfig.load_file(path)
    raise ConfigError('no config found')
