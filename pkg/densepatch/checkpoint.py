import collections
import hashlib
import io
import logging
import struct

import attr
import humanfriendly
import numpy
import toml

from densepatch.architectures import Classifier, ModelConfig, ParamStore, param_plan
from densepatch.errors import FormatError
from densepatch.optimizers import OptimState, OptimizerKind
from densepatch.tensor import Tensor

logger = logging.getLogger(__name__)

# PCKP layout, all little-endian:
#   "PCKP", u16 version
#   u32 length + UTF-8 TOML of the model config, then its 32-byte sha256
#   u64 batches processed (curve-log offset)
#   tensor table: u32 count, then per tensor
#       u16 name length, name, u8 dtype tag, u8 flags, u8 rank, u32 extents..., raw values
#   u8 optimizer present; if 1: u8 kind, 6 x f64 hyperparameters, u64 t,
#       tensor table of first moments, tensor table of second moments
MAGIC = b'PCKP'
VERSION = 1

DTYPE_TAGS = {1: numpy.dtype('<f4'), 2: numpy.dtype('<f8')}
TAG_FOR_DTYPE = {numpy.dtype(numpy.float32): 1, numpy.dtype(numpy.float64): 2}
KIND_TAGS = {OptimizerKind.SGD: 1, OptimizerKind.ADAM: 2, OptimizerKind.RADAM: 3}
FLAG_BUFFER = 1

def config_text(cfg):
    data = cfg.to_dict()
    return toml.dumps(collections.OrderedDict(sorted(data.items()))).encode('utf-8')

def config_hash(cfg):
    return hashlib.sha256(config_text(cfg)).hexdigest()

@attr.s(eq=False)
class Checkpoint:
    config = attr.ib()
    params = attr.ib()
    optimizer = attr.ib(default=None)
    batches_processed = attr.ib(default=0)

    @property
    def config_hash(self):
        return config_hash(self.config)

    def model(self):
        return Classifier(config=self.config, params=self.params)

    def dumps(self):
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack('<H', VERSION))
        text = config_text(self.config)
        out.write(struct.pack('<I', len(text)))
        out.write(text)
        out.write(hashlib.sha256(text).digest())
        out.write(struct.pack('<Q', self.batches_processed))
        _write_table(out, self.params.items(), self.params.buffers)
        if self.optimizer is None:
            out.write(struct.pack('<B', 0))
        else:
            opt = self.optimizer
            out.write(struct.pack('<BB', 1, KIND_TAGS[opt.kind]))
            out.write(struct.pack('<6d', *opt.hyperparameters().values()))
            out.write(struct.pack('<Q', opt.t))
            _write_table(out, ((k, Tensor(v)) for k, v in opt.m.items()), ())
            _write_table(out, ((k, Tensor(v)) for k, v in opt.v.items()), ())
        return out.getvalue()

    def save(self, path):
        data = self.dumps()
        with open(str(path), 'wb') as f:
            f.write(data)
        logger.info('saved checkpoint %s (%s)', path, humanfriendly.format_size(len(data)))

    @classmethod
    def loads(cls, data):
        src = _Reader(data)
        if src.take(4) != MAGIC:
            raise FormatError('not a checkpoint: bad magic')
        version, = src.unpack('<H')
        if version != VERSION:
            raise FormatError('unsupported checkpoint version {}'.format(version))
        length, = src.unpack('<I')
        text = src.take(length)
        digest = src.take(32)
        if hashlib.sha256(text).digest() != digest:
            raise FormatError('checkpoint config hash does not match its config block')
        try:
            cfg = ModelConfig.from_dict(toml.loads(text.decode('utf-8')))
        except (ValueError, TypeError) as e:
            raise FormatError('bad config block in checkpoint: {}'.format(e))
        batches, = src.unpack('<Q')
        params = ParamStore()
        for name, tensor, flags in _read_table(src):
            params.add(name, tensor, buffer=bool(flags & FLAG_BUFFER))
        optimizer = None
        present, = src.unpack('<B')
        if present:
            tag, = src.unpack('<B')
            kinds = {v: k for k, v in KIND_TAGS.items()}
            if tag not in kinds:
                raise FormatError('unknown optimizer tag {}'.format(tag))
            lr, beta1, beta2, epsilon, weight_decay, momentum = src.unpack('<6d')
            t, = src.unpack('<Q')
            optimizer = OptimState(
                kind=kinds[tag], lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
                weight_decay=weight_decay, momentum=momentum, t=t,
            )
            for name, tensor, _ in _read_table(src):
                optimizer.m[name] = tensor.data
            for name, tensor, _ in _read_table(src):
                optimizer.v[name] = tensor.data
        if not src.done():
            raise FormatError('{} trailing bytes after checkpoint'.format(src.remaining()))
        expected = [(spec.name, spec.shape) for spec in param_plan(cfg)]
        found = [(name, t.shape) for name, t in params.items()]
        if found != expected:
            raise FormatError('checkpoint tensors do not match its model config')
        return cls(config=cfg, params=params, optimizer=optimizer, batches_processed=batches)

    @classmethod
    def load(cls, path):
        with open(str(path), 'rb') as f:
            return cls.loads(f.read())

def _write_table(out, items, buffers):
    items = list(items)
    out.write(struct.pack('<I', len(items)))
    for name, tensor in items:
        encoded = name.encode('utf-8')
        arr = tensor.data
        tag = TAG_FOR_DTYPE[arr.dtype]
        flags = FLAG_BUFFER if name in buffers else 0
        out.write(struct.pack('<H', len(encoded)))
        out.write(encoded)
        out.write(struct.pack('<BBB', tag, flags, arr.ndim))
        out.write(struct.pack('<{}I'.format(arr.ndim), *arr.shape))
        out.write(arr.astype(DTYPE_TAGS[tag]).tobytes())

def _read_table(src):
    count, = src.unpack('<I')
    for _ in range(count):
        length, = src.unpack('<H')
        name = src.take(length).decode('utf-8')
        tag, flags, ndim = src.unpack('<BBB')
        if tag not in DTYPE_TAGS:
            raise FormatError('unknown dtype tag {} for {}'.format(tag, name))
        shape = src.unpack('<{}I'.format(ndim))
        dtype = DTYPE_TAGS[tag]
        size = int(numpy.prod(shape, dtype=numpy.int64)) if ndim else 1
        raw = src.take(size * dtype.itemsize)
        arr = numpy.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
        yield name, Tensor(arr), flags

class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError('truncated checkpoint at byte {}'.format(self.pos))
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def done(self):
        return self.pos == len(self.data)

    def remaining(self):
        return len(self.data) - self.pos
