import csv
import logging
import math
import pathlib
import queue
import struct
import threading

import attr
import humanfriendly
import numpy

from densepatch.errors import DataError, FormatError
import densepatch.tensor

logger = logging.getLogger(__name__)

# PPAK layout, all little-endian:
#   header (16 bytes): magic "PPAK", u16 version, u32 count, u16 height, u16 width, u16 channels
#   count records: u8 label, then height*width*channels u8 pixels in H -> W -> C order
PPAK_MAGIC = b'PPAK'
PPAK_VERSION = 1
PPAK_HEADER = struct.Struct('<4sHIHHH')

MASK64 = (1 << 64) - 1

def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64

def splitmix64(state):
    """One splitmix64 step: returns (new state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)

class Xoshiro256:
    """xoshiro256** seeded through splitmix64; identical streams on every platform."""

    def __init__(self, seed):
        state = int(seed) & MASK64
        self.s = []
        for _ in range(4):
            state, out = splitmix64(state)
            self.s.append(out)

    def next(self):
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def below(self, n):
        # rejection sampling keeps the draw unbiased
        if n < 1:
            raise ValueError('bound must be positive: {}'.format(n))
        limit = ((1 << 64) // n) * n
        while True:
            r = self.next()
            if r < limit:
                return r % n

def derive_seed(seed, *tags):
    state = int(seed) & MASK64
    for tag in tags:
        state, out = splitmix64(state ^ (int(tag) & MASK64))
        state = out
    return state

def permutation(n, seed):
    """Fisher-Yates shuffle of range(n) driven by Xoshiro256(seed)."""
    rng = Xoshiro256(seed)
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        order[i], order[j] = order[j], order[i]
    return numpy.array(order, dtype=numpy.int64)

@attr.s(frozen=True)
class PpakHeader:
    count = attr.ib()
    height = attr.ib()
    width = attr.ib()
    channels = attr.ib()
    magic = attr.ib(default=PPAK_MAGIC)
    version = attr.ib(default=PPAK_VERSION)

    @count.validator
    def _check_count(self, attribute, value):
        if not 0 <= value < 1 << 32:
            raise FormatError('record count does not fit in 32 bits: {}'.format(value))

    @height.validator
    @width.validator
    @channels.validator
    def _check_extent(self, attribute, value):
        if not 0 < value < 1 << 16:
            raise FormatError('{} must be in [1, 65535]: {}'.format(attribute.name, value))

    @property
    def pixels_per_record(self):
        return self.height * self.width * self.channels

    @property
    def record_size(self):
        return 1 + self.pixels_per_record

    @property
    def file_size(self):
        return PPAK_HEADER.size + self.count * self.record_size

    def pack(self):
        return PPAK_HEADER.pack(self.magic, self.version, self.count, self.height, self.width, self.channels)

    @classmethod
    def unpack(cls, data):
        if len(data) < PPAK_HEADER.size:
            raise FormatError('truncated PPAK header: {} bytes'.format(len(data)))
        magic, version, count, height, width, channels = PPAK_HEADER.unpack(data[:PPAK_HEADER.size])
        if magic != PPAK_MAGIC:
            raise FormatError('bad magic {!r}, expected {!r}'.format(magic, PPAK_MAGIC))
        if version != PPAK_VERSION:
            raise FormatError('unsupported PPAK version {}'.format(version))
        return cls(count=count, height=height, width=width, channels=channels, magic=magic, version=version)

@attr.s(frozen=True, eq=False)
class Dataset:
    # raw bytes, N x H x W x C, exactly as stored on disk
    pixels = attr.ib(converter=lambda a: numpy.ascontiguousarray(a, dtype=numpy.uint8))
    labels = attr.ib(converter=lambda a: numpy.ascontiguousarray(a, dtype=numpy.uint8).reshape(-1))

    def __attrs_post_init__(self):
        if self.pixels.ndim != 4:
            raise DataError('pixels must be N x H x W x C, got {}'.format(list(self.pixels.shape)))
        if self.pixels.shape[0] != self.labels.shape[0]:
            raise DataError('{} images but {} labels'.format(self.pixels.shape[0], self.labels.shape[0]))
        if not numpy.all(self.labels <= 1):
            raise DataError('labels must be 0 or 1')

    def __len__(self):
        return self.labels.shape[0]

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]

    @property
    def channels(self):
        return self.pixels.shape[3]

    @property
    def header(self):
        return PpakHeader(count=len(self), height=self.height, width=self.width, channels=self.channels)

    def images(self, indices=None, dtype=None):
        """Pixels as N x C x H x W floats in [0, 1]."""
        dtype = dtype or densepatch.tensor.default_dtype()
        raw = self.pixels if indices is None else self.pixels[indices]
        return numpy.ascontiguousarray(raw.transpose(0, 3, 1, 2)).astype(dtype) / dtype(255)

    def subset(self, indices):
        indices = numpy.asarray(indices, dtype=numpy.int64)
        return Dataset(pixels=self.pixels[indices], labels=self.labels[indices])

    def class_counts(self):
        positives = int(self.labels.sum())
        return len(self) - positives, positives

    def same_contents(self, other):
        return (self.pixels.shape == other.pixels.shape
                and numpy.array_equal(self.pixels, other.pixels)
                and numpy.array_equal(self.labels, other.labels))

def _open(target, mode):
    if hasattr(target, 'read') or hasattr(target, 'write'):
        return None
    return open(str(target), mode)

def write_ppak(ds, destination):
    header = ds.header
    records = numpy.empty((len(ds), header.record_size), dtype=numpy.uint8)
    records[:, 0] = ds.labels
    records[:, 1:] = ds.pixels.reshape(len(ds), header.pixels_per_record)
    f = _open(destination, 'wb')
    out = f or destination
    try:
        out.write(header.pack())
        out.write(records.tobytes())
    finally:
        if f:
            f.close()
    logger.debug('wrote %d records (%s)', len(ds), humanfriendly.format_size(header.file_size))

def read_ppak(source):
    f = _open(source, 'rb')
    src = f or source
    try:
        header = PpakHeader.unpack(src.read(PPAK_HEADER.size))
        expected = header.count * header.record_size
        body = src.read(expected)
    finally:
        if f:
            f.close()
    if len(body) != expected:
        raise FormatError('truncated PPAK body: expected {} bytes, got {}'.format(expected, len(body)))
    records = numpy.frombuffer(body, dtype=numpy.uint8).reshape(header.count, header.record_size)
    labels = records[:, 0]
    bad = numpy.nonzero(labels > 1)[0]
    if bad.size:
        raise FormatError('record {} has label byte {}'.format(int(bad[0]), int(labels[bad[0]])))
    pixels = records[:, 1:].reshape(header.count, header.height, header.width, header.channels)
    return Dataset(pixels=pixels.copy(), labels=labels.copy())

def split_sizes(count, train_fraction):
    if not 0 < train_fraction <= 1:
        raise ValueError('train fraction must be in (0, 1]: {}'.format(train_fraction))
    n_train = int(math.floor(train_fraction * count))
    return n_train, count - n_train

def split(ds, train_fraction, seed):
    if len(ds) == 0:
        raise DataError('cannot split an empty dataset')
    n_train, n_test = split_sizes(len(ds), train_fraction)
    order = permutation(len(ds), seed)
    logger.info('splitting %d samples into %d train / %d test', len(ds), n_train, n_test)
    return ds.subset(order[:n_train]), ds.subset(order[n_train:])

def synth_generate(n, h, w, c, pos_fraction, seed, amplitude=0.6, radius=2.5, jitter=2):
    """Synthetic patches: uniform noise, plus a bright Gaussian blob for label 1.

    The blob center is jittered by up to `jitter` pixels around the patch
    center. Exactly round-half-up(n * pos_fraction) samples are positive.
    """
    if n < 2:
        raise DataError('need at least 2 samples, got {}'.format(n))
    if h < 8 or w < 8 or c < 1:
        raise DataError('patches must be at least 8x8 with a channel, got {}x{}x{}'.format(h, w, c))
    if not 0 <= pos_fraction <= 1:
        raise DataError('pos_fraction must be in [0, 1]: {}'.format(pos_fraction))
    n_pos = int(math.floor(n * pos_fraction + 0.5))
    labels = numpy.zeros(n, dtype=numpy.uint8)
    labels[permutation(n, derive_seed(seed, 1))[:n_pos]] = 1

    rng = numpy.random.Generator(numpy.random.PCG64(seed))
    noise = rng.uniform(0.0, 1.0, size=(n, h, w, c))
    offsets = rng.integers(-jitter, jitter, size=(n, 2), endpoint=True)
    ys = numpy.arange(h).reshape(1, h, 1)
    xs = numpy.arange(w).reshape(1, 1, w)
    cy = ((h - 1) / 2 + offsets[:, 0]).reshape(n, 1, 1)
    cx = ((w - 1) / 2 + offsets[:, 1]).reshape(n, 1, 1)
    blob = amplitude * numpy.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * radius ** 2))
    noise += (blob * labels.reshape(n, 1, 1))[..., None]
    pixels = numpy.rint(numpy.clip(noise, 0.0, 1.0) * 255).astype(numpy.uint8)
    logger.info('generated %d synthetic %dx%dx%d patches (%d positive)', n, h, w, c, n_pos)
    return Dataset(pixels=pixels, labels=labels)

@attr.s(frozen=True, eq=False)
class Batch:
    images = attr.ib()
    labels = attr.ib()
    indices = attr.ib()

def batch_order(count, batch_size, epoch_seed):
    if count == 0:
        raise DataError('cannot batch an empty dataset')
    if batch_size < 1:
        raise ValueError('batch size must be positive: {}'.format(batch_size))
    order = permutation(count, epoch_seed)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]

def _make_batch(ds, indices, dtype):
    return Batch(
        images=densepatch.tensor.Tensor(ds.images(indices, dtype)),
        labels=ds.labels[indices].astype(numpy.float64),
        indices=indices,
    )

def batch_iter(ds, batch_size, epoch_seed, prefetch=False, depth=2, dtype=None):
    """Batches in a seeded order; each index appears exactly once per epoch.

    With `prefetch`, batches are assembled on a helper thread behind a queue
    of `depth` batches. The order is the same either way.
    """
    dtype = dtype or densepatch.tensor.default_dtype()
    order = batch_order(len(ds), batch_size, epoch_seed)
    if not prefetch:
        return (_make_batch(ds, indices, dtype) for indices in order)
    return _prefetched(ds, order, depth, dtype)

_DONE = object()

def _prefetched(ds, order, depth, dtype):
    q = queue.Queue(maxsize=max(1, depth))
    stop = threading.Event()

    def produce():
        try:
            for indices in order:
                if stop.is_set():
                    return
                q.put(_make_batch(ds, indices, dtype))
            q.put(_DONE)
        except Exception as e:
            q.put(e)

    worker = threading.Thread(target=produce, name='densepatch-prefetch', daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        # unblock a producer waiting on a full queue
        while worker.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                worker.join(0.01)

def export_labels(ds, destination):
    path = pathlib.Path(destination)
    with open(str(path), 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['index', 'label'])
        for i, label in enumerate(ds.labels):
            writer.writerow([i, int(label)])
    logger.info('wrote %d labels to %s', len(ds), path)
