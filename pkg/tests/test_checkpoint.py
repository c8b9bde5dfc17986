import numpy
import numpy.testing
import pytest

from densepatch.architectures import Classifier, ModelConfig
from densepatch.checkpoint import Checkpoint
from densepatch.errors import FormatError
from densepatch.optimizers import OptimState
import densepatch.checkpoint
import densepatch.dataset
import densepatch.optimizers

CONFIG = ModelConfig(input_channels=4, growth_rate=2, block_layer_counts=(1, 1), input_hw=(8, 8))

def trained_checkpoint():
    model = Classifier.build(CONFIG, seed=3)
    state = OptimState(kind='radam', lr=1e-3)
    grads = {name: t.copy() for name, t in model.params.trainable().items()}
    for _ in range(2):
        densepatch.optimizers.step(model.params.trainable(), grads, state)
    return Checkpoint(config=CONFIG, params=model.params, optimizer=state, batches_processed=2)

def test_round_trip_is_byte_identical(tmp_path):
    ckpt = trained_checkpoint()
    path = tmp_path / 'a.pckp'
    ckpt.save(path)
    loaded = Checkpoint.load(path)
    again = tmp_path / 'b.pckp'
    loaded.save(again)
    assert path.read_bytes() == again.read_bytes()

def test_round_trip_contents():
    ckpt = trained_checkpoint()
    loaded = Checkpoint.loads(ckpt.dumps())
    assert loaded.config == CONFIG
    assert loaded.config_hash == ckpt.config_hash
    assert loaded.batches_processed == 2
    assert loaded.params.names() == ckpt.params.names()
    assert loaded.params.buffers == ckpt.params.buffers
    for name in ckpt.params:
        numpy.testing.assert_array_equal(loaded.params[name].data, ckpt.params[name].data)
        assert loaded.params[name].dtype == ckpt.params[name].dtype

def test_optimizer_state_round_trip():
    ckpt = trained_checkpoint()
    opt = Checkpoint.loads(ckpt.dumps()).optimizer
    assert opt.kind == ckpt.optimizer.kind
    assert opt.t == 2
    assert opt.hyperparameters() == ckpt.optimizer.hyperparameters()
    assert list(opt.m) == list(ckpt.optimizer.m)
    assert list(opt.v) == list(ckpt.optimizer.v)
    for name in opt.m:
        numpy.testing.assert_array_equal(opt.m[name], ckpt.optimizer.m[name])
        assert opt.m[name].dtype == ckpt.optimizer.m[name].dtype
    for name in opt.v:
        numpy.testing.assert_array_equal(opt.v[name], ckpt.optimizer.v[name])

def test_without_optimizer():
    ckpt = Checkpoint(config=CONFIG, params=Classifier.build(CONFIG, seed=0).params)
    assert Checkpoint.loads(ckpt.dumps()).optimizer is None

def test_hash_is_stable():
    assert densepatch.checkpoint.config_hash(CONFIG) == densepatch.checkpoint.config_hash(ModelConfig.from_dict(CONFIG.to_dict()))
    assert densepatch.checkpoint.config_hash(CONFIG) != densepatch.checkpoint.config_hash(ModelConfig())

def test_corrupted_config_block():
    data = bytearray(trained_checkpoint().dumps())
    # first byte of the config text
    data[10] ^= 0x20
    with pytest.raises(FormatError):
        Checkpoint.loads(bytes(data))

def test_bad_magic():
    data = bytearray(trained_checkpoint().dumps())
    data[:4] = b'NOPE'
    with pytest.raises(FormatError):
        Checkpoint.loads(bytes(data))

def test_truncated_and_trailing():
    data = trained_checkpoint().dumps()
    with pytest.raises(FormatError):
        Checkpoint.loads(data[:-3])
    with pytest.raises(FormatError):
        Checkpoint.loads(data + b'\x00')

def test_tensors_must_match_config():
    ckpt = trained_checkpoint()
    wrong = Checkpoint(config=ModelConfig(input_channels=4, growth_rate=3, block_layer_counts=(1, 1), input_hw=(8, 8)), params=ckpt.params)
    with pytest.raises(FormatError):
        Checkpoint.loads(wrong.dumps())

def test_loaded_model_predicts_identically():
    ckpt = trained_checkpoint()
    ds = densepatch.dataset.synth_generate(12, 8, 8, 1, 0.5, seed=2)
    images = ds.images()
    before = ckpt.model().scores(images, batch_size=5)
    after = Checkpoint.loads(ckpt.dumps()).model().scores(images, batch_size=5)
    numpy.testing.assert_array_equal(before, after)
