import collections
import enum
import math

import attr
import numpy

from densepatch.errors import ConfigError, ShapeError

class OptimizerKind(enum.Enum):
    SGD = 'sgd'
    ADAM = 'adam'
    RADAM = 'radam'

@attr.s(eq=False)
class OptimState:
    kind = attr.ib(default=OptimizerKind.RADAM, converter=OptimizerKind)
    lr = attr.ib(default=1e-4)
    beta1 = attr.ib(default=0.9)
    beta2 = attr.ib(default=0.999)
    epsilon = attr.ib(default=1e-8)
    weight_decay = attr.ib(default=0.0)
    # only used by sgd; 0 gives plain gradient descent
    momentum = attr.ib(default=0.9)
    t = attr.ib(default=0)
    # first moments (velocity for sgd) and second moments, by parameter name
    m = attr.ib(factory=collections.OrderedDict)
    v = attr.ib(factory=collections.OrderedDict)

    @lr.validator
    @epsilon.validator
    def _check_positive(self, attribute, value):
        if not value > 0:
            raise ConfigError('{} must be positive: {}'.format(attribute.name, value))

    @beta1.validator
    @beta2.validator
    @momentum.validator
    def _check_unit(self, attribute, value):
        if not 0 <= value < 1:
            raise ConfigError('{} must be in [0, 1): {}'.format(attribute.name, value))

    @weight_decay.validator
    def _check_decay(self, attribute, value):
        if value < 0:
            raise ConfigError('weight_decay must be non-negative: {}'.format(value))

    def hyperparameters(self):
        return collections.OrderedDict([
            ('lr', self.lr),
            ('beta1', self.beta1),
            ('beta2', self.beta2),
            ('epsilon', self.epsilon),
            ('weight_decay', self.weight_decay),
            ('momentum', self.momentum),
        ])

def _pairs(params, grads, state, slots):
    # yields (param array, grad array, moment arrays...) with shapes checked
    for name, p in params.items():
        if name in grads:
            g = grads[name].data
            if g.shape != p.shape:
                raise ShapeError('gradient for {} has shape {}, parameter has {}'.format(name, list(g.shape), list(p.shape)))
        else:
            g = numpy.zeros(p.shape, dtype=p.dtype)
        moments = []
        for slot in slots:
            store = getattr(state, slot)
            if name not in store:
                store[name] = numpy.zeros(p.shape, dtype=p.dtype)
            elif store[name].shape != p.shape:
                raise ShapeError('moment for {} has shape {}, parameter has {}'.format(name, list(store[name].shape), list(p.shape)))
            moments.append(store[name])
        yield (p.data, g) + tuple(moments)

def _decay(p, state):
    # decoupled decay, applied before the update proper
    if state.weight_decay:
        p *= 1 - state.lr * state.weight_decay

def sgd_step(params, grads, state):
    state.t += 1
    for p, g, velocity in _pairs(params, grads, state, ['m']):
        _decay(p, state)
        velocity *= state.momentum
        velocity += g
        p -= state.lr * velocity

def _moments(g, m, v, state):
    m *= state.beta1
    m += (1 - state.beta1) * g
    v *= state.beta2
    v += (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1 ** state.t)
    v_hat = v / (1 - state.beta2 ** state.t)
    return m_hat, v_hat

def adam_step(params, grads, state):
    state.t += 1
    for p, g, m, v in _pairs(params, grads, state, ['m', 'v']):
        _decay(p, state)
        m_hat, v_hat = _moments(g, m, v, state)
        p -= state.lr * m_hat / (numpy.sqrt(v_hat) + state.epsilon)

def rectification_term(t, beta2):
    """Variance rectification factor r_t, or None while rho_t <= 4."""
    if not 0 <= beta2 < 1:
        raise ValueError('beta2 must be in [0, 1): {}'.format(beta2))
    if t < 1:
        raise ValueError('step count must be at least 1: {}'.format(t))
    rho_inf = 2 / (1 - beta2) - 1
    beta2_t = beta2 ** t
    rho_t = rho_inf - 2 * t * beta2_t / (1 - beta2_t)
    if rho_t <= 4:
        return None
    return math.sqrt(((rho_t - 4) * (rho_t - 2) * rho_inf) / ((rho_inf - 4) * (rho_inf - 2) * rho_t))

def radam_step(params, grads, state):
    state.t += 1
    r_t = rectification_term(state.t, state.beta2)
    for p, g, m, v in _pairs(params, grads, state, ['m', 'v']):
        _decay(p, state)
        m_hat, v_hat = _moments(g, m, v, state)
        if r_t is None:
            # second moment still unreliable: momentum-only update
            p -= state.lr * m_hat
        else:
            p -= state.lr * r_t * m_hat / (numpy.sqrt(v_hat) + state.epsilon)

STEPS = {
    OptimizerKind.SGD: sgd_step,
    OptimizerKind.ADAM: adam_step,
    OptimizerKind.RADAM: radam_step,
}

def step(params, grads, state):
    STEPS[state.kind](params, grads, state)
