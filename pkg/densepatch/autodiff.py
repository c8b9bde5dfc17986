import enum
import logging

import attr
import numpy

from densepatch.errors import NumericalError, ShapeError, TapeError
import densepatch.tensor
from densepatch.tensor import Tensor

logger = logging.getLogger(__name__)

class OpKind(enum.IntEnum):
    LEAF = 1
    CONSTANT = 2
    ADD = 3
    MUL = 4
    SCALE = 5
    SUM = 6
    MEAN = 7
    MATMUL = 8
    CONCAT = 9
    SLICE = 10
    CONV2D = 11
    BATCHNORM = 12
    RELU = 13
    AVGPOOL2 = 14
    MAXPOOL2 = 15
    GLOBAL_AVGPOOL = 16
    LINEAR = 17
    BCE = 18

@attr.s(eq=False)
class TapeNode:
    op_kind = attr.ib()
    input_ids = attr.ib(converter=tuple)
    output = attr.ib()
    saved = attr.ib(factory=dict)
    name = attr.ib(default=None)
    requires_grad = attr.ib(default=False)

# op kind -> fn(node, upstream gradient, tape) -> one gradient (or None) per input
BACKWARD = {}

def register_backward(kind):
    def wrap(f):
        BACKWARD[kind] = f
        return f
    return wrap

class Tape:
    """Define-by-run record of every operation, in topological order.

    Nodes are referred to by their integer position on the tape. A tape
    belongs to one thread; build a fresh one per forward pass.
    """

    def __init__(self):
        self.nodes = []
        self.params = {}

    def __len__(self):
        return len(self.nodes)

    def node(self, ref):
        if not isinstance(ref, (int, numpy.integer)) or not 0 <= ref < len(self.nodes):
            raise TapeError('no node {} on a tape of length {}'.format(ref, len(self.nodes)))
        return self.nodes[ref]

    def value(self, ref):
        return self.node(ref).output

    def record(self, op_kind, inputs, output, saved=None, name=None):
        inputs = tuple(inputs)
        for ref in inputs:
            self.node(ref)
        if not isinstance(output, Tensor):
            output = Tensor(output)
        requires_grad = op_kind == OpKind.LEAF or any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(TapeNode(
            op_kind=op_kind,
            input_ids=inputs,
            output=output,
            saved=saved or {},
            name=name,
            requires_grad=requires_grad,
        ))
        return len(self.nodes) - 1

    def leaf(self, tensor, name=None):
        return self.record(OpKind.LEAF, (), tensor, name=name)

    def constant(self, tensor):
        return self.record(OpKind.CONSTANT, (), tensor)

    def param(self, name, tensor):
        # one leaf per parameter per tape, so fan-out gradients accumulate
        if name not in self.params:
            self.params[name] = self.leaf(tensor, name=name)
        elif self.nodes[self.params[name]].output is not tensor:
            raise TapeError('parameter name {} is already bound to another tensor'.format(name))
        return self.params[name]

@attr.s(eq=False)
class GradStore:
    tape = attr.ib()
    grads = attr.ib(factory=dict)

    def accumulate(self, ref, grad):
        value = self.tape.value(ref)
        if grad.shape != value.shape:
            raise ShapeError('gradient shape {} does not match value shape {} at node {}'.format(list(grad.shape), list(value.shape), ref))
        if ref in self.grads:
            self.grads[ref] = self.grads[ref] + grad
        else:
            self.grads[ref] = grad

    def __contains__(self, ref):
        return ref in self.grads

    def __getitem__(self, ref):
        if ref in self.grads:
            return Tensor(self.grads[ref])
        # unreachable from the loss
        value = self.tape.value(ref)
        return Tensor(numpy.zeros(value.shape, dtype=value.dtype))

    def param(self, name):
        try:
            return self[self.tape.params[name]]
        except KeyError:
            raise TapeError('parameter {} was never used on this tape'.format(name))

    def named(self):
        return {name: self[ref] for name, ref in self.tape.params.items()}

def backward(tape, loss):
    loss_node = tape.node(loss)
    if loss_node.output.size != 1:
        raise ShapeError('backward needs a scalar loss, got shape {}'.format(list(loss_node.output.shape)))

    store = GradStore(tape)
    pending = {loss: numpy.ones(loss_node.output.shape, dtype=loss_node.output.dtype)}
    for ref in range(loss, -1, -1):
        grad = pending.pop(ref, None)
        if grad is None:
            continue
        node = tape.nodes[ref]
        if node.op_kind == OpKind.LEAF:
            store.accumulate(ref, grad)
            continue
        if node.op_kind == OpKind.CONSTANT:
            continue
        input_grads = BACKWARD[node.op_kind](node, grad, tape)
        for src, g in zip(node.input_ids, input_grads):
            if g is None or not tape.nodes[src].requires_grad:
                continue
            if src in pending:
                pending[src] = pending[src] + g
            else:
                pending[src] = g
    return store

def add(tape, a, b):
    x, y = tape.value(a).data, tape.value(b).data
    if x.shape != y.shape:
        raise ShapeError('add needs equal shapes, got {} and {}'.format(list(x.shape), list(y.shape)))
    return tape.record(OpKind.ADD, (a, b), x + y)

@register_backward(OpKind.ADD)
def _add_backward(node, grad, tape):
    # the gradient reaches both branches unchanged
    return [grad, grad]

def mul(tape, a, b):
    x, y = tape.value(a).data, tape.value(b).data
    if x.shape != y.shape:
        raise ShapeError('mul needs equal shapes, got {} and {}'.format(list(x.shape), list(y.shape)))
    return tape.record(OpKind.MUL, (a, b), x * y)

@register_backward(OpKind.MUL)
def _mul_backward(node, grad, tape):
    x, y = (tape.value(i).data for i in node.input_ids)
    return [grad * y, grad * x]

def scale(tape, a, factor):
    return tape.record(OpKind.SCALE, (a,), tape.value(a).data * factor, saved=dict(factor=factor))

@register_backward(OpKind.SCALE)
def _scale_backward(node, grad, tape):
    return [grad * node.saved['factor']]

def sum_all(tape, a):
    x = tape.value(a).data
    return tape.record(OpKind.SUM, (a,), numpy.asarray(x.sum(), dtype=x.dtype).reshape(()))

@register_backward(OpKind.SUM)
def _sum_backward(node, grad, tape):
    shape = tape.value(node.input_ids[0]).shape
    return [numpy.broadcast_to(grad, shape).copy()]

def mean_all(tape, a):
    x = tape.value(a).data
    return tape.record(OpKind.MEAN, (a,), numpy.asarray(x.mean(), dtype=x.dtype).reshape(()))

@register_backward(OpKind.MEAN)
def _mean_backward(node, grad, tape):
    x = tape.value(node.input_ids[0])
    return [numpy.full(x.shape, grad / x.size, dtype=x.dtype)]

def matmul(tape, a, b):
    out = densepatch.tensor.matmul(tape.value(a), tape.value(b))
    return tape.record(OpKind.MATMUL, (a, b), out)

@register_backward(OpKind.MATMUL)
def _matmul_backward(node, grad, tape):
    x, y = (tape.value(i).data for i in node.input_ids)
    return [densepatch.tensor._matmul(grad, y.T), densepatch.tensor._matmul(x.T, grad)]

def concat_channels(tape, parts):
    out = densepatch.tensor.concat_channels([tape.value(p) for p in parts])
    bounds = []
    start = 0
    for p in parts:
        stop = start + tape.value(p).shape[1]
        bounds.append((start, stop))
        start = stop
    return tape.record(OpKind.CONCAT, parts, out, saved=dict(bounds=bounds))

@register_backward(OpKind.CONCAT)
def _concat_backward(node, grad, tape):
    # split the incoming gradient back to each source by its channel range
    return [numpy.ascontiguousarray(grad[:, start:stop]) for start, stop in node.saved['bounds']]

def slice_channels(tape, a, start, stop):
    out = densepatch.tensor.slice_channels(tape.value(a), start, stop)
    return tape.record(OpKind.SLICE, (a,), out, saved=dict(start=start, stop=stop))

@register_backward(OpKind.SLICE)
def _slice_backward(node, grad, tape):
    x = tape.value(node.input_ids[0])
    full = numpy.zeros(x.shape, dtype=grad.dtype)
    full[:, node.saved['start']:node.saved['stop']] = grad
    return [full]

def _scalar_loss(fragment, params):
    tape = Tape()
    ids = {name: tape.param(name, t) for name, t in params.items()}
    loss = fragment(tape, ids)
    return tape, ids, loss

def grad_check(fragment, params, eps=1e-4):
    """Compare analytic gradients against central finite differences.

    `fragment(tape, ids)` must rebuild the computation on the given tape
    from the parameter leaves `ids` (name -> node) and return the scalar
    loss node. Every coordinate of every tensor in `params` is perturbed by
    eps * max(1, |value|) in both directions; the result is the largest
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    params = dict(params)
    for name, t in params.items():
        if t.dtype != numpy.float64:
            raise NumericalError('grad_check needs double precision, parameter {} is {}'.format(name, t.dtype.name))

    with densepatch.tensor.precision('double'):
        tape, ids, loss = _scalar_loss(fragment, params)
        grads = backward(tape, loss)

        worst = 0.0
        for name, t in params.items():
            analytic = grads.param(name).data.reshape(-1)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                h = eps * max(1.0, abs(orig))
                flat[i] = orig + h
                plus = _evaluate(fragment, params)
                flat[i] = orig - h
                minus = _evaluate(fragment, params)
                flat[i] = orig
                if not (numpy.isfinite(plus) and numpy.isfinite(minus)):
                    raise NumericalError('non-finite loss while perturbing {}[{}]'.format(name, i))
                numeric = (plus - minus) / (2 * h)
                err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
                if err > worst:
                    worst = err
        logger.debug('grad_check over %d tensors: max_rel_err=%g', len(params), worst)
    return float(worst)

def _evaluate(fragment, params):
    tape, _, loss = _scalar_loss(fragment, params)
    return tape.value(loss).item()
