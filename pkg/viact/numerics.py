# This file is part of ViACT.
# Copyright (c) 2026 ViACT developers
#
# ViACT is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# ViACT is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.
#
# You should have received a copy of the GNU Affero General Public License
# along with ViACT.  If not, see <http://www.gnu.org/licenses/>.

"""
Dense tensors with reverse-mode differentiation.

Tensors store float32. Every operation computes in float64 and rounds its result
back to float32, so reductions accumulate in double precision. An operation whose
output contains NaN or Inf raises NumericError.

Operations that see at least one input with ``requires_grad`` attach a :class:`Node`
to their output. :func:`backward` collects the nodes reachable from a scalar loss
into a :class:`GradTape`, replays it in reverse topological order and releases every
node it visited, so calling backward twice on the same graph is an error.
"""

import math
import threading
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from viact.exceptions import NumericError, ShapeError, UsageError


GELU_COEFF = 0.044715
GELU_SCALE = math.sqrt(2.0 / math.pi)

ADAMW_BETAS = (0.9, 0.999)
ADAMW_WEIGHT_DECAY = 0.05
ADAMW_EPS = 1e-8

LAYER_NORM_EPS = 1e-5

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad():
    "Operations inside this block do not record nodes."
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


# Tensors

class Tensor(object):

    """
    Row-major float32 array with an optional gradient.
    """

    def __init__(self, data, requires_grad=False, name=None):
        """
        :Args:
          - data: Anything numpy can turn into an array
          - requires_grad: Accumulate gradient into this tensor during backward (optional)
          - name: Name used in error messages and checkpoints (optional)
        """
        if isinstance(data, Tensor):
            data = data.data

        self.data = np.array(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise UsageError('item() needs a tensor with one element, got shape {}.'.format(self.shape))

        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError('Division is only defined by a constant.')
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __len__(self):
        return self.data.shape[0]

    def __str__(self):
        return '<Tensor:%s:%s>' % (self.name or '', 'x'.join(str(s) for s in self.shape))

    __repr__ = __str__


class Parameter(Tensor):

    "Tensor that is trained. Always requires gradient."

    def __init__(self, data, name=None):
        super(Parameter, self).__init__(data, requires_grad=True, name=name)

    def __str__(self):
        return '<Parameter:%s:%s>' % (self.name or '', 'x'.join(str(s) for s in self.shape))

    __repr__ = __str__


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# Recording

class Node(object):

    """
    One recorded operation: its inputs and the function mapping the output gradient
    to input gradients.
    """

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.released = False

    def release(self):
        self.backward_fn = None
        self.released = True

    def __str__(self):
        return '<Node:%s>' % self.op


class GradTape(object):

    """
    Ordered list of the nodes that produced a tensor, inputs before outputs.
    """

    def __init__(self, root):
        self.root = root
        self.nodes = self._collect(root)

    def _collect(self, root):
        if root.node is None:
            return []

        order = []
        visited = set()
        stack = [(root.node, False)]

        while stack:
            node, expanded = stack.pop()

            if expanded:
                order.append(node)
                continue

            if id(node) in visited:
                continue

            visited.add(id(node))
            stack.append((node, True))

            for inp in node.inputs:
                if inp.node is not None and id(inp.node) not in visited:
                    stack.append((inp.node, False))

        return order

    def replay(self, seed):
        """
        Propagates gradient `seed` of the root back to every leaf that requires gradient.
        Each node is visited exactly once and released afterwards.
        """
        for node in self.nodes:
            if node.released:
                raise UsageError('Graph for "{}" was already used by backward; run forward again.'.format(node.op))

        if self.root.node is None:
            _accumulate(self.root, seed)
            return

        pending = {id(self.root.node): seed}

        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)

            if grad is None:
                node.release()
                continue

            input_grads = node.backward_fn(grad)

            for inp, inp_grad in zip(node.inputs, input_grads):
                if inp_grad is None or not inp.requires_grad:
                    continue

                if inp.node is not None:
                    key = id(inp.node)
                    if key in pending:
                        pending[key] = pending[key] + inp_grad
                    else:
                        pending[key] = inp_grad
                else:
                    _accumulate(inp, inp_grad)

            node.release()


def _accumulate(tensor, grad):
    grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)

    if tensor.grad is None:
        tensor.grad = grad.astype(np.float32)
    else:
        tensor.grad = (tensor.grad.astype(np.float64) + grad).astype(np.float32)


def backward(loss):
    """
    Accumulates d(loss)/d(tensor) into ``tensor.grad`` for every tensor that requires
    gradient and contributed to `loss`.

    :Args:
      - loss: Scalar tensor
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise UsageError('backward() needs a scalar loss.')

    if not loss.requires_grad:
        raise UsageError('Loss does not depend on any tensor that requires gradient.')

    tape = GradTape(loss)
    tape.replay(np.ones(loss.shape, dtype=np.float64))


def _check_finite(op, values):
    if not np.all(np.isfinite(values)):
        raise NumericError('Operation "{}" produced non-finite values.'.format(op))


def _result(op, values, inputs, backward_fn):
    _check_finite(op, values)

    out = Tensor(values)

    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)

    return out


def _f64(tensor):
    return tensor.data.astype(np.float64)


def _unbroadcast(grad, shape):
    "Sums `grad` over the axes numpy broadcast to reach `shape`."
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)

    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError('{}: shapes {} and {} do not broadcast.'.format(op, a.shape, b.shape))


# Elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('add', a, b)

    def _backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _result('add', _f64(a) + _f64(b), (a, b), _backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('sub', a, b)

    def _backward(grad):
        return _unbroadcast(grad, a.shape), -_unbroadcast(grad, b.shape)

    return _result('sub', _f64(a) - _f64(b), (a, b), _backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast('mul', a, b)
    av, bv = _f64(a), _f64(b)

    def _backward(grad):
        return _unbroadcast(grad * bv, a.shape), _unbroadcast(grad * av, b.shape)

    return _result('mul', av * bv, (a, b), _backward)


def gelu(x):
    """
    GELU with the tanh approximation:
    0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    """
    x = as_tensor(x)
    xv = _f64(x)
    _check_finite('gelu', xv)

    inner = GELU_SCALE * (xv + GELU_COEFF * xv ** 3)
    t = np.tanh(inner)

    def _backward(grad):
        d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_COEFF * xv ** 2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t ** 2) * d_inner),)

    return _result('gelu', 0.5 * xv * (1.0 + t), (x,), _backward)


def sigmoid(x):
    x = as_tensor(x)
    s = expit(_f64(x))

    def _backward(grad):
        return (grad * s * (1.0 - s),)

    return _result('sigmoid', s, (x,), _backward)


# Linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError('matmul: cannot multiply {} by {}.'.format(a.shape, b.shape))

    av, bv = _f64(a), _f64(b)

    def _backward(grad):
        return grad @ bv.T, av.T @ grad

    return _result('matmul', av @ bv, (a, b), _backward)


def linear(x, weight, bias=None):
    """
    x @ weight + bias for x of shape (M, in), weight (in, out), bias (out,).
    """
    x, weight = as_tensor(x), as_tensor(weight)

    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError('linear: input {} does not match weight {}.'.format(x.shape, weight.shape))

    xv, wv = _f64(x), _f64(weight)
    out = xv @ wv
    inputs = [x, weight]

    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError('linear: bias {} does not match weight {}.'.format(bias.shape, weight.shape))
        out = out + _f64(bias)
        inputs.append(bias)

    def _backward(grad):
        grads = [grad @ wv.T, xv.T @ grad]
        if bias is not None:
            grads.append(grad.sum(axis=0))
        return grads

    return _result('linear', out, inputs, _backward)


# Shape

def reshape(x, shape):
    x = as_tensor(x)
    original = x.shape

    try:
        values = _f64(x).reshape(shape)
    except ValueError:
        raise ShapeError('reshape: cannot view {} as {}.'.format(original, shape))

    def _backward(grad):
        return (grad.reshape(original),)

    return _result('reshape', values, (x,), _backward)


def take_rows(x, index):
    """
    Rows of x selected by integer `index` (repeats allowed). Gradient is scattered back.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError('take_rows: index out of range for {} rows.'.format(x.shape[0]))

    def _backward(grad):
        full = np.zeros(x.shape, dtype=np.float64)
        np.add.at(full, index, grad)
        return (full,)

    return _result('take_rows', _f64(x)[index], (x,), _backward)


def concat_rows(tensors):
    tensors = [as_tensor(t) for t in tensors]

    tails = set(t.shape[1:] for t in tensors)
    if len(tails) != 1:
        raise ShapeError('concat_rows: trailing shapes differ {}.'.format(sorted(tails)))

    sizes = [t.shape[0] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _backward(grad):
        return [grad[bounds[n]:bounds[n + 1]] for n in range(len(tensors))]

    return _result('concat_rows', np.concatenate([_f64(t) for t in tensors], axis=0), tensors, _backward)


def repeat_rows(x, count):
    "Stacks vector (or 1 x d matrix) x `count` times into a count x d matrix."
    x = as_tensor(x)
    row = _f64(x).reshape(1, -1)

    def _backward(grad):
        return (grad.sum(axis=0).reshape(x.shape),)

    return _result('repeat_rows', np.repeat(row, count, axis=0), (x,), _backward)


# Reductions

def sum(x):
    x = as_tensor(x)

    def _backward(grad):
        return (np.broadcast_to(grad, x.shape).copy(),)

    return _result('sum', np.array(_f64(x).sum()), (x,), _backward)


def mean(x):
    x = as_tensor(x)
    count = float(x.size)

    def _backward(grad):
        return (np.broadcast_to(grad / count, x.shape).copy(),)

    return _result('mean', np.array(_f64(x).mean()), (x,), _backward)


# Normalisation and attention

def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    """
    Normalises the last dimension of x to zero mean and unit variance, then applies
    gamma and beta. Rows with zero variance map to beta.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]

    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError('layer_norm: gamma {} / beta {} do not match width {}.'.format(
            gamma.shape, beta.shape, width))

    xv = _f64(x)
    mu = xv.mean(axis=-1, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv_std
    gv = _f64(gamma)

    def _backward(grad):
        dxhat = grad * gv
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        rows = grad.reshape(-1, width)
        return (dx,
                (rows * xhat.reshape(-1, width)).sum(axis=0),
                rows.sum(axis=0))

    return _result('layer_norm', xhat * gv + _f64(beta), (x, gamma, beta), _backward)


def _softmax(values):
    shifted = values - values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x):
    "Softmax over the last dimension, max-subtracted."
    x = as_tensor(x)
    s = _softmax(_f64(x))

    def _backward(grad):
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)

    return _result('softmax_rows', s, (x,), _backward)


def scaled_dot_attention(q, k, v, heads, return_weights=False):
    """
    Multi-head attention without mask. Q, K and V are M x d matrices already projected
    by the caller; head h uses columns [h*d/heads, (h+1)*d/heads). Heads are concatenated
    back into an M x d matrix, output projection is left to the caller.

    :Args:
      - q, k, v: Query, key and value tensors
      - heads: Number of heads, must divide d
      - return_weights: Also return the float32 heads x M x M attention weights

    :Returns:
      Output tensor, or (output, weights) when `return_weights` is set.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)

    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError('attention: Q {}, K {}, V {} must be equal M x d.'.format(q.shape, k.shape, v.shape))

    tokens, width = q.shape

    if heads < 1 or width % heads != 0:
        raise ShapeError('attention: width {} is not divisible by {} heads.'.format(width, heads))

    head_dim = width // heads
    scale = 1.0 / math.sqrt(head_dim)

    # heads x M x head_dim
    qh = _f64(q).reshape(tokens, heads, head_dim).transpose(1, 0, 2)
    kh = _f64(k).reshape(tokens, heads, head_dim).transpose(1, 0, 2)
    vh = _f64(v).reshape(tokens, heads, head_dim).transpose(1, 0, 2)

    weights = _softmax(np.matmul(qh, kh.transpose(0, 2, 1)) * scale)
    out = np.matmul(weights, vh).transpose(1, 0, 2).reshape(tokens, width)

    def _backward(grad):
        gh = grad.reshape(tokens, heads, head_dim).transpose(1, 0, 2)
        d_weights = np.matmul(gh, vh.transpose(0, 2, 1))
        d_v = np.matmul(weights.transpose(0, 2, 1), gh)
        d_scores = weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True)) * scale
        d_q = np.matmul(d_scores, kh)
        d_k = np.matmul(d_scores.transpose(0, 2, 1), qh)

        def _merge(h):
            return h.transpose(1, 0, 2).reshape(tokens, width)

        return _merge(d_q), _merge(d_k), _merge(d_v)

    result = _result('attention', out, (q, k, v), _backward)

    if return_weights:
        return result, weights.astype(np.float32)

    return result


# Losses

def _check_pair(op, pred, target):
    if pred.shape != target.shape:
        raise ShapeError('{}: prediction {} and target {} differ in shape.'.format(op, pred.shape, target.shape))


def mse(pred, target):
    "Mean of squared differences."
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair('mse', pred, target)
    diff = _f64(pred) - _f64(target)
    count = float(diff.size)

    def _backward(grad):
        g = grad * 2.0 * diff / count
        return g, -g

    return _result('mse', np.array((diff ** 2).mean()), (pred, target), _backward)


def l1(pred, target, reduction='sum'):
    """
    Sum (default) or mean of absolute differences. The subgradient at zero is zero.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair('l1', pred, target)

    if reduction not in ('sum', 'mean'):
        raise UsageError('l1: reduction must be "sum" or "mean", got "{}".'.format(reduction))

    diff = _f64(pred) - _f64(target)
    scale = 1.0 if reduction == 'sum' else 1.0 / diff.size

    def _backward(grad):
        g = grad * np.sign(diff) * scale
        return g, -g

    return _result('l1', np.array(np.abs(diff).sum() * scale), (pred, target), _backward)


def bce_with_logit(logit, label):
    """
    Binary cross entropy of sigmoid(logit) against labels in {0, 1}, averaged.
    """
    logit = as_tensor(logit)
    label = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=np.float64)

    if label.size != logit.size:
        raise ShapeError('bce: logit {} and label {} differ in shape.'.format(logit.shape, label.shape))
    label = label.reshape(logit.shape)

    if not np.all((label == 0.0) | (label == 1.0)):
        raise UsageError('bce: labels must be 0 or 1.')

    z = _f64(logit)
    count = float(z.size)
    loss = (np.maximum(z, 0.0) - z * label + np.log1p(np.exp(-np.abs(z)))).mean()

    def _backward(grad):
        return (grad * (expit(z) - label) / count,)

    return _result('bce', np.array(loss), (logit,), _backward)


# Optimizer

class AdamWState(object):

    """
    Moment buffers and step counter for :func:`adamw_step`.
    """

    def __init__(self, params, betas=ADAMW_BETAS, weight_decay=ADAMW_WEIGHT_DECAY, eps=ADAMW_EPS,
                 no_decay=()):
        """
        :Args:
          - params: Ordered mapping of name to Tensor
          - betas: First and second moment decay (optional)
          - weight_decay: Decoupled weight decay (optional)
          - eps: Denominator constant (optional)
          - no_decay: Parameter names excluded from weight decay (optional)
        """
        self.betas = (float(betas[0]), float(betas[1]))
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.no_decay = set(no_decay)
        self.step = 0

        self.m = OrderedDict((name, np.zeros(p.shape, dtype=np.float32)) for name, p in params.items())
        self.v = OrderedDict((name, np.zeros(p.shape, dtype=np.float32)) for name, p in params.items())

    def __str__(self):
        return '<AdamWState:step=%d>' % self.step


def adamw_step(params, grads, state, lr):
    """
    One AdamW update applied in place. Weight decay is applied to the parameter, not
    added to the gradient; moments are bias corrected.

    :Args:
      - params: Ordered mapping of name to Tensor
      - grads: Mapping of name to gradient array; missing names count as zero gradient
      - state: Instance of AdamWState
      - lr: Learning rate, must be positive

    :Returns:
      Tuple (params, state).
    """
    if not lr > 0:
        raise UsageError('Learning rate must be positive, got {}.'.format(lr))

    beta1, beta2 = state.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step

    for name, param in params.items():
        if name not in state.m:
            raise UsageError('Optimizer has no moments for "{}".'.format(name))

        grad = grads.get(name)
        if grad is None:
            grad = np.zeros(param.shape, dtype=np.float64)
        else:
            grad = np.asarray(grad, dtype=np.float64)

        if grad.shape != param.shape or state.m[name].shape != param.shape:
            raise ShapeError('adamw: "{}" has shape {}, gradient {}.'.format(name, param.shape, grad.shape))

        m = beta1 * state.m[name].astype(np.float64) + (1.0 - beta1) * grad
        v = beta2 * state.v[name].astype(np.float64) + (1.0 - beta2) * grad ** 2

        value = param.data.astype(np.float64)
        if name not in state.no_decay:
            value = value - lr * state.weight_decay * value

        value = value - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)

        _check_finite('adamw', value)

        param.data[...] = value
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)

    return params, state


class AdamW(object):

    """
    Convenience wrapper binding parameters to an AdamWState.
    """

    def __init__(self, params, **kwargs):
        self.params = OrderedDict(params)
        self.state = AdamWState(self.params, **kwargs)

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def step(self, lr):
        grads = dict((name, p.grad) for name, p in self.params.items() if p.grad is not None)
        adamw_step(self.params, grads, self.state, lr)


# Gradient checking

def gradient_errors(fn, inputs, h=1e-3):
    """
    Relative error between backward gradients and central finite differences, one value
    per input: ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8).

    :Args:
      - fn: Callable returning a scalar Tensor from `inputs`
      - inputs: List of Tensors requiring gradient; their data is perturbed in place
      - h: Step
    """
    for t in inputs:
        t.zero_grad()

    backward(fn(*inputs))
    analytic = [t.grad.astype(np.float64) if t.grad is not None else np.zeros(t.shape) for t in inputs]

    errors = []

    with no_grad():
        for t, grad in zip(inputs, analytic):
            numeric = np.zeros(t.shape, dtype=np.float64)
            flat = t.data.reshape(-1)

            for n in range(flat.size):
                original = flat[n]
                flat[n] = original + np.float32(h)
                plus = fn(*inputs).item()
                flat[n] = original - np.float32(h)
                minus = fn(*inputs).item()
                flat[n] = original
                numeric.reshape(-1)[n] = (plus - minus) / (2.0 * h)

            scale = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-8)
            errors.append(float(np.linalg.norm(grad - numeric) / scale))

    return errors


def gradcheck(fn, inputs, h=1e-3, rtol=1e-2):
    return all(err <= rtol for err in gradient_errors(fn, inputs, h))
