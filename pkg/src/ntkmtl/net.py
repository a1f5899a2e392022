"""Shared-trunk multi-head MLP with hand-written backprop.

All parameters of the trunk live in one flat vector ``theta``; each layer's
weight and bias are reshaped *views* into it, so in-place updates of
``theta`` are seen by the layers and vice versa.  Heads are organised the
same way, one flat vector per task.

Layer weights are stored as (fan_out, fan_in) and applied as ``a @ W.T + b``
on row-major batches of shape (samples, features).
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputValidationError

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass(frozen=True)
class HeadSpec:
    hidden: tuple = ()
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class NetSpec:
    """Architecture of an MtlNet.

    ``trunk_layers`` lists widths from the input up to the shared
    representation, so ``trunk_layers[0] == input_dim`` and
    ``trunk_layers[-1] == repr_dim``.  Every trunk layer is followed by the
    activation, including the one producing ``z``.  Heads are indexed by
    position (the task id).
    """

    input_dim: int
    trunk_layers: tuple
    repr_dim: int
    heads: tuple
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "trunk_layers", tuple(int(w) for w in self.trunk_layers))
        heads = tuple(h if isinstance(h, HeadSpec) else HeadSpec(**h) for h in self.heads)
        object.__setattr__(self, "heads", heads)
        self.validate()

    def validate(self):
        if self.activation not in ACTIVATIONS:
            raise InputValidationError(f"unknown activation {self.activation!r}")
        if self.repr_dim < 1:
            raise InputValidationError("repr_dim must be >= 1")
        if len(self.trunk_layers) < 2:
            raise InputValidationError("trunk_layers needs at least an input and an output width")
        if self.trunk_layers[0] != self.input_dim or self.trunk_layers[-1] != self.repr_dim:
            raise InputValidationError(
                "trunk_layers must start at input_dim and end at repr_dim, got "
                f"{self.trunk_layers} for input_dim={self.input_dim}, repr_dim={self.repr_dim}"
            )
        if len(self.heads) < 1:
            raise InputValidationError("need at least one head")
        widths = list(self.trunk_layers)
        for h in self.heads:
            widths += list(h.hidden) + [h.output_dim]
        if min(widths) < 1:
            raise InputValidationError("zero-width layer")

    @property
    def k(self):
        return len(self.heads)

    def trunk_shapes(self):
        w = self.trunk_layers
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    def head_shapes(self, task_id):
        h = self.heads[task_id]
        w = [self.repr_dim, *h.hidden, h.output_dim]
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    def to_dict(self):
        d = asdict(self)
        d["trunk_layers"] = list(self.trunk_layers)
        d["heads"] = [{"hidden": list(h.hidden), "output_dim": h.output_dim} for h in self.heads]
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


def _n_params(shapes):
    return sum(o * i + o for o, i in shapes)


def _views(flat, shapes):
    out, pos = [], 0
    for o, i in shapes:
        W = flat[pos : pos + o * i].reshape(o, i)
        pos += o * i
        b = flat[pos : pos + o]
        pos += o
        out.append((W, b))
    return out


def _act(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    return x


def _act_grad(name, pre, post):
    if name == "tanh":
        return 1.0 - post * post
    if name == "relu":
        return (pre > 0).astype(pre.dtype)  # derivative at 0 is 0
    return np.ones_like(pre)


class MtlNet:
    def __init__(self, spec, theta, head_params):
        self.spec = spec
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (_n_params(spec.trunk_shapes()),):
            raise InputValidationError("theta size does not match spec")
        if len(head_params) != spec.k:
            raise InputValidationError("head parameter count does not match spec")
        heads = []
        for t, hp in enumerate(head_params):
            hp = np.ascontiguousarray(hp, dtype=np.float64)
            if hp.shape != (_n_params(spec.head_shapes(t)),):
                raise InputValidationError(f"head {t} size does not match spec")
            heads.append(hp)
        if not np.all(np.isfinite(theta)) or not all(np.all(np.isfinite(h)) for h in heads):
            raise InputValidationError("parameters must be finite")
        self.theta = theta
        self.head_params = heads
        self.trunk = _views(self.theta, spec.trunk_shapes())
        self.heads = [_views(h, spec.head_shapes(t)) for t, h in enumerate(heads)]

    @property
    def k(self):
        return self.spec.k

    @property
    def n_shared(self):
        return self.theta.size

    def copy(self):
        return MtlNet(self.spec, self.theta.copy(), [h.copy() for h in self.head_params])

    def __repr__(self):
        return f"MtlNet(k={self.k}, |theta|={self.n_shared}, heads={[h.size for h in self.head_params]})"


def init(spec):
    """Scaled-normal initialisation, std = 1/sqrt(fan_in) for weights and biases."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    def draw(shapes):
        parts = []
        for o, i in shapes:
            std = 1.0 / np.sqrt(i)
            parts.append(rng.normal(0.0, std, size=o * i))
            parts.append(rng.normal(0.0, std, size=o))
        return np.concatenate(parts)

    theta = draw(spec.trunk_shapes())
    heads = [draw(spec.head_shapes(t)) for t in range(spec.k)]
    return MtlNet(spec, theta, heads)


def param_count(spec):
    return _n_params(spec.trunk_shapes()) + sum(_n_params(spec.head_shapes(t)) for t in range(spec.k))


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    trunk_acts: list  # activations, trunk_acts[0] is the input, trunk_acts[-1] is z
    trunk_pre: list
    head_acts: list  # per task: activations, [0] is z, [-1] is the output
    head_pre: list

    @property
    def z(self):
        return self.trunk_acts[-1]

    @property
    def outputs(self):
        return [acts[-1] for acts in self.head_acts]


def _check_inputs(net, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.spec.input_dim:
        raise InputValidationError(
            f"inputs must have shape (m, {net.spec.input_dim}), got {np.shape(inputs)}"
        )
    return x


def forward_trunk(net, inputs):
    x = _check_inputs(net, inputs)
    act = net.spec.activation
    acts, pres = [x], []
    a = x
    for W, b in net.trunk:
        pre = a @ W.T + b
        a = _act(act, pre)
        pres.append(pre)
        acts.append(a)
    return acts, pres


def forward_head(net, task_id, z):
    act = net.spec.activation
    acts, pres = [z], []
    a = z
    layers = net.heads[task_id]
    for li, (W, b) in enumerate(layers):
        pre = a @ W.T + b
        a = pre if li == len(layers) - 1 else _act(act, pre)
        pres.append(pre)
        acts.append(a)
    return acts, pres


def forward(net, inputs):
    acts, pres = forward_trunk(net, inputs)
    z = acts[-1]
    head_acts, head_pre = [], []
    for t in range(net.k):
        ha, hp = forward_head(net, t, z)
        head_acts.append(ha)
        head_pre.append(hp)
    return ForwardTrace(acts[0], acts, pres, head_acts, head_pre)


@dataclass
class TaskBatch:
    """Inputs with aligned per-task targets, split into equal mini-batches.

    Trailing samples that do not fill a mini-batch are dropped at
    construction.  ``error_scales`` multiplies each task's residual inside
    its loss (``loss_i = mean 1/2 |c_i (f_i - y_i)|^2``).
    """

    inputs: np.ndarray
    targets: list
    n_minibatches: int = 1
    error_scales: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.n_minibatches < 1:
            raise InputValidationError("n_minibatches must be >= 1")
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        ys = []
        for y in self.targets:
            y = np.asarray(y, dtype=np.float64)
            if y.ndim == 1:
                y = y[:, None]
            if y.shape[0] != x.shape[0]:
                raise InputValidationError("every task needs a target for every input")
            ys.append(y)
        m = (x.shape[0] // self.n_minibatches) * self.n_minibatches
        if m == 0:
            raise InputValidationError(
                f"batch of {x.shape[0]} samples cannot be split into {self.n_minibatches} mini-batches"
            )
        self.inputs = x[:m]
        self.targets = [y[:m] for y in ys]
        if self.error_scales is None:
            self.error_scales = np.ones(len(ys))
        else:
            self.error_scales = np.asarray(self.error_scales, dtype=np.float64)
            if self.error_scales.shape != (len(ys),):
                raise InputValidationError("error_scales needs one entry per task")

    @property
    def size(self):
        return self.inputs.shape[0]

    @property
    def k(self):
        return len(self.targets)


def _check_task(net, task_id):
    if not 0 <= task_id < net.k:
        raise InputValidationError(f"task_id {task_id} out of range for k={net.k}")


def _residual(trace, batch, task_id):
    f = trace.outputs[task_id]
    y = batch.targets[task_id]
    if f.shape != y.shape:
        raise InputValidationError(f"task {task_id}: output shape {f.shape} vs target shape {y.shape}")
    return f - y


def task_loss(trace, batch, task_id):
    """Mean over samples of 1/2 |c (f - y)|^2."""
    e = _residual(trace, batch, task_id)
    c = batch.error_scales[task_id]
    return float(0.5 * c * c * np.sum(e * e) / e.shape[0])


def task_losses(trace, batch):
    return np.array([task_loss(trace, batch, t) for t in range(batch.k)])


def loss_output_grad(trace, batch, task_id):
    """d loss_i / d f_i for every sample, shape (m, output_dim)."""
    e = _residual(trace, batch, task_id)
    c = batch.error_scales[task_id]
    return (c * c / e.shape[0]) * e


def backward_head(net, trace, task_id, dout):
    """Backprop ``dout`` (m, output_dim) through head ``task_id``.

    Returns the flat head gradient (summed over samples) and dL/dz (m, repr_dim).
    """
    act = net.spec.activation
    layers = net.heads[task_id]
    acts = trace.head_acts[task_id]
    pres = trace.head_pre[task_id]
    grad = np.empty_like(net.head_params[task_id])
    gviews = _views(grad, net.spec.head_shapes(task_id))
    delta = dout
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        gW, gb = gviews[li]
        np.matmul(delta.T, acts[li], out=gW)
        np.sum(delta, axis=0, out=gb)
        delta = delta @ W
        if li > 0:
            delta = delta * _act_grad(act, pres[li - 1], acts[li])
    return grad, delta


def head_repr_jacobian(net, trace, task_id):
    """d f_i / d z per sample, shape (m, output_dim, repr_dim)."""
    act = net.spec.activation
    layers = net.heads[task_id]
    acts = trace.head_acts[task_id]
    pres = trace.head_pre[task_id]
    m = trace.z.shape[0]
    W_last, _ = layers[-1]
    D = np.broadcast_to(W_last, (m,) + W_last.shape).copy()
    for li in range(len(layers) - 2, -1, -1):
        D = D * _act_grad(act, pres[li], acts[li + 1])[:, None, :]
        D = D @ layers[li][0]
    return D


def backward_trunk(net, trace, dz, groups=None):
    """Backprop dL/dz (m, repr_dim) through the trunk.

    With ``groups=None`` returns the flat theta gradient summed over all
    samples.  With ``groups=g`` the samples are split into g consecutive
    equal blocks and a (g, |theta|) array of per-block gradients is returned.
    """
    act = net.spec.activation
    acts, pres = trace.trunk_acts, trace.trunk_pre
    m = dz.shape[0]
    shapes = net.spec.trunk_shapes()
    if groups is None:
        grad = np.empty(net.n_shared)
        gviews = _views(grad, shapes)
    else:
        if m % groups:
            raise InputValidationError(f"{m} samples do not split into {groups} groups")
        grad = np.empty((groups, net.n_shared))
        per = m // groups
    delta = dz
    pos_end = net.n_shared
    for li in range(len(net.trunk) - 1, -1, -1):
        W, _ = net.trunk[li]
        delta = delta * _act_grad(act, pres[li], acts[li + 1])
        if groups is None:
            gW, gb = gviews[li]
            np.matmul(delta.T, acts[li], out=gW)
            np.sum(delta, axis=0, out=gb)
        else:
            o, i = shapes[li]
            d3 = delta.reshape(groups, per, o)
            a3 = acts[li].reshape(groups, per, i)
            start_b = pos_end - o
            start_w = start_b - o * i
            grad[:, start_b:pos_end] = d3.sum(axis=1)
            grad[:, start_w:start_b] = np.matmul(d3.transpose(0, 2, 1), a3).reshape(groups, o * i)
            pos_end = start_w
        if li > 0:
            delta = delta @ W
    return grad


def head_grad(net, batch, task_id, trace=None):
    _check_task(net, task_id)
    trace = trace if trace is not None else forward(net, batch.inputs)
    g, _ = backward_head(net, trace, task_id, loss_output_grad(trace, batch, task_id))
    return g


def grad_shared(net, batch, task_id, trace=None):
    """Exact gradient of task_loss(task_id) w.r.t. theta (heads fixed)."""
    _check_task(net, task_id)
    trace = trace if trace is not None else forward(net, batch.inputs)
    _, dz = backward_head(net, trace, task_id, loss_output_grad(trace, batch, task_id))
    return backward_trunk(net, trace, dz)


def minibatch_grads_shared(net, batch, task_id, trace=None):
    """(n, |theta|) gradients of each mini-batch's mean task loss."""
    _check_task(net, task_id)
    trace = trace if trace is not None else forward(net, batch.inputs)
    n = batch.n_minibatches
    _, dz = backward_head(net, trace, task_id, loss_output_grad(trace, batch, task_id))
    return backward_trunk(net, trace, dz * n, groups=n)


def jacobian_shared(net, inputs, task_id):
    """Rows = (sample, output coordinate) sample-major, cols = |theta|."""
    _check_task(net, task_id)
    trace = forward(net, inputs)
    D = head_repr_jacobian(net, trace, task_id)  # (m, c, r)
    m, c, _ = D.shape
    J = np.empty((m, c, net.n_shared))
    for j in range(c):
        J[:, j, :] = backward_trunk(net, trace, D[:, j, :], groups=m)
    return J.reshape(m * c, net.n_shared)


def jacobian_repr(net, inputs, task_id):
    """d f_i / d z laid out block-diagonally: (m*c, m*repr_dim).

    Row (u, j) is nonzero only in the columns of sample u's own z.
    """
    _check_task(net, task_id)
    trace = forward(net, inputs)
    D = head_repr_jacobian(net, trace, task_id)
    m, c, r = D.shape
    J = np.zeros((m, c, m, r))
    J[np.arange(m), :, np.arange(m), :] = D
    return J.reshape(m * c, m * r)


def jacobian_trunk(net, inputs):
    """d z / d theta stacked sample-major: (m*repr_dim, |theta|)."""
    trace = forward(net, inputs)
    m = trace.z.shape[0]
    r = net.spec.repr_dim
    J = np.empty((m, r, net.n_shared))
    for j in range(r):
        seed = np.zeros((m, r))
        seed[:, j] = 1.0
        J[:, j, :] = backward_trunk(net, trace, seed, groups=m)
    return J.reshape(m * r, net.n_shared)


# parameter snapshots ------------------------------------------------------

_MAGIC = b"MTLP"
_HEADER = struct.Struct("<4sI32sQ")


def params_to_bytes(net):
    flat = np.concatenate([net.theta, *net.head_params]).astype("<f8")
    return _HEADER.pack(_MAGIC, 1, net.spec.digest(), flat.size) + flat.tobytes()


def params_from_bytes(spec, blob):
    if len(blob) < _HEADER.size:
        raise InputValidationError("snapshot too short")
    magic, version, digest, count = _HEADER.unpack_from(blob)
    if magic != _MAGIC or version != 1:
        raise InputValidationError("not a parameter snapshot")
    if digest != spec.digest():
        raise InputValidationError("snapshot was written for a different NetSpec")
    if count != param_count(spec) or len(blob) != _HEADER.size + 8 * count:
        raise InputValidationError("snapshot parameter count mismatch")
    flat = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    n = _n_params(spec.trunk_shapes())
    theta, pos, heads = flat[:n], n, []
    for t in range(spec.k):
        h = _n_params(spec.head_shapes(t))
        heads.append(flat[pos : pos + h])
        pos += h
    return MtlNet(spec, theta.copy(), [h.copy() for h in heads])
