"""Sequential network assembly, forward/backward orchestration, op counting.

A :class:`NetworkSpec` is a list of layer descriptors that must compose
shape-wise; :func:`build_network` turns it into a :class:`Network` with
initialized parameters.  Forward passes cache per-layer inputs (plus im2col
patch matrices and pooling switches) in a :class:`ForwardTrace` so the
backward pass never recomputes patches.

Checkpoints are a small versioned binary container: a JSON header with the
spec and array manifest followed by raw little-endian float64 blobs, which
round-trips parameters bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import layers as L
from .tensor import RngState, Tensor, conv_output_hw, im2col_batch

WEIGHTED_KINDS = ("adder", "conv")
LOSS_KINDS = ("softmax_ce", "sigmoid_bce")

_CKPT_MAGIC = b"ANETCKPT1\n"


@dataclass
class LayerSpec:
    kind: str  # adder | conv | bn | relu | maxpool | avgpool | flatten
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0


@dataclass
class NetworkSpec:
    input_shape: tuple  # (H, W, C)
    layers: list
    loss: str = "softmax_ce"


@dataclass
class ParamRef:
    layer_index: int
    name: str   # filters | gamma | beta
    kind: str   # adder_filter | conv_filter | bn_gamma | bn_beta
    array: Tensor


@dataclass
class ForwardTrace:
    caches: list
    n: int


@dataclass
class OpCountRow:
    layer_index: int
    kind: str
    muls: int
    adds: int
    xnor: int


@dataclass
class OpCountReport:
    rows: list

    @property
    def total_muls(self):
        return sum(r.muls for r in self.rows)

    @property
    def total_adds(self):
        return sum(r.adds for r in self.rows)

    @property
    def total_xnor(self):
        return sum(r.xnor for r in self.rows)


def infer_shapes(spec: NetworkSpec):
    """Per-layer output shapes (H, W, C); raises on inconsistent specs."""
    if spec.loss not in LOSS_KINDS:
        raise ValueError(f"unknown loss head {spec.loss!r}")
    shape = tuple(spec.input_shape)
    if len(shape) != 3:
        raise ValueError(f"input_shape must be (H, W, C), got {shape}")
    shapes = []
    for i, ls in enumerate(spec.layers):
        h, w, c = shape
        if ls.kind in WEIGHTED_KINDS:
            if ls.out_channels < 1:
                raise ValueError(f"layer {i}: out_channels must be positive")
            oh, ow = conv_output_hw(h, w, ls.kernel, ls.stride, ls.padding)
            shape = (oh, ow, ls.out_channels)
        elif ls.kind in ("bn", "relu"):
            pass
        elif ls.kind in ("maxpool", "avgpool"):
            if h % 2 or w % 2:
                raise ValueError(f"layer {i}: 2x2 pooling needs even extents, got {h}x{w}")
            shape = (h // 2, w // 2, c)
        elif ls.kind == "flatten":
            shape = (1, 1, h * w * c)
        else:
            raise ValueError(f"layer {i}: unknown kind {ls.kind!r}")
        shapes.append(shape)
    out = shapes[-1] if shapes else tuple(spec.input_shape)
    if out[0] != 1 or out[1] != 1:
        raise ValueError(f"final activation must be 1x1xK for a loss head, got {out}")
    if spec.loss == "sigmoid_bce" and out[2] != 1:
        raise ValueError("sigmoid_bce head needs exactly one output channel")
    if spec.loss == "softmax_ce" and out[2] < 2:
        raise ValueError("softmax_ce head needs at least two output channels")
    return shapes


# ---------------------------------------------------------------------------
# layer wrappers
# ---------------------------------------------------------------------------

class _AdderLayer:
    def __init__(self, params):
        self.params = params

    def forward(self, x, training):
        p = self.params
        cols = im2col_batch(x, p.kernel, p.stride, p.padding)
        y = L.adder_forward(p, x, cols=cols)
        return y, (x, cols)

    def backward(self, cache, upstream, mode, need_dx):
        x, cols = cache
        d_f = L.adder_grad_filters(self.params, x, upstream, mode, cols=cols)
        dx = L.adder_grad_input(self.params, x, upstream, cols=cols) if need_dx else None
        return dx, [("filters", d_f)]

    def param_info(self):
        return [("filters", "adder_filter", self.params.filters)]

    def state_arrays(self):
        return [("filters", self.params.filters)]


class _ConvLayer:
    def __init__(self, params):
        self.params = params

    def forward(self, x, training):
        p = self.params
        cols = im2col_batch(x, p.kernel, p.stride, p.padding)
        y = L.conv_forward(p, x, cols=cols)
        return y, (x, cols)

    def backward(self, cache, upstream, mode, need_dx):
        x, cols = cache
        d_f, dx = L.conv_grad(self.params, x, upstream, cols=cols)
        return (dx if need_dx else None), [("filters", d_f)]

    def param_info(self):
        return [("filters", "conv_filter", self.params.filters)]

    def state_arrays(self):
        return [("filters", self.params.filters)]


class _BatchNormLayer:
    def __init__(self, params):
        self.params = params

    def forward(self, x, training):
        y = L.bn_forward(self.params, x, training, update_running=training)
        return y, x

    def backward(self, cache, upstream, mode, need_dx):
        dx, d_gamma, d_beta = L.bn_backward(self.params, cache, upstream)
        return dx, [("gamma", d_gamma), ("beta", d_beta)]

    def param_info(self):
        return [("gamma", "bn_gamma", self.params.gamma),
                ("beta", "bn_beta", self.params.beta)]

    def state_arrays(self):
        return [("gamma", self.params.gamma), ("beta", self.params.beta),
                ("running_mean", self.params.running_mean),
                ("running_var", self.params.running_var)]


class _ReluLayer:
    params = None

    def forward(self, x, training):
        return L.relu(x), x

    def backward(self, cache, upstream, mode, need_dx):
        return L.relu(cache, upstream), []

    def param_info(self):
        return []

    def state_arrays(self):
        return []


class _MaxPoolLayer:
    params = None

    def forward(self, x, training):
        y, switches = L.maxpool2_forward(x)
        return y, (x.shape, switches)

    def backward(self, cache, upstream, mode, need_dx):
        x_shape, switches = cache
        return L.maxpool2_backward(switches, upstream, x_shape), []

    def param_info(self):
        return []

    def state_arrays(self):
        return []


class _AvgPoolLayer:
    params = None

    def forward(self, x, training):
        return L.avgpool2_forward(x), x.shape

    def backward(self, cache, upstream, mode, need_dx):
        return L.avgpool2_backward(upstream, cache), []

    def param_info(self):
        return []

    def state_arrays(self):
        return []


class _FlattenLayer:
    params = None

    def forward(self, x, training):
        n = x.shape[0]
        return x.reshape(n, 1, 1, -1), x.shape

    def backward(self, cache, upstream, mode, need_dx):
        return upstream.reshape(cache), []

    def param_info(self):
        return []

    def state_arrays(self):
        return []


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    def __init__(self, spec: NetworkSpec, layer_objs: list):
        self.spec = spec
        self.layers = layer_objs

    def param_refs(self):
        refs = []
        for i, layer in enumerate(self.layers):
            for name, kind, arr in layer.param_info():
                refs.append(ParamRef(i, name, kind, arr))
        return refs

    def parameter_count(self) -> int:
        return sum(ref.array.size for ref in self.param_refs())

    def set_p(self, p: float):
        clamped = min(2.0, max(1.0, float(p)))
        for layer in self.layers:
            if isinstance(layer, _AdderLayer):
                layer.params.p = clamped

    @property
    def loss_kind(self) -> str:
        return self.spec.loss


def build_network(spec: NetworkSpec, rng: RngState, initial_p: float = 1.0) -> Network:
    """Instantiate and initialize all layers; deterministic per seed.

    Adder filters start at unit scale N(0, 1); conv filters at
    N(0, 1/(d^2 c_in)); batch norm at gamma=1, beta=0.
    """
    shapes = infer_shapes(spec)
    in_shape = tuple(spec.input_shape)
    layer_objs = []
    for i, ls in enumerate(spec.layers):
        c_in = in_shape[2]
        if ls.kind == "adder":
            params = L.init_adder_params(rng, ls.kernel, c_in, ls.out_channels,
                                         ls.stride, ls.padding, p=initial_p)
            layer_objs.append(_AdderLayer(params))
        elif ls.kind == "conv":
            params = L.init_conv_params(rng, ls.kernel, c_in, ls.out_channels,
                                        ls.stride, ls.padding)
            layer_objs.append(_ConvLayer(params))
        elif ls.kind == "bn":
            layer_objs.append(_BatchNormLayer(L.init_bn_params(c_in)))
        elif ls.kind == "relu":
            layer_objs.append(_ReluLayer())
        elif ls.kind == "maxpool":
            layer_objs.append(_MaxPoolLayer())
        elif ls.kind == "avgpool":
            layer_objs.append(_AvgPoolLayer())
        elif ls.kind == "flatten":
            layer_objs.append(_FlattenLayer())
        in_shape = shapes[i]
    return Network(spec, layer_objs)


def _as_network_input(net: Network, batch) -> Tensor:
    x = np.asarray(batch, dtype=np.float64)
    h, w, c = net.spec.input_shape
    if x.ndim == 2 and (h, w) == (1, 1) and x.shape[1] == c:
        x = x.reshape(x.shape[0], 1, 1, c)
    if x.ndim == 3 and x.shape == (h, w, c):
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (h, w, c):
        raise ValueError(f"batch shape {np.shape(batch)} does not match input "
                         f"spec {(h, w, c)}")
    return x


def forward_pass(net: Network, batch, training: bool = False):
    """Run the whole stack; returns (head outputs, trace for backward).

    Head outputs are (N, K) for a softmax head and (N,) for a sigmoid head.
    """
    x = _as_network_input(net, batch)
    n = x.shape[0]
    caches = []
    for layer in net.layers:
        x, cache = layer.forward(x, training)
        caches.append(cache)
    out = x.reshape(n, -1)
    if net.loss_kind == "sigmoid_bce":
        out = out[:, 0]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite network outputs")
    return out, ForwardTrace(caches, n)


def backward_pass(net: Network, trace: ForwardTrace, loss_grad,
                  mode: L.GradientMode = L.GradientMode.FULL_PRECISION,
                  skip_first_input_grad: bool = True):
    """Chain rule through all layers; returns grads aligned with param_refs().

    The input gradient of the first layer feeds nothing, so it is skipped
    unless ``skip_first_input_grad`` is False.
    """
    if len(trace.caches) != len(net.layers):
        raise ValueError("trace does not match network (stale trace?)")
    k = 1 if net.loss_kind == "sigmoid_bce" else -1
    upstream = np.asarray(loss_grad, dtype=np.float64).reshape(trace.n, 1, 1, k)
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        need_dx = (i > 0) or not skip_first_input_grad
        upstream, layer_grads = layer.backward(trace.caches[i], upstream, mode, need_dx)
        for name, g in layer_grads:
            grads[(i, name)] = g
    return [grads[(ref.layer_index, ref.name)] for ref in net.param_refs()]


def loss_and_grads(net: Network, batch, labels,
                   mode: L.GradientMode = L.GradientMode.FULL_PRECISION,
                   training: bool = True, update_running: bool = True):
    """One optimization step's worth of work: loss value and parameter grads."""
    if not update_running:
        saved = [(l.params.running_mean.copy(), l.params.running_var.copy())
                 for l in net.layers if isinstance(l, _BatchNormLayer)]
    outputs, trace = forward_pass(net, batch, training=training)
    if net.loss_kind == "softmax_ce":
        loss, d_logits = L.softmax_cross_entropy(outputs, labels)
    else:
        loss, d_logits = L.sigmoid_bce(outputs, labels)
    grads = backward_pass(net, trace, d_logits, mode)
    if not update_running:
        bn_layers = [l for l in net.layers if isinstance(l, _BatchNormLayer)]
        for layer, (rm, rv) in zip(bn_layers, saved):
            layer.params.running_mean[:] = rm
            layer.params.running_var[:] = rv
    return loss, grads


def predict(net: Network, batch) -> np.ndarray:
    """Eval-mode class labels; sigmoid heads threshold at 0.5."""
    outputs, _ = forward_pass(net, batch, training=False)
    if net.loss_kind == "softmax_ce":
        return outputs.argmax(axis=1)
    return (L.sigmoid(outputs) > 0.5).astype(np.int64)


def predict_grid(net: Network, bounds, resolution: int) -> np.ndarray:
    """Class labels on a uniform 2-D grid; row 0 is the top of the domain."""
    h, w, c = net.spec.input_shape
    if (h, w, c) != (1, 1, 2):
        raise ValueError("grid prediction needs a 2-feature input network")
    lo, hi = float(bounds[0]), float(bounds[1])
    xs = np.linspace(lo, hi, resolution)
    ys = np.linspace(hi, lo, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    out = np.empty(pts.shape[0], dtype=np.int64)
    for lo_i in range(0, pts.shape[0], 8192):
        hi_i = min(pts.shape[0], lo_i + 8192)
        out[lo_i:hi_i] = predict(net, pts[lo_i:hi_i])
    return out.reshape(resolution, resolution)


# ---------------------------------------------------------------------------
# operation counting
# ---------------------------------------------------------------------------

def count_ops(spec: NetworkSpec, input_shape=None) -> OpCountReport:
    """Multiplication/addition counts per forward pass of one sample.

    Convention: a conv layer costs d^2*c_in*c_out*H'*W' multiplications and
    the same number of additions; an adder layer costs twice that in
    additions and no multiplications (a subtraction counts as an addition).
    Batch norm, activations and pooling are omitted.
    """
    shape = tuple(input_shape if input_shape is not None else spec.input_shape)
    rows = []
    for i, ls in enumerate(spec.layers):
        h, w, c = shape
        if ls.kind in WEIGHTED_KINDS:
            oh, ow = conv_output_hw(h, w, ls.kernel, ls.stride, ls.padding)
            mac = ls.kernel * ls.kernel * c * ls.out_channels * oh * ow
            if ls.kind == "conv":
                rows.append(OpCountRow(i, "conv", mac, mac, 0))
            else:
                rows.append(OpCountRow(i, "adder", 0, 2 * mac, 0))
            shape = (oh, ow, ls.out_channels)
        elif ls.kind in ("maxpool", "avgpool"):
            shape = (h // 2, w // 2, c)
        elif ls.kind == "flatten":
            shape = (1, 1, h * w * c)
    return OpCountReport(rows)


# ---------------------------------------------------------------------------
# architecture presets
# ---------------------------------------------------------------------------

def lenet5_bn(mode: str = "adder", first_layer_conv: bool = False) -> NetworkSpec:
    """LeNet-5 with batch norm after every weighted layer, 32x32x1 input.

    The two fully connected layers are expressed as 1x1 layers, so "adder"
    mode replaces every multiplication-based layer including them.  Layers
    carry no standalone biases; the following batch norm provides the shift.
    """
    if mode not in ("adder", "conv"):
        raise ValueError(f"mode must be adder or conv, got {mode!r}")

    def block(kind, c_out, k):
        return [LayerSpec(kind, out_channels=c_out, kernel=k),
                LayerSpec("bn"), LayerSpec("relu")]

    w = mode
    first = "conv" if first_layer_conv else w
    layer_list = []
    layer_list += block(first, 6, 5) + [LayerSpec("maxpool")]
    layer_list += block(w, 16, 5) + [LayerSpec("maxpool")]
    layer_list += block(w, 120, 5)
    layer_list += block(w, 84, 1)
    layer_list += [LayerSpec(w, out_channels=10, kernel=1), LayerSpec("bn")]
    return NetworkSpec(input_shape=(32, 32, 1), layers=layer_list, loss="softmax_ce")


def two_layer_classifier(n_hidden: int, kind: str = "adder") -> NetworkSpec:
    """Two weighted layers with n hidden units for 2-D binary tasks.

    Batch norm follows both layers in both variants: adder responses are
    always <= 0 and would be zeroed by ReLU without the normalization.
    """
    if n_hidden < 1:
        raise ValueError("need at least one hidden unit")
    if kind not in ("adder", "mlp"):
        raise ValueError(f"kind must be adder or mlp, got {kind!r}")
    w = "adder" if kind == "adder" else "conv"
    layer_list = [
        LayerSpec(w, out_channels=n_hidden, kernel=1), LayerSpec("bn"), LayerSpec("relu"),
        LayerSpec(w, out_channels=1, kernel=1), LayerSpec("bn"),
    ]
    return NetworkSpec(input_shape=(1, 1, 2), layers=layer_list, loss="sigmoid_bce")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def spec_to_dict(spec: NetworkSpec) -> dict:
    return {"input_shape": list(spec.input_shape),
            "layers": [asdict(ls) for ls in spec.layers],
            "loss": spec.loss}


def spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(input_shape=tuple(d["input_shape"]),
                       layers=[LayerSpec(**ls) for ls in d["layers"]],
                       loss=d["loss"])


def save_checkpoint(net: Network, path):
    manifest = []
    blobs = []
    for i, layer in enumerate(net.layers):
        for name, arr in layer.state_arrays():
            manifest.append({"layer": i, "name": name, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype=np.float64))
    adder_p = [layer.params.p for layer in net.layers if isinstance(layer, _AdderLayer)]
    header = {
        "format": "addernet-checkpoint",
        "version": 1,
        "spec": spec_to_dict(net.spec),
        "adder_p": adder_p,
        "arrays": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob.astype("<f8").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        spec = spec_from_dict(header["spec"])
        net = build_network(spec, RngState(0))
        by_layer = {}
        for i, layer in enumerate(net.layers):
            by_layer[i] = dict(layer.state_arrays())
        for entry in header["arrays"]:
            arr = by_layer[entry["layer"]][entry["name"]]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError("truncated checkpoint file")
            arr[...] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"])
        for p, layer in zip(header["adder_p"],
                            [l for l in net.layers if isinstance(l, _AdderLayer)]):
            layer.params.p = p
    return net
