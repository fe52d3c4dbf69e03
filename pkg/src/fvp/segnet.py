"""Fixed-architecture convolutional segmentation network.

Architecture (all 3x3 convolutions padded to preserve size, no conv bias):

    conv(C->16, s1) BN ReLU
    conv(16->16, s2) BN ReLU
    conv(16->32, s1) BN ReLU
    conv(32->32, s2) BN ReLU
    conv(32->32, s1) BN ReLU      -> backbone features, H/4 x W/4 x 32
    bilinear x4 upsample          -> H x W x 32 (the per-pixel feature map)
    conv 1x1 (32 -> N_c) + bias   -> logits
    softmax                       -> probs

Weights are stored as float32 (the on-disk precision) and promoted to
float64 for every computation, so saving and loading is bitwise exact
while gradients stay accurate enough for finite-difference checks.

In eval mode a forward pass mutates nothing and is bitwise reproducible;
batch-norm then uses its frozen running statistics.  Train mode uses batch
statistics and updates the running ones (momentum 0.1, eps 1e-5).
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import backends
from .errors import DomainError, FormatError
from .optim import AdamState, adam_step

MODEL_VERSION = 1
FEATURE_CHANNELS = 32
_STAGES = ((16, 1), (16, 2), (32, 1), (32, 2), (32, 1))  # (out channels, stride)
_UPSAMPLE = 4
# stored as f32 in the weight file, so keep the working values on the f32 grid
_BN_EPS = float(np.float32(1e-5))
_BN_MOMENTUM = float(np.float32(0.1))


@dataclass
class ConvLayer:
    weight: np.ndarray  # (Co, K, K, Ci)
    stride: int
    bias: np.ndarray = None


@dataclass
class BatchNormLayer:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = _BN_EPS
    momentum: float = _BN_MOMENTUM


@dataclass
class FrozenSegModel:
    n_classes: int
    in_channels: int
    convs: list
    bns: list
    head: ConvLayer
    mode: str = "train"
    version_counter: int = 0

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def _bump(self):
        self.version_counter += 1

    def learnables(self):
        """Flat list of learnable arrays in a fixed order."""
        out = []
        for conv, bn in zip(self.convs, self.bns):
            out.extend([conv.weight, bn.scale, bn.shift])
        out.extend([self.head.weight, self.head.bias])
        return out

    def checksum(self):
        """Digest over every weight and statistic; frozen-model witness."""
        h = hashlib.sha256()
        h.update(struct.pack("<HH", self.n_classes, self.in_channels))
        for conv, bn in zip(self.convs, self.bns):
            h.update(np.ascontiguousarray(conv.weight).tobytes())
            h.update(struct.pack("<ff", bn.eps, bn.momentum))
            for arr in (bn.scale, bn.shift, bn.running_mean, bn.running_var):
                h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.ascontiguousarray(self.head.weight).tobytes())
        h.update(np.ascontiguousarray(self.head.bias).tobytes())
        return h.hexdigest()


@dataclass
class SegOutput:
    probs: np.ndarray  # (N, H, W, Nc)
    logits: np.ndarray  # (N, H, W, Nc)
    features: np.ndarray  # (N, H, W, L)


@dataclass
class ForwardCache:
    """Per-layer tensors retained for the backward passes."""

    mode: str
    version: int
    input_shape: tuple
    padded_inputs: list = field(default_factory=list)
    conv_outs: list = field(default_factory=list)
    bn_stats: list = field(default_factory=list)  # train mode: (mean, var, xhat)
    bn_outs: list = field(default_factory=list)
    feats_small: np.ndarray = None


def init_model(seed, n_classes, in_channels=1):
    """He-initialized model; deterministic for a given seed."""
    if n_classes < 2:
        raise DomainError(f"need at least 2 classes, got {n_classes}")
    if in_channels < 1:
        raise DomainError(f"need at least 1 input channel, got {in_channels}")
    rng = np.random.default_rng(seed)
    convs, bns = [], []
    ci = in_channels
    for co, stride in _STAGES:
        fan_in = 3 * 3 * ci
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(co, 3, 3, ci))
        convs.append(ConvLayer(weight=w.astype(np.float32), stride=stride))
        bns.append(BatchNormLayer(
            scale=np.ones(co, dtype=np.float32),
            shift=np.zeros(co, dtype=np.float32),
            running_mean=np.zeros(co, dtype=np.float32),
            running_var=np.ones(co, dtype=np.float32),
        ))
        ci = co
    hw = rng.normal(0.0, np.sqrt(2.0 / FEATURE_CHANNELS),
                    size=(n_classes, 1, 1, FEATURE_CHANNELS))
    head = ConvLayer(weight=hw.astype(np.float32), stride=1,
                     bias=np.zeros(n_classes, dtype=np.float32))
    return FrozenSegModel(n_classes=n_classes, in_channels=in_channels,
                          convs=convs, bns=bns, head=head)


_RESIZE_CACHE = {}


def _resize_matrix(n_in, n_out):
    """Bilinear interpolation weights (align_corners=False), dense (n_out, n_in)."""
    key = (n_in, n_out)
    mat = _RESIZE_CACHE.get(key)
    if mat is None:
        mat = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for d in range(n_out):
            src = (d + 0.5) * scale - 0.5
            i0 = int(np.floor(src))
            frac = src - i0
            lo = min(max(i0, 0), n_in - 1)
            hi = min(max(i0 + 1, 0), n_in - 1)
            mat[d, lo] += 1.0 - frac
            mat[d, hi] += frac
        _RESIZE_CACHE[key] = mat
    return mat


def bilinear_resize(x, factor):
    """Upsample (N, h, w, C) by an integer factor along both spatial axes."""
    n, h, w, c = x.shape
    ah = _resize_matrix(h, h * factor)
    aw = _resize_matrix(w, w * factor)
    t = (ah @ x.reshape(n, h, w * c)).reshape(n, h * factor, w, c)
    t = np.ascontiguousarray(t.transpose(0, 1, 3, 2))  # (N, U, C, w)
    t = t @ aw.T  # (N, U, C, V)
    return np.ascontiguousarray(t.transpose(0, 1, 3, 2))


def bilinear_resize_adjoint(g, factor):
    n, hu, wu, c = g.shape
    h, w = hu // factor, wu // factor
    ah = _resize_matrix(h, hu)
    aw = _resize_matrix(w, wu)
    t = np.ascontiguousarray(g.transpose(0, 1, 3, 2))  # (N, U, C, V)
    t = t @ aw  # (N, U, C, w)
    t = np.ascontiguousarray(t.transpose(0, 1, 3, 2)).reshape(n, hu, w * c)
    return (ah.T @ t).reshape(n, h, w, c)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _pad1(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2, w + 2, c))
    out[:, 1:-1, 1:-1, :] = x
    return out


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DomainError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def forward(m, x, with_features=True):
    """Run the network; returns (SegOutput, ForwardCache).

    Accepts one (H, W, C) image or an (N, H, W, C) batch; outputs keep the
    input's batching.  H and W must be multiples of 4.  The upsampled
    feature map is only materialized when ``with_features`` is set (probs
    and logits are identical either way); prototype-based selection needs
    it, the adaptation loop does not.
    """
    xb, single = _as_batch(x)
    n, h, w, c = xb.shape
    if h % 4 != 0 or w % 4 != 0 or h < 4 or w < 4:
        raise DomainError(f"H and W must be multiples of 4, got {h}x{w}")
    if c != m.in_channels:
        raise DomainError(f"input channels {c} != model channels {m.in_channels}")
    if not np.isfinite(xb).all():
        raise DomainError("input contains non-finite values")
    train = m.mode == "train"
    if train:
        m._bump()

    cache = ForwardCache(mode=m.mode, version=m.version_counter,
                         input_shape=xb.shape)
    cur = xb
    for conv, bn in zip(m.convs, m.bns):
        xp = _pad1(cur)
        cache.padded_inputs.append(xp)
        z = backends.conv2d_fwd(xp, conv.weight.astype(np.float64), conv.stride)
        cache.conv_outs.append(z)
        gamma = bn.scale.astype(np.float64)
        beta = bn.shift.astype(np.float64)
        if train:
            mean = z.mean(axis=(0, 1, 2))
            var = z.var(axis=(0, 1, 2))
            count = z.shape[0] * z.shape[1] * z.shape[2]
            xhat = (z - mean) / np.sqrt(var + bn.eps)
            unbiased = var * count / max(count - 1, 1)
            rm = bn.running_mean.astype(np.float64)
            rv = bn.running_var.astype(np.float64)
            rm = (1.0 - bn.momentum) * rm + bn.momentum * mean
            rv = (1.0 - bn.momentum) * rv + bn.momentum * unbiased
            bn.running_mean = rm.astype(bn.running_mean.dtype)
            bn.running_var = rv.astype(bn.running_var.dtype)
            cache.bn_stats.append((mean, var, xhat))
            y = gamma * xhat + beta
        else:
            rm = bn.running_mean.astype(np.float64)
            rv = bn.running_var.astype(np.float64)
            y = gamma * (z - rm) / np.sqrt(rv + bn.eps) + beta
            cache.bn_stats.append(None)
        cache.bn_outs.append(y)
        cur = np.maximum(y, 0.0)

    cache.feats_small = cur
    # the 1x1 head and the bilinear upsample are both linear and commute;
    # applying the head on the H/4 grid first is cheaper
    hw = m.head.weight.astype(np.float64).reshape(m.n_classes, FEATURE_CHANNELS)
    nb, hs, ws = cur.shape[:3]
    head_small = (cur.reshape(-1, FEATURE_CHANNELS) @ hw.T).reshape(
        nb, hs, ws, m.n_classes
    )
    logits = bilinear_resize(head_small, _UPSAMPLE)
    logits += m.head.bias.astype(np.float64)
    feats = bilinear_resize(cur, _UPSAMPLE) if with_features else None
    out = SegOutput(probs=softmax(logits), logits=logits, features=feats)
    if single:
        out = SegOutput(probs=out.probs[0], logits=out.logits[0],
                        features=None if feats is None else feats[0])
    return out, cache


def _check_cache(m, cache, grad_logits, want_mode):
    if cache.mode != want_mode or m.mode != want_mode:
        raise DomainError(f"backward pass requires {want_mode} mode")
    if cache.version != m.version_counter:
        raise DomainError("stale cache: the model changed since this forward pass")
    g, single = _as_batch(grad_logits)
    n, h, w, c = cache.input_shape
    if g.shape != (n, h, w, m.n_classes):
        raise DomainError(f"grad_logits shape {g.shape} does not match forward")
    return g, single


def _backward_core(m, cache, g_logits, with_weights):
    """Shared backward walk; returns (input grad, weight grads or None)."""
    hw = m.head.weight.astype(np.float64).reshape(m.n_classes, FEATURE_CHANNELS)
    g_head_small = bilinear_resize_adjoint(np.ascontiguousarray(g_logits), _UPSAMPLE)
    ghs_flat = g_head_small.reshape(-1, m.n_classes)
    wgrads = {} if with_weights else None
    if with_weights:
        wgrads["head.weight"] = (
            ghs_flat.T @ cache.feats_small.reshape(-1, FEATURE_CHANNELS)
        ).reshape(m.head.weight.shape)
        wgrads["head.bias"] = g_logits.sum(axis=(0, 1, 2))
    g = (ghs_flat @ hw).reshape(*cache.feats_small.shape[:3], FEATURE_CHANNELS)

    for i in reversed(range(len(m.convs))):
        conv, bn = m.convs[i], m.bns[i]
        g = g * (cache.bn_outs[i] > 0.0)  # ReLU mask
        gamma = bn.scale.astype(np.float64)
        if cache.mode == "train":
            mean, var, xhat = cache.bn_stats[i]
            count = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
            if with_weights:
                wgrads[f"bn{i}.scale"] = (g * xhat).sum(axis=(0, 1, 2))
                wgrads[f"bn{i}.shift"] = g.sum(axis=(0, 1, 2))
            gx = g * gamma
            inv = 1.0 / np.sqrt(var + bn.eps)
            s1 = gx.sum(axis=(0, 1, 2))
            s2 = (gx * xhat).sum(axis=(0, 1, 2))
            g = inv / count * (count * gx - s1 - xhat * s2)
        else:
            rv = bn.running_var.astype(np.float64)
            g = g * gamma / np.sqrt(rv + bn.eps)
        if with_weights:
            wgrads[f"conv{i}.weight"] = backends.conv2d_bwd_weights(
                cache.padded_inputs[i], g, conv.stride, 3
            )
        hp, wp = cache.padded_inputs[i].shape[1], cache.padded_inputs[i].shape[2]
        gp = backends.conv2d_bwd_input(g, conv.weight.astype(np.float64),
                                       conv.stride, hp, wp)
        g = gp[:, 1:-1, 1:-1, :]
    return g, wgrads


def backward_input(m, cache, grad_logits):
    """Exact dL/d(input) for a frozen eval-mode forward; mutates nothing."""
    g, single = _check_cache(m, cache, grad_logits, want_mode="eval")
    gin, _ = _backward_core(m, cache, g, with_weights=False)
    return gin[0] if single else gin


def backward_weights(m, cache, grad_logits):
    """Exact gradients for every learnable tensor (train mode only)."""
    g, _ = _check_cache(m, cache, grad_logits, want_mode="train")
    _, wgrads = _backward_core(m, cache, g, with_weights=True)
    return wgrads


def _weight_grad_list(m, wgrads):
    out = []
    for i in range(len(m.convs)):
        out.extend([wgrads[f"conv{i}.weight"], wgrads[f"bn{i}.scale"],
                    wgrads[f"bn{i}.shift"]])
    out.extend([wgrads["head.weight"], wgrads["head.bias"]])
    return out


def cross_entropy(probs, labels):
    """Mean per-pixel CE against integer labels; returns (loss, grad_logits)."""
    n, h, w, nc = probs.shape
    onehot = np.zeros_like(probs)
    idx = np.indices((n, h, w))
    onehot[idx[0], idx[1], idx[2], labels] = 1.0
    picked = np.clip((probs * onehot).sum(axis=-1), 1e-12, None)
    loss = float(-np.log(picked).mean())
    grad_logits = (probs - onehot) / (n * h * w)
    return loss, grad_logits


@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.0


def train_source(images, labels, cfg, n_classes, in_channels=1,
                 input_fn=None):
    """Supervised training from scratch; returns (eval-mode model, history).

    images/labels are in-memory lists.  ``input_fn`` maps a raw image to
    the network input (defaults to identity); the same map must be used at
    inference time.
    """
    if not images:
        raise DomainError("training dataset is empty")
    if len(images) != len(labels):
        raise DomainError("images and labels differ in length")
    m = init_model(cfg.seed, n_classes, in_channels)
    m.train()
    # float64 master copies; quantized back to float32 once at the end
    for conv, bn in zip(m.convs, m.bns):
        conv.weight = conv.weight.astype(np.float64)
        bn.scale = bn.scale.astype(np.float64)
        bn.shift = bn.shift.astype(np.float64)
        bn.running_mean = bn.running_mean.astype(np.float64)
        bn.running_var = bn.running_var.astype(np.float64)
    m.head.weight = m.head.weight.astype(np.float64)
    m.head.bias = m.head.bias.astype(np.float64)

    prepared = [input_fn(img) if input_fn else np.asarray(img, dtype=np.float64)
                for img in images]
    labels = [np.asarray(l) for l in labels]
    params = m.learnables()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(prepared))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            xb = np.stack([prepared[i] for i in sel])
            yb = np.stack([labels[i] for i in sel])
            out, cache = forward(m, xb)
            loss, g_logits = cross_entropy(out.probs, yb)
            wgrads = backward_weights(m, cache, g_logits)
            adam_step(state, params, _weight_grad_list(m, wgrads),
                      cfg.lr, cfg.weight_decay)
            m._bump()
            total += loss * len(sel)
            count += len(sel)
        history.append(total / count)

    for conv, bn in zip(m.convs, m.bns):
        conv.weight = conv.weight.astype(np.float32)
        bn.scale = bn.scale.astype(np.float32)
        bn.shift = bn.shift.astype(np.float32)
        bn.running_mean = bn.running_mean.astype(np.float32)
        bn.running_var = bn.running_var.astype(np.float32)
    m.head.weight = m.head.weight.astype(np.float32)
    m.head.bias = m.head.bias.astype(np.float32)
    m._bump()
    m.eval()
    return m, {"epoch_loss": history, "epochs": cfg.epochs, "lr": cfg.lr,
               "batch_size": cfg.batch_size, "seed": cfg.seed}


# ---------------------------------------------------------------------------
# persistence ("FVPW")

_KIND_CONV = 1
_KIND_BN = 2


def save_model(path, m):
    with open(path, "wb") as fh:
        fh.write(b"FVPW")
        fh.write(struct.pack("<HHH", MODEL_VERSION, m.n_classes, m.in_channels))
        for conv, bn in zip(m.convs, m.bns):
            _write_conv(fh, conv)
            _write_bn(fh, bn)
        _write_conv(fh, m.head)


def _write_conv(fh, conv):
    w = conv.weight.astype("<f4")
    has_bias = conv.bias is not None
    fh.write(struct.pack("<BBB", _KIND_CONV, conv.stride, int(has_bias)))
    fh.write(struct.pack("<IIII", *w.shape))
    fh.write(w.tobytes())
    if has_bias:
        fh.write(conv.bias.astype("<f4").tobytes())


def _write_bn(fh, bn):
    c = bn.scale.shape[0]
    fh.write(struct.pack("<BIff", _KIND_BN, c, bn.eps, bn.momentum))
    for arr in (bn.scale, bn.shift, bn.running_mean, bn.running_var):
        fh.write(arr.astype("<f4").tobytes())


def _read(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated model file while reading {what}")
    return buf


def _read_conv(fh):
    kind, stride, has_bias = struct.unpack("<BBB", _read(fh, 3, "layer header"))
    if kind != _KIND_CONV:
        raise FormatError(f"expected conv record, found kind {kind}")
    shape = struct.unpack("<IIII", _read(fh, 16, "conv shape"))
    count = int(np.prod(shape))
    w = np.frombuffer(_read(fh, 4 * count, "conv weights"), dtype="<f4")
    bias = None
    if has_bias:
        bias = np.frombuffer(_read(fh, 4 * shape[0], "conv bias"), dtype="<f4").copy()
    return ConvLayer(weight=w.reshape(shape).copy(), stride=stride, bias=bias)


def _read_bn(fh):
    kind, c, eps, momentum = struct.unpack("<BIff", _read(fh, 13, "bn header"))
    if kind != _KIND_BN:
        raise FormatError(f"expected bn record, found kind {kind}")
    arrs = [np.frombuffer(_read(fh, 4 * c, "bn block"), dtype="<f4").copy()
            for _ in range(4)]
    if not (arrs[3] > 0).all():
        raise FormatError("running variances must be positive")
    return BatchNormLayer(scale=arrs[0], shift=arrs[1], running_mean=arrs[2],
                          running_var=arrs[3], eps=eps, momentum=momentum)


def load_model(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"FVPW":
            raise FormatError(f"bad magic {magic!r}, expected FVPW")
        version, n_classes, in_channels = struct.unpack("<HHH", _read(fh, 6, "header"))
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model version {version}")
        convs, bns = [], []
        ci = in_channels
        for co, stride in _STAGES:
            conv = _read_conv(fh)
            if conv.weight.shape != (co, 3, 3, ci) or conv.stride != stride:
                raise FormatError("conv record does not match the fixed architecture")
            bn = _read_bn(fh)
            if bn.scale.shape[0] != co:
                raise FormatError("bn record does not match the fixed architecture")
            convs.append(conv)
            bns.append(bn)
            ci = co
        head = _read_conv(fh)
        if head.weight.shape != (n_classes, 1, 1, FEATURE_CHANNELS) or head.bias is None:
            raise FormatError("head record does not match the fixed architecture")
        if fh.read(1):
            raise FormatError("trailing bytes in model file")
    return FrozenSegModel(n_classes=n_classes, in_channels=in_channels,
                          convs=convs, bns=bns, head=head, mode="eval")
