"""Class-wise learnable memory: bank, mask encoder, fusion, memory attention.

The bank stores trainable feature maps indexed by (class, scale). At decode
time the maps for the queried classes are retrieved, reduced over the
capacity axis by a fusion strategy, added to the encoded initial mask, and
injected into the visual features through gated cross-attention.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Tensor


class MemoryBank:
    """Trainable store of shape [num_classes, scales, capacity, channels, h, w]."""

    def __init__(self, rng, num_classes, scales, capacity, channels, height, width,
                 init_std=0.02):
        self.num_classes = num_classes
        self.scales = scales
        self.capacity = capacity
        self.channels = channels
        self.height = height
        self.width = width
        shape = (num_classes, scales, capacity, channels, height, width)
        self.store = Tensor((rng.standard_normal(shape) * init_std), requires_grad=True)

    def retrieve(self, class_ids, scale):
        """Rows of the store for each queried class at one scale.

        Gradient flows back into exactly the queried (class, scale) slices;
        repeated class ids accumulate.
        """
        ids = np.asarray(class_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise IndexError("retrieve: class_ids must be a non-empty 1-D sequence")
        if ids.min() < 0 or ids.max() >= self.num_classes:
            raise IndexError(f"retrieve: class id out of range [0, {self.num_classes})")
        if not 0 <= scale < self.scales:
            raise IndexError(f"retrieve: scale {scale} out of range [0, {self.scales})")
        flat = T.reshape(self.store, self.num_classes * self.scales, -1)
        rows = T.take_rows(flat, ids * self.scales + scale)
        return T.reshape(rows, ids.size, self.capacity, self.channels, self.height, self.width)

    def params(self):
        return {"store": self.store}


class MaskEncoder:
    """Encodes initial mask logits [K,Hp,Wp] into memory space [K,D,Hm,Wm]."""

    def __init__(self, rng, channels, height, width, zero_init=False):
        self.channels = channels
        self.height = height
        self.width = width

        def conv_param(shape):
            if zero_init:
                return Tensor(np.zeros(shape), requires_grad=True)
            return T.param(rng, shape, scale=1.0 / np.sqrt(shape[1] * shape[2] * shape[3]))

        self.k1 = conv_param((channels, 1, 3, 3))
        self.b1 = T.zeros(channels, requires_grad=True)
        self.k2 = conv_param((channels, channels, 3, 3))
        self.b2 = T.zeros(channels, requires_grad=True)

    def __call__(self, mask_logits):
        k, hp, wp = mask_logits.shape
        if hp < self.height or wp < self.width:
            raise ConfigError(
                f"mask {hp}x{wp} smaller than memory extents {self.height}x{self.width}")
        x = T.reshape(mask_logits, k, 1, hp, wp)
        x = T.relu(T.conv2d(x, self.k1, self.b1))
        x = T.relu(T.conv2d(x, self.k2, self.b2))
        return T.resize_bilinear(x, self.height, self.width)

    def params(self):
        return {"k1": self.k1, "b1": self.b1, "k2": self.k2, "b2": self.b2}


# ---------------------------------------------------------------- fusion

def _to_positions(x):
    """[K, C, H, W] -> [H*W, K, C]."""
    k, c, h, w = x.shape
    return T.reshape(T.transpose(x, (2, 3, 0, 1)), h * w, k, c)


def _from_positions(x, h, w):
    """[H*W, K, C] -> [K, 1, C, H, W]."""
    p, k, c = x.shape
    return T.reshape(T.transpose(T.reshape(x, h, w, k, c), (2, 3, 0, 1)), k, 1, c, h, w)


class ArgmaxFusion:
    """Per-position pick of the capacity slot with the largest magnitude.

    Non-learnable; ties go to the lowest slot index (np.argmax order).
    """

    name = "argmax"
    needs_mask = False

    def __init__(self, rng=None, capacity=None, channels=None, identity=False):
        pass

    def __call__(self, h, encoded=None):
        idx = np.abs(h.data).argmax(axis=1, keepdims=True)
        return T.take_along(h, idx, axis=1)

    def params(self):
        return {}


class Conv2dFusion:
    """Capacity slots as conv channels: [K*D, N, H, W] -> one channel."""

    name = "conv2d"
    needs_mask = False

    def __init__(self, rng, capacity, channels, identity=False):
        self.capacity = capacity
        if identity:
            if capacity != 1:
                raise ConfigError("identity init only defined for capacity 1")
            kdata = np.zeros((1, capacity, 3, 3))
            kdata[0, 0, 1, 1] = 1.0
            self.kernel = Tensor(kdata, requires_grad=True)
        else:
            self.kernel = T.param(rng, (1, capacity, 3, 3), scale=1.0 / (3 * np.sqrt(capacity)))
        self.bias = T.zeros(1, requires_grad=True)

    def __call__(self, h, encoded=None):
        k, n, d, hm, wm = h.shape
        x = T.reshape(T.transpose(h, (0, 2, 1, 3, 4)), k * d, n, hm, wm)
        out = T.conv2d(x, self.kernel, self.bias)
        return T.reshape(out, k, 1, d, hm, wm)

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}


class Conv3dFusion:
    """Capacity treated as depth: 3x3x3 conv, then mean over depth.

    Parameter count is capacity-independent: kd*kh*kw + 1 = 28.
    """

    name = "conv3d"
    needs_mask = False

    def __init__(self, rng, capacity, channels, identity=False):
        if identity:
            kdata = np.zeros((1, 1, 3, 3, 3))
            kdata[0, 0, 1, 1, 1] = 1.0
            self.kernel = Tensor(kdata, requires_grad=True)
        else:
            self.kernel = T.param(rng, (1, 1, 3, 3, 3), scale=1.0 / np.sqrt(27))
        self.bias = T.zeros(1, requires_grad=True)

    def __call__(self, h, encoded=None):
        k, n, d, hm, wm = h.shape
        x = T.reshape(T.transpose(h, (0, 2, 1, 3, 4)), k * d, 1, n, hm, wm)
        out = T.conv3d(x, self.kernel, self.bias)
        out = T.mean(out, axis=2)
        return T.reshape(out, k, 1, d, hm, wm)

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}


class AttentionFusion:
    """Encoded mask queries the capacity-stacked memory at each position.

    Keys/values come from h reshaped to [H*W, K, N*D] and projected to D.
    """

    name = "attention"
    needs_mask = True

    def __init__(self, rng, capacity, channels, identity=False):
        nd = capacity * channels
        self.wq = T.param(rng, (channels, channels))
        self.wk = T.param(rng, (nd, channels))
        self.wv = T.param(rng, (nd, channels))

    def _project(self, x, w):
        p, k, c = x.shape
        return T.reshape(T.matmul(T.reshape(x, p * k, c), w), p, k, w.shape[1])

    def __call__(self, h, encoded=None):
        if encoded is None:
            raise ConfigError(f"{self.name} fusion requires the encoded mask")
        k, n, d, hm, wm = h.shape
        h_pos = T.reshape(T.transpose(h, (3, 4, 0, 1, 2)), hm * wm, k, n * d)
        enc_pos = _to_positions(encoded)
        q = self._project(enc_pos, self.wq)
        keys = self._project(h_pos, self.wk)
        vals = self._project(h_pos, self.wv)
        out = T.battention(q, keys, vals)
        return _from_positions(out, hm, wm)

    def params(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv}


class DualAttentionFusion:
    """Two attention passes: memory queries the mask, then roles reverse."""

    name = "dual_attention"
    needs_mask = True

    def __init__(self, rng, capacity, channels, identity=False):
        nd = capacity * channels
        self.wq1 = T.param(rng, (nd, channels))
        self.wk1 = T.param(rng, (channels, channels))
        self.wv1 = T.param(rng, (channels, nd))
        self.second = AttentionFusion(rng, capacity, channels)

    def __call__(self, h, encoded=None):
        if encoded is None:
            raise ConfigError(f"{self.name} fusion requires the encoded mask")
        k, n, d, hm, wm = h.shape
        h_pos = T.reshape(T.transpose(h, (3, 4, 0, 1, 2)), hm * wm, k, n * d)
        enc_pos = _to_positions(encoded)
        p = hm * wm
        q1 = T.reshape(T.matmul(T.reshape(h_pos, p * k, n * d), self.wq1), p, k, d)
        k1 = T.reshape(T.matmul(T.reshape(enc_pos, p * k, d), self.wk1), p, k, d)
        v1 = T.reshape(T.matmul(T.reshape(enc_pos, p * k, d), self.wv1), p, k, n * d)
        h_updated = T.add(h_pos, T.battention(q1, k1, v1))
        q2 = self.second._project(enc_pos, self.second.wq)
        k2 = self.second._project(h_updated, self.second.wk)
        v2 = self.second._project(h_updated, self.second.wv)
        out = T.battention(q2, k2, v2)
        return _from_positions(out, hm, wm)

    def params(self):
        out = {"wq1": self.wq1, "wk1": self.wk1, "wv1": self.wv1}
        out.update({f"second.{k}": v for k, v in self.second.params().items()})
        return out


FUSION_VARIANTS = {
    cls.name: cls
    for cls in (ArgmaxFusion, Conv2dFusion, Conv3dFusion, AttentionFusion, DualAttentionFusion)
}


def make_fusion(name, rng, capacity, channels, identity=False):
    if name not in FUSION_VARIANTS:
        raise ConfigError(f"unknown fusion variant {name!r}; choose from {sorted(FUSION_VARIANTS)}")
    return FUSION_VARIANTS[name](rng, capacity, channels, identity=identity)


def param_count(module):
    return sum(int(np.prod(p.shape)) for p in module.params().values())


# ---------------------------------------------------------------- attention block

def _attn_with_weights(q, k, v):
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


class MemoryAttention:
    """Self-attention over visual features plus gated cross-attention into
    the aggregated (encoded mask + fused memory) sequence.

    With the gate at zero the output equals the self-attended features
    exactly, so an untrained memory path is a no-op.
    """

    def __init__(self, rng, channels, mem_channels):
        self.channels = channels
        self.sa_q = T.param(rng, (channels, channels))
        self.sa_k = T.param(rng, (channels, channels))
        self.sa_v = T.param(rng, (channels, channels))
        self.kv_proj = T.param(rng, (mem_channels, channels))
        self.ca_q = T.param(rng, (channels, channels))
        self.ca_k = T.param(rng, (channels, channels))
        self.ca_v = T.param(rng, (channels, channels))
        # gate starts closed; training opens it
        self.alpha = T.zeros(1, requires_grad=True)

    def __call__(self, f_img, encoded, fused, weight_sink=None):
        if f_img.shape[1] != self.channels:
            raise ConfigError(f"feature channels {f_img.shape[1]} != configured {self.channels}")
        sa_out, sa_w = _attn_with_weights(
            T.matmul(f_img, self.sa_q), T.matmul(f_img, self.sa_k), T.matmul(f_img, self.sa_v))
        s = T.add(f_img, sa_out)
        k, one, d, hm, wm = fused.shape
        agg = T.add(encoded, T.reshape(fused, k, d, hm, wm))
        seq = T.reshape(T.transpose(agg, (0, 2, 3, 1)), k * hm * wm, d)
        kv = T.matmul(seq, self.kv_proj)
        ca_out, ca_w = _attn_with_weights(
            T.matmul(s, self.ca_q), T.matmul(kv, self.ca_k), T.matmul(kv, self.ca_v))
        if weight_sink is not None:
            weight_sink["sa"] = sa_w.data.copy()
            weight_sink["ca"] = ca_w.data.copy()
        return T.add(s, T.mul(ca_out, self.alpha))

    def self_attend(self, f_img, weight_sink=None):
        """The gate-closed path alone (used when comparing with/without memory)."""
        sa_out, sa_w = _attn_with_weights(
            T.matmul(f_img, self.sa_q), T.matmul(f_img, self.sa_k), T.matmul(f_img, self.sa_v))
        if weight_sink is not None:
            weight_sink["sa"] = sa_w.data.copy()
        return T.add(f_img, sa_out)

    def params(self):
        return {
            "sa_q": self.sa_q, "sa_k": self.sa_k, "sa_v": self.sa_v,
            "kv_proj": self.kv_proj,
            "ca_q": self.ca_q, "ca_k": self.ca_k, "ca_v": self.ca_v,
            "alpha": self.alpha,
        }
