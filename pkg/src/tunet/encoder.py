"""Image-to-sequence encoders.

Two flavors share the transformer stack: a pure patch-token encoder that
flattens PxP image patches, and a hybrid one that runs a small CNN backbone
first and tokenizes its 1/16-resolution feature map with 1x1 patches, keeping
the higher-resolution maps as skip features for the decoder.
"""

import math

import numpy as np

from tunet import tensor as T
from tunet.errors import ConfigError
from tunet.initializers import he_normal, ones, trunc_normal, zeros
from tunet.tensor import Tensor


def sequentialize(x, patch_size):
    """Flatten a (C, H, W) map into (N, P*P*C) patch rows.

    Patches are ordered row-major over the (H/P, W/P) grid; each row is the
    patch flattened channel-major. Differentiable.
    """
    c, h, w = x.shape
    p = int(patch_size)
    if p <= 0 or h % p or w % p:
        raise ConfigError(f"resolution {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    t = T.reshape(x, (c, gh, p, gw, p))
    t = T.transpose(t, (1, 3, 0, 2, 4))
    return T.reshape(t, (gh * gw, c * p * p))


def desequentialize(tokens, channels, height, width, patch_size):
    """Inverse of sequentialize: (N, P*P*C) rows back to a (C, H, W) map."""
    p = int(patch_size)
    gh, gw = height // p, width // p
    t = T.reshape(tokens, (gh, gw, channels, p, p))
    t = T.transpose(t, (2, 0, 3, 1, 4))
    return T.reshape(t, (channels, height, width))


class PatchEmbedding:
    """Linear projection of patch rows into the token space plus a learned
    per-position embedding."""

    def __init__(self, rng, patch_size, in_channels, grid_h, grid_w, dim):
        self.patch_size = patch_size
        self.grid = (grid_h, grid_w)
        self.n_tokens = grid_h * grid_w
        in_dim = patch_size * patch_size * in_channels
        self.proj = trunc_normal(rng, (in_dim, dim), std=0.02)
        self.pos = trunc_normal(rng, (self.n_tokens, dim), std=0.02)

    def forward(self, patches):
        if patches.shape[0] != self.n_tokens:
            raise ConfigError(
                f"got {patches.shape[0]} patch rows but position table has {self.n_tokens}"
            )
        if patches.shape[1] != self.proj.shape[0]:
            raise ConfigError(
                f"patch row width {patches.shape[1]} does not match projection input {self.proj.shape[0]}"
            )
        return T.add(T.matmul(patches, self.proj), self.pos)

    def params(self):
        return {"proj": self.proj, "pos": self.pos}


class TransformerLayer:
    """Pre-norm residual pair: attention sublayer then MLP sublayer."""

    def __init__(self, rng, dim, heads, mlp_dim):
        if heads <= 0 or dim % heads:
            raise ConfigError(f"token width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = he_normal(rng, (dim, dim), fan_in=dim)
        self.wk = he_normal(rng, (dim, dim), fan_in=dim)
        self.wv = he_normal(rng, (dim, dim), fan_in=dim)
        self.wo = he_normal(rng, (dim, dim), fan_in=dim)
        self.ln1_gain, self.ln1_bias = ones((dim,)), zeros((dim,))
        self.w1 = he_normal(rng, (dim, mlp_dim), fan_in=dim)
        self.b1 = zeros((mlp_dim,))
        self.w2 = he_normal(rng, (mlp_dim, dim), fan_in=mlp_dim)
        self.b2 = zeros((dim,))
        self.ln2_gain, self.ln2_bias = ones((dim,)), zeros((dim,))

    def _split_heads(self, t, n):
        return T.transpose(T.reshape(t, (n, self.heads, self.head_dim)), (1, 0, 2))

    def msa_block(self, z, return_weights=False):
        """z + multi-head scaled-dot-product attention over the normed tokens."""
        n = z.shape[0]
        h = T.layer_norm(z, self.ln1_gain, self.ln1_bias)
        q = self._split_heads(T.matmul(h, self.wq), n)
        k = self._split_heads(T.matmul(h, self.wk), n)
        v = self._split_heads(T.matmul(h, self.wv), n)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (n, self.dim))
        out = T.add(z, T.matmul(ctx, self.wo))
        if return_weights:
            return out, attn.data.copy()
        return out

    def mlp_block(self, z):
        h = T.layer_norm(z, self.ln2_gain, self.ln2_bias)
        h = T.linear(h, self.w1, self.b1)
        h = T.gelu(h)
        h = T.linear(h, self.w2, self.b2)
        return T.add(z, h)

    def forward(self, z):
        return self.mlp_block(self.msa_block(z))

    def params(self):
        return {
            "wq": self.wq,
            "wk": self.wk,
            "wv": self.wv,
            "wo": self.wo,
            "ln1.gain": self.ln1_gain,
            "ln1.bias": self.ln1_bias,
            "mlp.w1": self.w1,
            "mlp.b1": self.b1,
            "mlp.w2": self.w2,
            "mlp.b2": self.b2,
            "ln2.gain": self.ln2_gain,
            "ln2.bias": self.ln2_bias,
        }


class ResidualBlock:
    """Pre-activation residual block; the final conv is zero-initialized so a
    fresh block is an identity map modulo its downsampling projection."""

    def __init__(self, rng, c_in, c_out, stride, groups=8):
        if c_in % groups or c_out % groups:
            raise ConfigError(f"widths {c_in}/{c_out} not divisible by {groups} norm groups")
        self.stride = stride
        self.groups = groups
        self.gn1_gain, self.gn1_bias = ones((c_in,)), zeros((c_in,))
        self.conv1 = he_normal(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9)
        self.gn2_gain, self.gn2_bias = ones((c_out,)), zeros((c_out,))
        self.conv2 = zeros((c_out, c_out, 3, 3))
        if stride != 1 or c_in != c_out:
            self.proj = he_normal(rng, (c_out, c_in, 1, 1), fan_in=c_in)
        else:
            self.proj = None

    def forward(self, x):
        h = T.relu(T.group_norm(x, self.groups, self.gn1_gain, self.gn1_bias))
        h = T.conv2d(h, self.conv1, stride=self.stride, padding=1)
        h = T.relu(T.group_norm(h, self.groups, self.gn2_gain, self.gn2_bias))
        h = T.conv2d(h, self.conv2, stride=1, padding=1)
        shortcut = x if self.proj is None else T.conv2d(x, self.proj, stride=self.stride)
        return T.add(shortcut, h)

    def params(self):
        out = {
            "gn1.gain": self.gn1_gain,
            "gn1.bias": self.gn1_bias,
            "conv1": self.conv1,
            "gn2.gain": self.gn2_gain,
            "gn2.bias": self.gn2_bias,
            "conv2": self.conv2,
        }
        if self.proj is not None:
            out["proj"] = self.proj
        return out


class CnnBackbone:
    """Small strided CNN emitting feature maps at 1/2, 1/4, 1/8 and 1/16 of the
    input resolution."""

    def __init__(self, rng, in_channels, widths=(16, 32, 64, 128), groups=8):
        if len(widths) != 4:
            raise ConfigError(f"backbone needs 4 stage widths, got {widths}")
        w0, w1, w2, w3 = widths
        if w0 % groups:
            raise ConfigError(f"stem width {w0} not divisible by {groups} norm groups")
        self.widths = tuple(widths)
        self.groups = groups
        self.stem = he_normal(rng, (w0, in_channels, 3, 3), fan_in=in_channels * 9)
        self.stem_gain, self.stem_bias = ones((w0,)), zeros((w0,))
        self.stages = [
            [ResidualBlock(rng, cin, cout, 2, groups), ResidualBlock(rng, cout, cout, 1, groups)]
            for cin, cout in ((w0, w1), (w1, w2), (w2, w3))
        ]

    def forward(self, x):
        h = T.conv2d(x, self.stem, stride=2, padding=1)
        h = T.relu(T.group_norm(h, self.groups, self.stem_gain, self.stem_bias))
        taps = [h]
        for blocks in self.stages:
            for block in blocks:
                h = block.forward(h)
            taps.append(h)
        return taps  # [f_1/2, f_1/4, f_1/8, f_1/16]

    def params(self):
        out = {"stem.conv": self.stem, "stem.gn.gain": self.stem_gain, "stem.gn.bias": self.stem_bias}
        for i, blocks in enumerate(self.stages):
            for j, block in enumerate(blocks):
                for k, v in block.params().items():
                    out[f"stage{i}.block{j}.{k}"] = v
        return out


class VitEncoder:
    """Patchify, embed, run L transformer layers, final layer norm."""

    def __init__(self, rng, image_size, patch_size, in_channels, dim, depth, heads, mlp_dim):
        h, w = image_size
        if h % patch_size or w % patch_size:
            raise ConfigError(f"resolution {h}x{w} not divisible by patch size {patch_size}")
        self.image_size = (h, w)
        self.patch_size = patch_size
        self.grid = (h // patch_size, w // patch_size)
        self.embed = PatchEmbedding(rng, patch_size, in_channels, *self.grid, dim)
        self.layers = [TransformerLayer(rng, dim, heads, mlp_dim) for _ in range(depth)]
        self.final_gain, self.final_bias = ones((dim,)), zeros((dim,))

    def forward(self, x):
        z = self.embed.forward(sequentialize(x, self.patch_size))
        for layer in self.layers:
            z = layer.forward(z)
        return T.layer_norm(z, self.final_gain, self.final_bias)

    def params(self):
        out = {f"embed.{k}": v for k, v in self.embed.params().items()}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"layers.{i}.{k}"] = v
        out["final_norm.gain"] = self.final_gain
        out["final_norm.bias"] = self.final_bias
        return out


class HybridEncoder:
    """CNN backbone, then the transformer over 1x1 patches of the 1/16-scale
    feature map. Returns the token sequence and the skip features."""

    def __init__(self, rng, image_size, in_channels, dim, depth, heads, mlp_dim,
                 backbone_widths=(16, 32, 64, 128)):
        h, w = image_size
        if h % 16 or w % 16:
            raise ConfigError(f"hybrid encoder needs resolution divisible by 16, got {h}x{w}")
        self.image_size = (h, w)
        self.grid = (h // 16, w // 16)
        self.backbone = CnnBackbone(rng, in_channels, backbone_widths)
        self.embed = PatchEmbedding(rng, 1, backbone_widths[-1], *self.grid, dim)
        self.layers = [TransformerLayer(rng, dim, heads, mlp_dim) for _ in range(depth)]
        self.final_gain, self.final_bias = ones((dim,)), zeros((dim,))

    def forward(self, x):
        f2, f4, f8, f16 = self.backbone.forward(x)
        z = self.embed.forward(sequentialize(f16, 1))
        for layer in self.layers:
            z = layer.forward(z)
        z = T.layer_norm(z, self.final_gain, self.final_bias)
        return z, [f2, f4, f8]

    def params(self):
        out = {f"backbone.{k}": v for k, v in self.backbone.params().items()}
        out.update({f"embed.{k}": v for k, v in self.embed.params().items()})
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"layers.{i}.{k}"] = v
        out["final_norm.gain"] = self.final_gain
        out["final_norm.bias"] = self.final_bias
        return out


def resize_position_embedding(pos, old_grid, new_grid):
    """Bilinearly resample a learned position table onto a new token grid.

    Needed when the same weights are applied at a different input resolution;
    returns a fresh parameter Tensor.
    """
    gh, gw = old_grid
    nh, nw = new_grid
    n, d = pos.shape
    if n != gh * gw:
        raise ConfigError(f"position table has {n} rows, expected {gh}x{gw}")
    from tunet import kernels

    grid = np.ascontiguousarray(pos.data.reshape(gh, gw, d).transpose(2, 0, 1))
    resized = kernels.upsample_bilinear(grid, nh, nw)
    return Tensor(resized.transpose(1, 2, 0).reshape(nh * nw, d), requires_grad=True)
