"""Decoders from token space to full-resolution class logits.

Two designs: a naive head (1x1 conv to class channels, then one direct
bilinear jump to the output size) and a cascaded upsampler of repeated
(2x bilinear, 3x3 conv, group norm, relu) blocks, optionally fusing encoder
skip features by channel concatenation before each conv.
"""

import math

from tunet import tensor as T
from tunet.errors import ConfigError, ContractError
from tunet.initializers import he_normal, ones, zeros


def reshape_hidden(z, grid=None):
    """Rearrange (N, D) tokens into a (D, grid_h, grid_w) feature map.

    Inverse of the encoder's row-major token ordering. Without an explicit
    grid, N must be a perfect square.
    """
    n, d = z.shape
    if grid is None:
        side = math.isqrt(n)
        if side * side != n:
            raise ContractError(f"token count {n} is not a square grid; pass grid explicitly")
        grid = (side, side)
    gh, gw = grid
    if gh * gw != n:
        raise ContractError(f"token count {n} does not fill a {gh}x{gw} grid")
    return T.reshape(T.transpose(z), (d, gh, gw))


class NaiveDecoder:
    """1x1 conv to class channels, then bilinear straight to full resolution."""

    def __init__(self, rng, dim, num_classes):
        self.head = he_normal(rng, (num_classes, dim, 1, 1), fan_in=dim)

    def forward(self, hidden, out_h, out_w):
        logits = T.conv2d(hidden, self.head)
        return T.bilinear_upsample(logits, size=(out_h, out_w))

    def params(self):
        return {"head": self.head}


class CupBlock:
    """One cascaded-upsampler step: 2x bilinear, 3x3 conv, group norm, relu."""

    def __init__(self, rng, c_in, c_out, groups=8):
        if c_out % groups:
            raise ConfigError(f"block width {c_out} not divisible by {groups} norm groups")
        self.groups = groups
        self.conv = he_normal(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9)
        self.gn_gain, self.gn_bias = ones((c_out,)), zeros((c_out,))

    def forward(self, x, skip=None):
        up = T.bilinear_upsample(x, scale_factor=2)
        if skip is not None:
            up = T.concat_channels([up, skip])
        h = T.conv2d(up, self.conv, stride=1, padding=1)
        return T.relu(T.group_norm(h, self.groups, self.gn_gain, self.gn_bias))

    def params(self):
        return {"conv": self.conv, "gn.gain": self.gn_gain, "gn.bias": self.gn_bias}


class CupDecoder:
    """Cascade of 2x upsampling blocks from the token grid to full resolution.

    With four blocks (hybrid encoder, 1/16 grid), skip features can be fused:
    skip_count=3 attaches them at the 1/8, 1/4 and 1/2 scales; skip_count=1
    only at 1/4. Skips are passed highest-resolution first.
    """

    def __init__(self, rng, dim, widths, num_classes, skip_channels=(), skip_count=0, groups=8):
        self.num_blocks = len(widths)
        self.skip_count = skip_count
        if skip_count not in (0, 1, 3):
            raise ConfigError(f"skip_count must be 0, 1 or 3, got {skip_count}")
        if skip_count and self.num_blocks != 4:
            raise ConfigError("skip fusion is defined for the 4-block cascade only")
        if skip_count == 3:
            self._block_skip = {0: 2, 1: 1, 2: 0}  # block -> index into [f2, f4, f8]
            skip_by_block = {0: skip_channels[2], 1: skip_channels[1], 2: skip_channels[0]}
        elif skip_count == 1:
            self._block_skip = {1: 0}
            skip_by_block = {1: skip_channels[1]}
        else:
            self._block_skip = {}
            skip_by_block = {}
        self.blocks = []
        self._skip_channels = skip_by_block
        c_prev = dim
        for i, c_out in enumerate(widths):
            c_in = c_prev + skip_by_block.get(i, 0)
            self.blocks.append(CupBlock(rng, c_in, c_out, groups))
            c_prev = c_out
        self.head = he_normal(rng, (num_classes, widths[-1], 1, 1), fan_in=widths[-1])

    def forward(self, hidden, skips=None):
        h = hidden
        for i, block in enumerate(self.blocks):
            skip = None
            if i in self._block_skip:
                if skips is None or len(skips) <= self._block_skip[i]:
                    raise ConfigError(f"decoder expects {self.skip_count} skip features")
                skip = skips[self._block_skip[i]]
                denom = 2 ** (self.num_blocks - 1 - i)
                want_hw = (h.shape[1] * 2, h.shape[2] * 2)
                want_c = self._skip_channels[i]
                if skip.shape != (want_c,) + want_hw:
                    raise ConfigError(
                        f"skip at 1/{denom} scale has shape {skip.shape}, "
                        f"expected {(want_c,) + want_hw}"
                    )
            h = block.forward(h, skip)
        return T.conv2d(h, self.head)

    def params(self):
        out = {}
        for i, block in enumerate(self.blocks):
            for k, v in block.params().items():
                out[f"blocks.{i}.{k}"] = v
        out["head"] = self.head
        return out
