"""Model configuration and assembly.

ModelConfig captures one point on the architecture grid (encoder kind,
decoder kind, skip count, patch size, resolution, scale preset); Model wires
the encoder and decoder together and owns the named-parameter registry used
by the optimizer and checkpoints.
"""

from dataclasses import dataclass, fields

import numpy as np

from tunet import tensor as T
from tunet.decoder import CupDecoder, NaiveDecoder, reshape_hidden
from tunet.encoder import HybridEncoder, VitEncoder
from tunet.errors import ConfigError
from tunet.tensor import Tensor

# dim, depth, heads, mlp_dim
PRESETS = {
    "tiny": (64, 2, 4, 128),
    "base": (768, 12, 12, 3072),
    "large": (1024, 24, 16, 4096),
}

VARIANTS = ("vit_none", "vit_cup", "hybrid_cup", "transunet")


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "hybrid"  # vit | hybrid
    decoder: str = "cup"  # none | cup
    skip_count: int = 3
    patch_size: int = 16
    height: int = 64
    width: int = 64
    in_channels: int = 1
    num_classes: int = 4
    scale: str = "tiny"
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_dim: int = 128
    backbone_widths: tuple = (16, 32, 64, 128)
    decoder_widths: tuple = ()  # empty -> derived from the block count

    @classmethod
    def preset(cls, scale="tiny", **overrides):
        if scale not in PRESETS:
            raise ConfigError(f"unknown scale preset {scale!r}; have {sorted(PRESETS)}")
        dim, depth, heads, mlp_dim = PRESETS[scale]
        base = dict(scale=scale, dim=dim, depth=depth, heads=heads, mlp_dim=mlp_dim)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def variant(cls, name, scale="tiny", **overrides):
        """The four-architecture axis: vit_none, vit_cup, hybrid_cup, transunet."""
        table = {
            "vit_none": dict(encoder="vit", decoder="none", skip_count=0),
            "vit_cup": dict(encoder="vit", decoder="cup", skip_count=0),
            "hybrid_cup": dict(encoder="hybrid", decoder="cup", skip_count=0),
            "transunet": dict(encoder="hybrid", decoder="cup", skip_count=3),
        }
        if name not in table:
            raise ConfigError(f"unknown variant {name!r}; have {sorted(table)}")
        kw = dict(table[name])
        kw.update(overrides)
        return cls.preset(scale, **kw)

    # -- derived geometry ---------------------------------------------------

    def token_grid(self):
        if self.encoder == "hybrid":
            return self.height // 16, self.width // 16
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def seq_length(self):
        gh, gw = self.token_grid()
        return gh * gw

    def num_cup_blocks(self):
        gh, _ = self.token_grid()
        ratio = self.height // gh
        return int(round(np.log2(ratio)))

    def resolved_decoder_widths(self):
        if self.decoder_widths:
            return tuple(self.decoder_widths)
        n = self.num_cup_blocks()
        start = 256 if self.scale in ("base", "large") else 64
        widths = [max(start >> i, 16) for i in range(n)]
        widths[-1] = 16  # the cascade always narrows to 16 before the class head
        return tuple(widths)

    # -- validation ---------------------------------------------------------

    def validate(self):
        if self.encoder not in ("vit", "hybrid"):
            raise ConfigError(f"encoder must be 'vit' or 'hybrid', got {self.encoder!r}")
        if self.decoder not in ("none", "cup"):
            raise ConfigError(f"decoder must be 'none' or 'cup', got {self.decoder!r}")
        if self.skip_count not in (0, 1, 3):
            raise ConfigError(f"skip_count must be 0, 1 or 3, got {self.skip_count}")
        if self.skip_count and self.encoder != "hybrid":
            raise ConfigError("skip connections require the hybrid encoder")
        if self.skip_count and self.decoder != "cup":
            raise ConfigError("skip connections require the cascaded decoder")
        if self.scale not in PRESETS:
            raise ConfigError(f"unknown scale preset {self.scale!r}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.encoder == "vit":
            if self.height % self.patch_size or self.width % self.patch_size:
                raise ConfigError(
                    f"resolution {self.height}x{self.width} not divisible by "
                    f"patch size {self.patch_size}"
                )
        else:
            if self.height % 16 or self.width % 16:
                raise ConfigError(
                    f"hybrid encoder needs resolution divisible by 16, "
                    f"got {self.height}x{self.width}"
                )
        if self.decoder == "cup":
            gh, gw = self.token_grid()
            ry, rx = self.height // gh, self.width // gw
            if ry != rx or ry & (ry - 1):
                raise ConfigError(
                    f"cascaded decoder needs a power-of-two upsampling ratio, "
                    f"got {ry}x{rx} from grid {gh}x{gw}"
                )
            widths = self.resolved_decoder_widths()
            if len(widths) != self.num_cup_blocks():
                raise ConfigError(
                    f"decoder needs {self.num_cup_blocks()} block widths, got {widths}"
                )
        return self

    # -- flat (de)serialization for config files and checkpoints -------------

    def to_flat(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out[f"model.{f.name}"] = str(v)
        return out

    @classmethod
    def from_flat(cls, flat):
        kwargs = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key not in flat:
                continue
            raw = flat[key]
            if f.name in ("backbone_widths", "decoder_widths"):
                kwargs[f.name] = tuple(int(x) for x in raw.split(",")) if raw else ()
            elif f.type is int:
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


class Model:
    """An encoder/decoder pair with a named-parameter registry."""

    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        rng = np.random.default_rng([int(seed), 2021])
        size = (config.height, config.width)
        if config.encoder == "vit":
            self.encoder = VitEncoder(
                rng, size, config.patch_size, config.in_channels,
                config.dim, config.depth, config.heads, config.mlp_dim,
            )
        else:
            self.encoder = HybridEncoder(
                rng, size, config.in_channels,
                config.dim, config.depth, config.heads, config.mlp_dim,
                backbone_widths=config.backbone_widths,
            )
        if config.decoder == "none":
            self.decoder = NaiveDecoder(rng, config.dim, config.num_classes)
        else:
            self.decoder = CupDecoder(
                rng,
                config.dim,
                config.resolved_decoder_widths(),
                config.num_classes,
                skip_channels=tuple(config.backbone_widths[:3]),
                skip_count=config.skip_count,
            )

    def forward(self, x):
        """(C, H, W) image tensor -> (K, H, W) logits tensor."""
        cfg = self.config
        if cfg.encoder == "hybrid":
            z, skips = self.encoder.forward(x)
        else:
            z, skips = self.encoder.forward(x), None
        hidden = reshape_hidden(z, cfg.token_grid())
        if cfg.decoder == "none":
            return self.decoder.forward(hidden, cfg.height, cfg.width)
        if cfg.skip_count == 3:
            selected = skips
        elif cfg.skip_count == 1:
            selected = [skips[1]]
        else:
            selected = None
        return self.decoder.forward(hidden, selected)

    def predict_slice(self, x2d):
        """Standardized inference on one 2D slice; returns (K, H, W) logits."""
        from tunet.data import standardize_slice

        arr = standardize_slice(np.asarray(x2d, dtype=np.float64))
        arr = arr.astype(T.get_default_dtype())
        with T.no_grad():
            logits = self.forward(Tensor(arr[None]))
        return logits.data

    def parameters(self):
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.params().items()})
        return out

    def parameter_list(self):
        return list(self.parameters().values())

    def parameter_count(self):
        return sum(p.size for p in self.parameter_list())

    def zero_grad(self):
        for p in self.parameter_list():
            p.grad = None
