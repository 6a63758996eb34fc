"""Dual-path U-Net backbone: DPN encoder and the two decoder variants.

Every block carries a :class:`DualStream`: a residual part updated by
addition and a dense part grown by concatenation.  The decoder returns
five feature maps at strides 32, 16, 8, 4 and 2 (coarsest first).

Decoder variants
----------------
``type1``
    Nearest-neighbour upsampling of the previous pyramid level, followed
    by concatenation with the encoder skip and a DPN block.
``type2``
    The upsampling itself is a DPN block whose 3x3 convolution is a
    stride-2 transposed convolution.  Its shortcut is the pre-upsampling
    stream, interpolated 2x, so the previous decoder state reaches the
    new resolution through both the additive and the concatenative path.
"""

import enum
from collections import OrderedDict
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgumentError

PYRAMID_STRIDES = (32, 16, 8, 4, 2)


class DecoderType(str, enum.Enum):
    TYPE1 = "type1"
    TYPE2 = "type2"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace(" ", "")
        aliases = {"type1": cls.TYPE1, "typei": cls.TYPE1, "1": cls.TYPE1, "i": cls.TYPE1,
                   "type2": cls.TYPE2, "typeii": cls.TYPE2, "2": cls.TYPE2, "ii": cls.TYPE2}
        if key not in aliases:
            raise InvalidArgumentError(f"unknown decoder type {value!r}; use type1 or type2")
        return aliases[key]


@dataclass
class BackboneConfig:
    stem_channels: int = 64
    stem_dense_channels: int = 16
    stage_block_counts: tuple = (2, 2, 3, 2)
    stage_residual_widths: tuple = (64, 128, 256, 512)
    stage_bottleneck_widths: tuple = (48, 96, 192, 384)
    dense_increment_k: tuple = (16, 16, 24, 64)
    groups: int = 16
    decoder_type: DecoderType = DecoderType.TYPE2
    pyramid_channels: int = 128
    decoder_residual_width: int = 64
    decoder_bottleneck_width: int = 64
    decoder_dense_increment: int = 16
    anchor_scales: tuple = (128.0, 64.0, 32.0, 16.0, 8.0)

    def __post_init__(self):
        self.decoder_type = DecoderType.parse(self.decoder_type)
        for name in ("stage_block_counts", "stage_residual_widths",
                     "stage_bottleneck_widths", "dense_increment_k", "anchor_scales"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        per_stage = (self.stage_block_counts, self.stage_residual_widths,
                     self.stage_bottleneck_widths, self.dense_increment_k)
        if any(len(v) != 4 for v in per_stage):
            raise InvalidArgumentError("the encoder has exactly four stages")
        if len(self.anchor_scales) != 5:
            raise InvalidArgumentError("one anchor scale per pyramid level (five)")
        if min(self.stage_block_counts) < 1:
            raise InvalidArgumentError("every stage needs at least one block")
        if not 0 <= self.stem_dense_channels < self.stem_channels:
            raise InvalidArgumentError("stem dense part must leave a nonempty residual part")
        for width in (*self.stage_bottleneck_widths, self.decoder_bottleneck_width):
            if width % self.groups:
                raise InvalidArgumentError(f"groups={self.groups} does not divide bottleneck width {width}")

    @classmethod
    def micro(cls, decoder_type=DecoderType.TYPE2, width=8, **overrides):
        """Tiny configuration for gradient checks and desk-scale smoke runs."""
        half = width // 2
        params = dict(
            stem_channels=width, stem_dense_channels=width // 4,
            stage_block_counts=(1, 1, 1, 1),
            stage_residual_widths=(width,) * 4,
            stage_bottleneck_widths=(half,) * 4,
            dense_increment_k=(half,) * 4,
            groups=2,
            decoder_type=decoder_type,
            pyramid_channels=width,
            decoder_residual_width=width,
            decoder_bottleneck_width=half,
            decoder_dense_increment=half,
        )
        params.update(overrides)
        return cls(**params)

    def to_dict(self):
        d = asdict(self)
        d["decoder_type"] = self.decoder_type.value
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def stage_channels(self, s):
        """Total output channels of encoder stage ``s`` (0-based)."""
        k = self.dense_increment_k[s]
        return self.stage_residual_widths[s] + 2 * k + k * self.stage_block_counts[s]


@dataclass
class DualStream:
    residual: torch.Tensor
    dense: torch.Tensor

    def __post_init__(self):
        if self.residual.shape[-2:] != self.dense.shape[-2:]:
            raise InvalidArgumentError("residual and dense parts differ in spatial size")

    @classmethod
    def from_tensor(cls, x):
        return cls(x, x.new_zeros(x.shape[0], 0, *x.shape[2:]))

    def cat(self):
        return torch.cat([self.residual, self.dense], dim=1)

    @property
    def residual_channels(self):
        return self.residual.shape[1]

    @property
    def dense_channels(self):
        return self.dense.shape[1]

    @property
    def spatial(self):
        return tuple(self.residual.shape[-2:])


@dataclass
class FeaturePyramid:
    levels: list
    strides: tuple = PYRAMID_STRIDES
    anchor_scale_px: tuple = (128.0, 64.0, 32.0, 16.0, 8.0)

    def __post_init__(self):
        if len(self.levels) != 5 or len(self.strides) != 5 or len(self.anchor_scale_px) != 5:
            raise InvalidArgumentError("a feature pyramid has exactly five levels")

    @property
    def channels(self):
        return self.levels[0].shape[-3]

    def __len__(self):
        return len(self.levels)


def conv_bn(cin, cout, kernel, stride=1, groups=1, relu=True, transposed=False):
    pad = kernel // 2
    if transposed:
        conv = nn.ConvTranspose2d(cin, cout, kernel, stride=stride, padding=pad,
                                  output_padding=stride - 1, groups=groups, bias=False)
    else:
        conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad, groups=groups, bias=False)
    layers = [("conv", conv), ("bn", nn.BatchNorm2d(cout))]
    if relu:
        layers.append(("relu", nn.ReLU()))
    return nn.Sequential(OrderedDict(layers))


class DPNBlock(nn.Module):
    """Bottleneck block with a residual and a dense output path.

    ``mode`` is ``"keep"``, ``"down2"`` or ``"up2"``.  With
    ``project=True`` (or whenever a keep block changes the residual width)
    the shortcut is a 1x1 convolution of the whole input producing the new
    residual part and a fresh dense part of ``2 * k`` channels.  An up2
    shortcut is the input interpolated 2x; only its residual part is
    projected, and only if the width changes.
    """

    def __init__(self, in_residual, in_dense, out_residual, bottleneck, k, groups,
                 mode="keep", project=False):
        super().__init__()
        if mode not in ("keep", "down2", "up2"):
            raise InvalidArgumentError(f"unknown spatial mode {mode!r}")
        if bottleneck % groups:
            raise InvalidArgumentError("groups must divide the bottleneck width")
        self.in_residual, self.in_dense = in_residual, in_dense
        self.out_residual, self.k, self.mode = out_residual, k, mode
        cin = in_residual + in_dense
        stride = 1 if mode == "keep" else 2

        self.project = mode == "down2" or (mode == "keep" and (project or in_residual != out_residual))
        if self.project:
            self.shortcut = conv_bn(cin, out_residual + 2 * k, 1, stride=stride, relu=False)
            self.out_dense = 3 * k
        else:
            self.shortcut = None
            self.out_dense = in_dense + k
        self.residual_proj = None
        if mode == "up2" and in_residual != out_residual:
            self.residual_proj = conv_bn(in_residual, out_residual, 1, relu=False)

        self.reduce = conv_bn(cin, bottleneck, 1)
        self.grouped = conv_bn(bottleneck, bottleneck, 3, stride=stride, groups=groups,
                               transposed=mode == "up2")
        self.expand = conv_bn(bottleneck, out_residual + k, 1, relu=False)
        self.act = nn.ReLU()

    def forward(self, x):
        if x.residual_channels != self.in_residual or x.dense_channels != self.in_dense:
            raise InvalidArgumentError(
                f"block expects ({self.in_residual}, {self.in_dense}) channels, "
                f"got ({x.residual_channels}, {x.dense_channels})")
        full = x.cat()
        f = self.expand(self.grouped(self.reduce(full)))
        if self.project:
            s = self.shortcut(full)
            s_res, s_dense = s[:, :self.out_residual], s[:, self.out_residual:]
        elif self.mode == "up2":
            s_res = F.interpolate(x.residual, scale_factor=2, mode="nearest")
            s_dense = F.interpolate(x.dense, scale_factor=2, mode="nearest")
            if self.residual_proj is not None:
                s_res = self.residual_proj(s_res)
        else:
            s_res, s_dense = x.residual, x.dense
        residual = self.act(s_res + f[:, :self.out_residual])
        dense = torch.cat([s_dense, f[:, self.out_residual:]], dim=1)
        return DualStream(residual, dense)


class Stem(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.conv = conv_bn(3, cfg.stem_channels, 7, stride=2)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.n_residual = cfg.stem_channels - cfg.stem_dense_channels

    def forward(self, image):
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise InvalidArgumentError(f"image size {h}x{w} is not divisible by 32")
        y = self.pool(self.conv(image))
        return DualStream(y[:, :self.n_residual], y[:, self.n_residual:])


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.stem = Stem(cfg)
        r, d = cfg.stem_channels - cfg.stem_dense_channels, cfg.stem_dense_channels
        stages = []
        for s in range(4):
            blocks = []
            width, k = cfg.stage_residual_widths[s], cfg.dense_increment_k[s]
            for b in range(cfg.stage_block_counts[s]):
                mode = "down2" if (b == 0 and s > 0) else "keep"
                blk = DPNBlock(r, d, width, cfg.stage_bottleneck_widths[s], k, cfg.groups,
                               mode=mode, project=b == 0)
                blocks.append(blk)
                r, d = width, blk.out_dense
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    def forward(self, image):
        x = self.stem(image)
        outs = []
        for stage in self.stages:
            for blk in stage:
                x = blk(x)
            outs.append(x)
        return outs


class _DecoderBase(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        p = cfg.pyramid_channels
        self.lateral = conv_bn(cfg.stage_channels(3), p, 1)
        # stride-16, -8 and -4 levels take the encoder stage of equal stride; stride 2 has none
        self.skip_channels = [cfg.stage_channels(2), cfg.stage_channels(1), cfg.stage_channels(0), 0]

    def _merge_block(self, cin):
        c = self.cfg
        return DPNBlock(cin, 0, c.decoder_residual_width, c.decoder_bottleneck_width,
                        c.decoder_dense_increment, c.groups, mode="keep", project=True)

    def _extra_conv(self, cin):
        return conv_bn(cin, self.cfg.pyramid_channels, 3)

    @staticmethod
    def _with_skip(x, skips, i):
        return torch.cat([x, skips[i].cat()], dim=1) if i < len(skips) else x


class DecoderTypeI(_DecoderBase):
    def __init__(self, cfg):
        super().__init__(cfg)
        p = cfg.pyramid_channels
        self.merge = nn.ModuleList()
        self.extra = nn.ModuleList()
        for skip in self.skip_channels:
            blk = self._merge_block(p + skip)
            self.merge.append(blk)
            self.extra.append(self._extra_conv(blk.out_residual + blk.out_dense))

    def forward(self, stages):
        skips = [stages[2], stages[1], stages[0]]
        level = self.lateral(stages[3].cat())
        levels = [level]
        for i in range(4):
            up = F.interpolate(level, scale_factor=2, mode="nearest")
            merged = self.merge[i](DualStream.from_tensor(self._with_skip(up, skips, i)))
            level = self.extra[i](merged.cat())
            levels.append(level)
        return levels


class DecoderTypeII(_DecoderBase):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        self.extra = nn.ModuleList()
        r = cfg.stage_residual_widths[3]
        d = cfg.stage_channels(3) - r
        for skip in self.skip_channels:
            up = DPNBlock(r, d, cfg.decoder_residual_width, cfg.decoder_bottleneck_width,
                          cfg.decoder_dense_increment, cfg.groups, mode="up2")
            blk = self._merge_block(up.out_residual + up.out_dense + skip)
            self.up.append(up)
            self.merge.append(blk)
            self.extra.append(self._extra_conv(blk.out_residual + blk.out_dense))
            r, d = blk.out_residual, blk.out_dense

    def forward(self, stages):
        skips = [stages[2], stages[1], stages[0]]
        levels = [self.lateral(stages[3].cat())]
        state = stages[3]
        for i in range(4):
            up = self.up[i](state)
            state = self.merge[i](DualStream.from_tensor(self._with_skip(up.cat(), skips, i)))
            levels.append(self.extra[i](state.cat()))
        return levels


class Backbone(nn.Module):
    """Stem, four-stage DPN encoder and the configured decoder."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        decoder_cls = DecoderTypeI if cfg.decoder_type is DecoderType.TYPE1 else DecoderTypeII
        self.decoder = decoder_cls(cfg)

    def forward(self, image):
        unbatched = image.dim() == 3
        if unbatched:
            image = image[None]
        levels = self.decoder(self.encoder(image))
        if unbatched:
            levels = [lv[0] for lv in levels]
        return FeaturePyramid(levels, PYRAMID_STRIDES, self.cfg.anchor_scales)

