"""Networks: residual generators, patch discriminators, the FCN segmenter
with its encoder feature tap, and the bundle that ties them together."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ModelConfig:
    num_sources: int = 2
    num_classes: int = 5
    in_channels: int = 3
    gen_width: int = 32  # stem width; downsamplers double it twice
    gen_blocks: int = 4
    disc_width: int = 32  # four stride-2 layers: w, 2w, 4w, 8w
    seg_widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    feat_disc_width: int = 64
    seed: int = 0

    def to_dict(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            kwargs[f.name] = tuple(int(x) for x in raw.split(",")) if f.name == "seg_widths" else int(raw)
        return cls(**kwargs)


# Paper-sized generator/discriminator presets; the segmenter stays desk-sized.
PAPER_PRESET = dict(gen_width=64, gen_blocks=9, disc_width=64)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """ResNet image-to-image generator: 7x7 stem, two stride-2 downsamplers,
    residual blocks, two upsamplers, 7x7 tanh head.  Shape preserving."""

    def __init__(self, channels: int = 3, width: int = 32, n_blocks: int = 4):
        super().__init__()
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(channels, width, 7),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
        ]
        c = width
        for _ in range(2):
            layers += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * c), nn.ReLU(inplace=True)]
            c *= 2
        layers += [ResidualBlock(c) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(c // 2),
                nn.ReLU(inplace=True),
            ]
            c //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(c, channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"generator input spatial size must be divisible by 4, got {h}x{w}")
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """Four stride-2 4x4 convolutions with leaky ReLU and a 1-channel head.
    Returns a B x 1 x H/16 x W/16 logit map."""

    def __init__(self, channels: int = 3, width: int = 32):
        super().__init__()
        layers = []
        c_in = channels
        for k in range(4):
            c_out = width * 2 ** k
            layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            c_in = c_out
        layers.append(nn.Conv2d(c_in, 1, 3, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h < 16 or w < 16:
            raise ValueError(f"discriminator input must be at least 16x16, got {h}x{w}")
        return self.model(x)


class FeatureDiscriminator(nn.Module):
    """Three stride-1 convolutions on the encoder feature map, then a logit head."""

    def __init__(self, channels: int = 64, width: int = 64):
        super().__init__()
        layers = []
        c_in = channels
        for _ in range(3):
            layers += [nn.Conv2d(c_in, width, 3, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            c_in = width
        layers.append(nn.Conv2d(c_in, 1, 3, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, f):
        return self.model(f)


def _conv_block(c_in, c_out, stride=1):
    groups = 4 if c_out % 4 == 0 else 1
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.GroupNorm(groups, c_out),
        nn.ReLU(inplace=True),
    )


class Segmenter(nn.Module):
    """Small FCN: four encoder blocks (three downsample by 2), a decoder with
    skip connections back to full resolution, and a 1x1 class head.

    ``forward`` returns ``(logits, feature)`` where ``feature`` is the output
    of the encoder's last convolution block (stride 8).
    """

    def __init__(self, channels: int = 3, num_classes: int = 5, widths=(16, 32, 64, 64)):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.enc1 = _conv_block(channels, w1)
        self.enc2 = _conv_block(w1, w2, stride=2)
        self.enc3 = _conv_block(w2, w3, stride=2)
        self.enc4 = _conv_block(w3, w4, stride=2)
        self.dec3 = _conv_block(w4 + w3, w3)
        self.dec2 = _conv_block(w3 + w2, w2)
        self.dec1 = _conv_block(w2 + w1, w1)
        self.head = nn.Conv2d(w1, num_classes, 1)
        self.feature_channels = w4

    def encoder_parameters(self):
        for m in (self.enc1, self.enc2, self.enc3, self.enc4):
            yield from m.parameters()

    def encode(self, x):
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"segmenter input spatial size must be divisible by 8, got {h}x{w}")
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        e4 = self.enc4(e3)
        return e1, e2, e3, e4

    def forward(self, x):
        e1, e2, e3, e4 = self.encode(x)
        d = self.dec3(torch.cat([F.interpolate(e4, scale_factor=2, mode="nearest"), e3], 1))
        d = self.dec2(torch.cat([F.interpolate(d, scale_factor=2, mode="nearest"), e2], 1))
        d = self.dec1(torch.cat([F.interpolate(d, scale_factor=2, mode="nearest"), e1], 1))
        return self.head(d), e4

    def features(self, x):
        return self.encode(x)[-1]


class ModelBundle(nn.Module):
    """All networks of one run.

    Per source i: ``g_st[i]`` (source to target), ``g_ts[i]`` (target to
    source), ``d_src[i]`` (pixel discriminator on source style, also used
    for the cross-domain cycle term) and ``d_agg[i]`` (sub-domain
    aggregation discriminator).  Shared: ``d_tgt``, ``d_feat`` and the task
    segmenter ``seg``.  ``frozen_seg[i]`` are the per-source pretrained
    segmenters; ``seg_adapted`` is ``seg`` itself, not a copy.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.num_sources < 1:
            raise ValueError("need at least one source domain")
        if config.num_classes < 2:
            raise ValueError("need at least two classes")
        self.config = config
        c, M = config.in_channels, config.num_sources
        self.g_st = nn.ModuleList(Generator(c, config.gen_width, config.gen_blocks) for _ in range(M))
        self.g_ts = nn.ModuleList(Generator(c, config.gen_width, config.gen_blocks) for _ in range(M))
        self.d_src = nn.ModuleList(PatchDiscriminator(c, config.disc_width) for _ in range(M))
        self.d_agg = nn.ModuleList(PatchDiscriminator(c, config.disc_width) for _ in range(M))
        self.d_tgt = PatchDiscriminator(c, config.disc_width)
        self.seg = Segmenter(c, config.num_classes, config.seg_widths)
        self.d_feat = FeatureDiscriminator(self.seg.feature_channels, config.feat_disc_width)
        self.frozen_seg = nn.ModuleList(Segmenter(c, config.num_classes, config.seg_widths) for _ in range(M))

    @property
    def seg_adapted(self) -> Segmenter:
        return self.seg

    @property
    def num_sources(self) -> int:
        return self.config.num_sources

    def freeze_source_segmenters(self):
        for p in self.frozen_seg.parameters():
            p.requires_grad_(False)
        self.frozen_seg.eval()


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """N(0, 0.02) for generator/discriminator convolutions, Kaiming-normal
    for the segmenter; zero biases; unit/zero GroupNorm affine terms."""
    in_segmenter = {id(m) for seg in module.modules() if isinstance(seg, Segmenter) for m in seg.modules()}
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            if id(m) in in_segmenter:
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
                std = (2.0 / fan_out) ** 0.5
            else:
                std = 0.02
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def init_bundle(config: ModelConfig) -> ModelBundle:
    bundle = ModelBundle(config)
    init_weights(bundle, torch.Generator().manual_seed(config.seed))
    return bundle


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
