"""Generator and discriminator networks.

Tensors are batched: projections ``(N, 1, H, W)`` (lateral ``(N, 1, H, D)``),
volumes and 3D feature maps ``(N, C, D, H, W)``.  Every channel count is a
full-scale count times the multiplier ``m``; at ``m = 1`` and 128-voxel
geometry the intermediate shapes are

    F2D 512x32x32, F3D 512x32^3, F_B 1024x32^3,
    f_u21 256x32^3, f_u22 128x64^3, f_u23 64x128^3,
    f_u11 / f_u12 64x128^3, F_o 32x128^3, F_u 224x128^3, output 1x128^3.

Normalization is ``GroupNorm(1, C)``: per sample, independent of batch size,
and still defined when a feature map has a single spatial element.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

MULTIPLIERS = (0.125, 0.25, 0.5, 1.0)
DISC_GRID = 5


def ch(n: int, m: float) -> int:
    return max(1, int(round(n * m)))


def norm(c: int) -> nn.Module:
    return nn.GroupNorm(1, c)


@dataclass
class GeneratorConfig:
    input_size: int = 32
    output_size: int = 32
    view: str = "double"
    multiplier: float = 0.125
    dropout: float = 0.25
    lift: str = "repeat"  # "repeat" or "conv" (learned 2D-conv substitute)
    duo_branch: bool = True  # image-lifting branch producing F_o

    def __post_init__(self):
        errs = []
        if self.input_size != self.output_size:
            errs.append(f"input_size {self.input_size} must equal output_size {self.output_size}")
        if self.output_size < 4 or self.output_size % 4:
            errs.append(f"output_size must be >= 4 and divisible by 4, got {self.output_size}")
        if self.view not in ("single", "double"):
            errs.append(f"view must be 'single' or 'double', got {self.view!r}")
        if self.multiplier not in MULTIPLIERS:
            errs.append(f"multiplier must be one of {MULTIPLIERS}, got {self.multiplier}")
        if not 0.0 <= self.dropout < 1.0:
            errs.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lift not in ("repeat", "conv"):
            errs.append(f"lift must be 'repeat' or 'conv', got {self.lift!r}")
        if errs:
            raise ValueError("; ".join(errs))

    @property
    def views(self) -> int:
        return 2 if self.view == "double" else 1

    @property
    def assembly_channels(self) -> int:
        m = self.multiplier
        return 3 * ch(64, m) + (ch(32, m) if self.duo_branch else 0)


def disc_block_count(size: int, grid: int = DISC_GRID) -> int:
    """Number of conv/pool blocks taking ``size`` to ``grid``.

    conv(k=4, s=1, p=2) maps n -> n + 1 and avgpool(k=3, s=2, p=1) maps
    n -> (n - 1) // 2 + 1, so one block maps n -> n // 2 + 1.
    """
    n, blocks = size, 0
    while n > grid:
        n = n // 2 + 1
        blocks += 1
    if n != grid:
        raise ValueError(f"no discriminator block count maps size {size} to {grid}^3")
    return blocks


@dataclass
class DiscriminatorConfig:
    input_size: int = 32
    multiplier: float = 0.125
    base_channels: int = 64
    max_channels: int = 512

    def __post_init__(self):
        self.blocks = disc_block_count(self.input_size)

    @property
    def channels(self) -> list[int]:
        m = self.multiplier
        return [min(ch(self.base_channels * 2 ** k, m), ch(self.max_channels, m)) for k in range(self.blocks)]


class BasicBlock2d(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.norm1 = norm(c)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1, bias=False)
        self.norm2 = norm(c)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        return F.relu(x + self.norm2(self.conv2(y)))


class Encoder2d(nn.Module):
    """ResNet-34 stem and first residual stage (3 basic blocks), stride 4,
    followed by a 1x1 projection to ``512 m`` channels."""

    def __init__(self, m: float):
        super().__init__()
        c = ch(64, m)
        self.stem = nn.Sequential(
            nn.Conv2d(1, c, 7, stride=2, padding=3, bias=False), norm(c), nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layer1 = nn.Sequential(*[BasicBlock2d(c) for _ in range(3)])
        self.proj = nn.Conv2d(c, ch(512, m), 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        y = self.proj(self.layer1(self.stem(x)))
        if y.shape[-2:] != (h // 4, w // 4):
            raise ValueError(f"encoder produced {tuple(y.shape[-2:])} for input {(h, w)}")
        return y


def lift(f: torch.Tensor, axis: str, repeats: int) -> torch.Tensor:
    """Replicate a 2D map ``(N, C, A, B)`` into a 3D grid ``(N, C, D, H, W)``.

    frontal: ``(A, B) = (H, W)``, the new depth axis gets ``repeats`` copies.
    lateral: ``(A, B) = (H, D)``, the new width axis gets ``repeats`` copies.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if f.dim() != 4:
        raise ValueError(f"expected (N, C, A, B), got shape {tuple(f.shape)}")
    if axis == "frontal":
        return f.unsqueeze(2).expand(-1, -1, repeats, -1, -1)
    if axis == "lateral":
        return f.transpose(2, 3).unsqueeze(-1).expand(-1, -1, -1, -1, repeats)
    raise ValueError(f"axis must be 'frontal' or 'lateral', got {axis!r}")


class ConvLift(nn.Module):
    """Learned substitute for :func:`lift`: a 2D conv emits ``C * repeats``
    channels that are reshaped into the inserted axis."""

    def __init__(self, c: int, repeats: int, axis: str):
        super().__init__()
        self.c, self.repeats, self.axis = c, repeats, axis
        self.conv = nn.Conv2d(c, c * repeats, 3, padding=1)

    def forward(self, f):
        n, c, a, b = f.shape
        y = self.conv(f).view(n, c, self.repeats, a, b)
        if self.axis == "frontal":
            return y  # (N, C, D, H, W)
        return y.permute(0, 1, 4, 3, 2)  # (N, C, b->D, H, repeats->W)


class Lifter(nn.Module):
    def __init__(self, c: int, repeats: int, axis: str, mode: str):
        super().__init__()
        self.repeats, self.axis = repeats, axis
        self.conv = ConvLift(c, repeats, axis) if mode == "conv" else None

    def forward(self, f):
        if self.conv is not None:
            return self.conv(f)
        return lift(f, self.axis, self.repeats)


def fuse(ff: torch.Tensor, fs: torch.Tensor) -> torch.Tensor:
    if ff.shape[2:] != fs.shape[2:]:
        raise ValueError(f"spatial mismatch: {tuple(ff.shape[2:])} vs {tuple(fs.shape[2:])}")
    return torch.cat([ff, fs], dim=1)


class ResBlock3d(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1, bias=False)
        self.norm1 = norm(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = norm(cout)
        self.skip = nn.Identity() if cin == cout else nn.Conv3d(cin, cout, 1, bias=False)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.skip(x) + self.norm2(self.conv2(y)))


class UpsampleType2(nn.Module):
    """Optional trilinear x2, then conv halving channels, norm, ReLU."""

    def __init__(self, cin: int, cout: int, scale: int = 2):
        super().__init__()
        self.scale = scale
        self.conv = nn.Conv3d(cin, cout, 3, padding=1, bias=False)
        self.norm = norm(cout)

    def forward(self, x):
        if self.scale != 1:
            x = F.interpolate(x, scale_factor=self.scale, mode="trilinear", align_corners=False)
        return F.relu(self.norm(self.conv(x)))


class UpsampleType1(nn.Module):
    """``steps`` x [trilinear x2, conv halving channels], then a 1x1 projection."""

    def __init__(self, cin: int, cout: int, steps: int):
        super().__init__()
        if steps < 1:
            raise ValueError("upsample_to_full needs at least one x2 step")
        self.steps = steps
        layers, c = [], cin
        for _ in range(steps):
            layers.append(UpsampleType2(c, max(c // 2, 1)))
            c = max(c // 2, 1)
        self.ups = nn.Sequential(*layers)
        self.proj = nn.Conv3d(c, cout, 1)

    def forward(self, x):
        return self.proj(self.ups(x))


class MultiScaleDecoder(nn.Module):
    def __init__(self, cin: int, m: float):
        super().__init__()
        c21, c22, c23 = ch(256, m), ch(128, m), ch(64, m)
        self.res1 = ResBlock3d(cin, ch(512, m))
        self.up1 = UpsampleType2(ch(512, m), c21, scale=1)
        self.res2 = ResBlock3d(c21, c21)
        self.up2 = UpsampleType2(c21, c22)
        self.res3 = ResBlock3d(c22, c22)
        self.up3 = UpsampleType2(c22, c23)

    def forward(self, fb):
        f21 = self.up1(self.res1(fb))
        f22 = self.up2(self.res2(f21))
        f23 = self.up3(self.res3(f22))
        return f21, f22, f23


class ImageBranch(nn.Module):
    """Replicates the raw projections to the output grid, then one ResBlock."""

    def __init__(self, size: int, views: int, m: float, mode: str):
        super().__init__()
        self.size = size
        self.front = Lifter(1, size, "frontal", mode)
        self.side = Lifter(1, size, "lateral", mode) if views == 2 else None
        self.block = ResBlock3d(views, ch(32, m))

    def stack(self, i_f, i_s=None):
        parts = [self.front(i_f)]
        if self.side is not None:
            if i_s is None:
                raise ValueError("double-view image branch needs a lateral projection")
            parts.append(self.side(i_s))
        return torch.cat(parts, dim=1)

    def forward(self, i_f, i_s=None):
        return self.block(self.stack(i_f, i_s))


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1, bias=False), norm(cout), nn.ReLU(),
        nn.Conv3d(cout, cout, 3, padding=1, bias=False), norm(cout), nn.ReLU(),
    )


def up_to(x, ref):
    return F.interpolate(x, size=ref.shape[2:], mode="trilinear", align_corners=False)


def down(x):
    return F.max_pool3d(x, 2, ceil_mode=True)


class UNetPlusPlus3d(nn.Module):
    """Four resolution levels, nodes X[i][j] with i + j <= 3.

    Nested nodes X01, X11, X21, X02, X12, X03 carry the dense skips; the
    top-row outputs X01..X03 each get a 1x1 head and the heads are averaged.
    """

    LEVELS = 4

    def __init__(self, cin: int, filters: list[int], cout: int):
        super().__init__()
        self.filters = filters
        f = filters
        self.nodes = nn.ModuleDict()
        for i in range(self.LEVELS):
            self.nodes[f"x{i}0"] = conv_block(cin if i == 0 else f[i - 1], f[i])
        for j in range(1, self.LEVELS):
            for i in range(self.LEVELS - j):
                self.nodes[f"x{i}{j}"] = conv_block(f[i] * j + f[i + 1], f[i])
        self.heads = nn.ModuleList([nn.Conv3d(f[0], cout, 1) for _ in range(1, self.LEVELS)])

    def forward(self, x):
        X = {}
        for i in range(self.LEVELS):
            X[i, 0] = self.nodes[f"x{i}0"](x if i == 0 else down(X[i - 1, 0]))
        for j in range(1, self.LEVELS):
            for i in range(self.LEVELS - j):
                same = [X[i, k] for k in range(j)]
                X[i, j] = self.nodes[f"x{i}{j}"](torch.cat(same + [up_to(X[i + 1, j - 1], X[i, 0])], 1))
        outs = [head(X[0, j]) for j, head in zip(range(1, self.LEVELS), self.heads)]
        return torch.stack(outs).mean(0)


class UNet3d(nn.Module):
    def __init__(self, cin: int, filters: list[int], cout: int = 1):
        super().__init__()
        self.enc = nn.ModuleList()
        c = cin
        for f in filters:
            self.enc.append(conv_block(c, f))
            c = f
        self.dec = nn.ModuleList([conv_block(filters[i] + filters[i + 1], filters[i])
                                  for i in range(len(filters) - 1)])
        self.out = nn.Conv3d(filters[0], cout, 1)

    def forward(self, x):
        skips = []
        for k, block in enumerate(self.enc):
            x = block(x if k == 0 else down(x))
            skips.append(x)
        for i in reversed(range(len(self.dec))):
            x = self.dec[i](torch.cat([skips[i], up_to(x, skips[i])], 1))
        return self.out(x)


class ReconstructionHead(nn.Module):
    def __init__(self, cin: int, m: float, p: float):
        super().__init__()
        self.dropout = nn.Dropout(p)
        k = ch(32, m)
        self.unetpp = UNetPlusPlus3d(cin, [ch(32, m), ch(64, m), ch(128, m), ch(256, m)], k)
        self.unet = UNet3d(k, [ch(32, m), ch(64, m)], 1)

    def forward(self, fu):
        y = self.unet(self.unetpp(self.dropout(fu)))
        if y.device.type != "meta" and not torch.isfinite(y).all():
            bad = (~torch.isfinite(y)).sum().item()
            raise FloatingPointError(f"reconstruction head produced {bad} non-finite values")
        return torch.sigmoid(y)


class Generator(nn.Module):
    """Dual-branch lifting generator."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        m, size = cfg.multiplier, cfg.output_size
        q = size // 4
        c2d = ch(512, m)
        self.encoder_f = Encoder2d(m)
        self.lift_f = Lifter(c2d, q, "frontal", cfg.lift)
        if cfg.views == 2:
            self.encoder_s = Encoder2d(m)
            self.lift_s = Lifter(c2d, q, "lateral", cfg.lift)
        self.decoder = MultiScaleDecoder(c2d * cfg.views, m)
        self.up11 = UpsampleType1(ch(256, m), ch(64, m), steps=2)
        self.up12 = UpsampleType1(ch(128, m), ch(64, m), steps=1)
        self.images = ImageBranch(size, cfg.views, m, cfg.lift) if cfg.duo_branch else None
        self.head = ReconstructionHead(cfg.assembly_channels, m, cfg.dropout)

    def _check_inputs(self, i_f, i_s):
        size = self.cfg.input_size
        if i_f.dim() != 4 or i_f.shape[1:] != (1, size, size):
            raise ValueError(f"frontal input must be (N, 1, {size}, {size}), got {tuple(i_f.shape)}")
        if self.cfg.views == 2:
            if i_s is None:
                raise ValueError("double-view generator needs a lateral projection")
            if i_s.shape != i_f.shape:
                raise ValueError(f"lateral input shape {tuple(i_s.shape)} != frontal {tuple(i_f.shape)}")
        elif i_s is not None:
            raise ValueError("single-view generator takes no lateral projection")

    def trace(self, i_f, i_s=None) -> dict[str, torch.Tensor]:
        """Forward pass returning every named intermediate."""
        self._check_inputs(i_f, i_s)
        t = {"F2D_f": self.encoder_f(i_f)}
        t["F3D_f"] = self.lift_f(t["F2D_f"])
        if self.cfg.views == 2:
            t["F2D_s"] = self.encoder_s(i_s)
            t["F3D_s"] = self.lift_s(t["F2D_s"])
            t["F_B"] = fuse(t["F3D_f"], t["F3D_s"])
        else:
            t["F_B"] = t["F3D_f"]
        t["f_u21"], t["f_u22"], t["f_u23"] = self.decoder(t["F_B"])
        t["f_u11"] = self.up11(t["f_u21"])
        t["f_u12"] = self.up12(t["f_u22"])
        parts = [t["f_u11"], t["f_u12"], t["f_u23"]]
        if self.images is not None:
            t["F_o"] = self.images(i_f, i_s)
            parts = [t["F_o"]] + parts
        t["F_u"] = assemble(*parts)
        t["volume"] = self.head(t["F_u"])
        return t

    def forward(self, i_f, i_s=None):
        return self.trace(i_f, i_s)["volume"]


def assemble(*maps: torch.Tensor) -> torch.Tensor:
    """Channel concatenation in argument order (``F_o, f_u11, f_u12, f_u23``)."""
    spatial = {tuple(f.shape[2:]) for f in maps}
    if len(spatial) != 1:
        raise ValueError(f"assemble needs equal spatial dims, got {sorted(spatial)}")
    return torch.cat(maps, dim=1)


class Discriminator(nn.Module):
    """[conv(4, s1, p2) -> LeakyReLU -> avgpool(3, s2, p1)] x blocks, then a
    1x1x1 conv and sigmoid giving a 5x5x5 probability grid."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        layers, c = [], 1
        for co in cfg.channels:
            layers += [nn.Conv3d(c, co, 4, stride=1, padding=2), nn.LeakyReLU(0.2),
                       nn.AvgPool3d(3, stride=2, padding=1)]
            c = co
        self.features = nn.Sequential(*layers)
        self.out = nn.Conv3d(c, 1, 1)

    def forward(self, v):
        size = self.cfg.input_size
        if v.shape[1:] != (1, size, size, size):
            raise ValueError(f"discriminator input must be (N, 1, {size}^3), got {tuple(v.shape)}")
        return torch.sigmoid(self.out(self.features(v)))


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


