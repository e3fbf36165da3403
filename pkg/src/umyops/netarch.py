"""Network: sequence encoders, TPS registration heads, anatomy decoders with
multi-sequence fusion, and the prior-gated pathology U-Net."""
from __future__ import annotations

from dataclasses import dataclass, asdict, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tps
from .datapipe import MOVING, SEQUENCES


class NumericError(RuntimeError):
    pass


@dataclass
class NetConfig:
    size: int = 128
    channels: tuple = (16, 32, 64, 128)
    grid_m: int = 4
    grid_extent: float = 256.0
    disp_scale: float = 0.125  # head output unit, as a fraction of the image size

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.size % (2 ** (len(self.channels) - 1)):
            raise ValueError(f"size {self.size} not divisible by 2^{len(self.channels) - 1}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, cin, channels):
        super().__init__()
        self.blocks = nn.ModuleList()
        prev = cin
        for c in channels:
            self.blocks.append(conv_block(prev, c))
            prev = c

    def forward(self, x):
        feats = []
        for i, block in enumerate(self.blocks):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats


class RegistrationHead(nn.Module):
    """Deepest moving + CRI features -> one displacement per control point.

    Features are pooled onto the ``m x m`` control grid so each control point is
    predicted from the region around it. The last layer starts at zero (identity warp).
    """

    def __init__(self, cdeep, m, unit):
        super().__init__()
        self.m = m
        self.unit = unit
        self.body = nn.Sequential(
            nn.Conv2d(2 * cdeep, cdeep, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(cdeep, cdeep, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.out = nn.Conv2d(cdeep, 2, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, f_moving, f_cri):
        x = self.body(torch.cat([f_moving, f_cri], 1))
        x = F.adaptive_avg_pool2d(x, self.m)
        d = self.out(x) * self.unit  # (B, 2, m, m), row-major over (x, y) grid indices
        return d.flatten(2).transpose(1, 2)  # (B, m*m, 2)


def msf_fuse(f_in, f_bssfp, f_t2, f_lge, disp: dict, full_size, grid: tps.ControlGrid, mode="bilinear"):
    """Warp moving-sequence features into the CRI frame, then concatenate.

    ``disp`` holds ``(B, K, 2)`` displacements in pixels of ``full_size``; they are
    rescaled to the feature-map size before warping.
    """
    shapes = {tuple(t.shape[-2:]) for t in (f_in, f_bssfp, f_t2, f_lge)}
    if len(shapes) != 1:
        raise ValueError(f"MSF inputs at different levels: {shapes}")
    h, w = shapes.pop()
    H, W = full_size
    warped = []
    for name, f in (("bSSFP", f_bssfp), ("T2", f_t2)):
        d = tps.rescale_deltas_tensor(disp[name], H, W, h, w)
        warped.append(tps.warp_batch(f, d, (h, w), grid, mode))
    return torch.cat([*warped, f_lge, f_in], 1)


def scale_prior(myo_prob, size):
    if myo_prob.dim() == 3:
        myo_prob = myo_prob.unsqueeze(1)
    if tuple(myo_prob.shape[-2:]) == tuple(size):
        return myo_prob
    return F.interpolate(myo_prob, size=size, mode="bilinear", align_corners=False)


def spg_attention(f_in, f_mp, myo_prob):
    if f_in.shape != f_mp.shape:
        raise ValueError(f"SPG inputs differ: {tuple(f_in.shape)} vs {tuple(f_mp.shape)}")
    prior = scale_prior(myo_prob, f_mp.shape[-2:])
    return torch.sigmoid((f_in + f_mp) * prior)


def spg_gate(f_in, f_mp, myo_prob):
    """Gate encoder features by the myocardium prior; returns ``cat(F_mp * A, F_in)``."""
    att = spg_attention(f_in, f_mp, myo_prob)
    return torch.cat([f_mp * att, f_in], 1)


def _up(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


class AnatomyDecoder(nn.Module):
    """U-Net decoder producing a myocardium probability map; ``fuse`` enables MSF."""

    def __init__(self, channels, fuse: bool):
        super().__init__()
        self.fuse = fuse
        self.reduce = nn.ModuleList()
        self.blocks = nn.ModuleList()
        k = 4 if fuse else 2
        for i in range(len(channels) - 2, -1, -1):
            self.reduce.append(nn.Conv2d(channels[i + 1], channels[i], 1))
            self.blocks.append(conv_block(k * channels[i], channels[i]))
        self.head = nn.Conv2d(channels[0], 1, 1)

    def forward(self, feats, others=None, disp=None, full_size=None, grid=None):
        x = feats[-1]
        n = len(feats)
        for j, (red, block) in enumerate(zip(self.reduce, self.blocks)):
            level = n - 2 - j
            x = red(_up(x))
            if self.fuse:
                x = msf_fuse(x, others["bSSFP"][level], others["T2"][level], feats[level], disp, full_size, grid)
            else:
                x = torch.cat([feats[level], x], 1)
            x = block(x)
        return torch.sigmoid(self.head(x))[:, 0]


class PathologyNet(nn.Module):
    """U-shaped pathology sub-network with a spatial prior gate at every decoder level."""

    def __init__(self, channels, n_classes=3):
        super().__init__()
        self.encoder = Encoder(3, channels)
        self.reduce = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(len(channels) - 2, -1, -1):
            self.reduce.append(nn.Conv2d(channels[i + 1], channels[i], 1))
            self.blocks.append(conv_block(2 * channels[i], channels[i]))
        self.head = nn.Conv2d(channels[0], n_classes, 1)

    def forward(self, aligned, myo_prob):
        feats = self.encoder(aligned)
        x = feats[-1]
        n = len(feats)
        for j, (red, block) in enumerate(zip(self.reduce, self.blocks)):
            level = n - 2 - j
            x = red(_up(x))
            x = block(spg_gate(x, feats[level], myo_prob))
        return self.head(x)


STAGE1_PARTS = ("enc_bSSFP", "enc_LGE", "enc_T2", "reg_bSSFP", "reg_T2", "dec_bSSFP", "dec_LGE", "dec_T2")
STAGE2_PARTS = ("pathology",)


class UMyoPS(nn.Module):
    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.grid = tps.make_control_grid(cfg.grid_m, cfg.grid_extent)
        self.enc = nn.ModuleDict({s: Encoder(1, ch) for s in SEQUENCES})
        unit = cfg.disp_scale * cfg.size
        self.reg = nn.ModuleDict({s: RegistrationHead(ch[-1], cfg.grid_m, unit) for s in MOVING})
        self.dec = nn.ModuleDict({s: AnatomyDecoder(ch, fuse=(s == "LGE")) for s in SEQUENCES})
        self.pathology = PathologyNet(ch)

    def part(self, name):
        kind, _, seq = name.partition("_")
        if name == "pathology":
            return self.pathology
        return {"enc": self.enc, "reg": self.reg, "dec": self.dec}[kind][seq]

    def stage1_modules(self):
        return [self.part(n) for n in STAGE1_PARTS]

    def encode(self, images: dict):
        return {s: self.enc[s](images[s]) for s in SEQUENCES}

    def forward_registration(self, images: dict, feats=None) -> dict:
        feats = feats or self.encode(images)
        disp = {s: self.reg[s](feats[s][-1], feats["LGE"][-1]) for s in MOVING}
        for s, d in disp.items():
            if not torch.isfinite(d).all():
                raise NumericError(f"non-finite displacements from registration head {s}: "
                                   f"max |d| = {d.abs().nan_to_num(0).max().item():.3g}")
        return disp

    def forward_anatomy(self, images: dict, disp: dict, feats=None) -> dict:
        feats = feats or self.encode(images)
        size = tuple(images["LGE"].shape[-2:])
        out = {"LGE": self.dec["LGE"](feats["LGE"], feats, disp, size, self.grid)}
        for s in MOVING:
            out[s] = self.dec[s](feats[s])
        return out

    def warp(self, x, disp_seq, mode="bilinear"):
        size = tuple(x.shape[-2:])
        return tps.warp_batch(x, disp_seq, size, self.grid, mode)

    def align_images(self, images: dict, disp: dict) -> torch.Tensor:
        """Aligned set ``I'`` stacked as channels (bSSFP, LGE, T2)."""
        chans = [self.warp(images[s], disp[s]) if s in disp else images[s] for s in SEQUENCES]
        return torch.cat(chans, 1)

    def forward_stage1(self, images: dict):
        feats = self.encode(images)
        disp = self.forward_registration(images, feats)
        myo = self.forward_anatomy(images, disp, feats)
        return disp, myo

    def forward_pathology(self, aligned, myo_prob_cri):
        return self.pathology(aligned, myo_prob_cri)


@dataclass
class ForwardOutputs:
    disp: dict
    myo_prob: dict
    pathology_logits: torch.Tensor
    warped_images: torch.Tensor
    extras: dict = field(default_factory=dict)
