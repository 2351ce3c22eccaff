"""PDNet: image encoder with channel compression, click-driven prior
encoder, dual-path decoder with scale-aware attention, and deep-supervision
mask/diameter heads."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .geometry import Point2D

NUM_SCALES = 5
STRIDES = [2, 4, 8, 16, 32]


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: str = "tiny_cnn"  # "paper_resnest50" | "tiny_cnn"
    compress_channels: int = 32
    aspp_rates: tuple = (1, 6, 12, 18)
    enable_pe: bool = True
    enable_t2d: bool = True
    enable_b2u: bool = True
    enable_sa: bool = True
    input_size: int = 256

    def __post_init__(self):
        if self.backbone not in ("paper_resnest50", "tiny_cnn"):
            raise ModelError(f"unknown backbone: {self.backbone}")
        if self.compress_channels < 1:
            raise ModelError("compress_channels must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["aspp_rates"] = tuple(d.get("aspp_rates", (1, 6, 12, 18)))
        return cls(**d)


@dataclass
class SideOutputs:
    mask_side: list  # 11 logit maps: 5 PE + 5 decoder scales + 1 full-res
    diam_side: list  # 3 four-channel maps: full, stride 2, stride 4


def conv_bn_relu(cin, cout, k=3, stride=1, dilation=1):
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=pad,
                  dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True))


class TinyBackbone(nn.Module):
    """Five strided stages (channels 16..256) for desk-scale training."""

    CHANNELS = [16, 32, 64, 128, 256]

    def __init__(self, in_ch=3):
        super().__init__()
        stages = []
        prev = in_ch
        for c in self.CHANNELS:
            stages.append(nn.Sequential(
                conv_bn_relu(prev, c, stride=2),
                conv_bn_relu(c, c)))
            prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class SplitAttentionConv(nn.Module):
    """Split-attention convolution (radix groups competing via softmax)."""

    def __init__(self, cin, cout, radix=2, reduction=4):
        super().__init__()
        self.radix = radix
        self.cout = cout
        self.conv = nn.Conv2d(cin, cout * radix, 3, padding=1,
                              groups=radix, bias=False)
        self.bn0 = nn.BatchNorm2d(cout * radix)
        inter = max(cout // reduction, 8)
        self.fc1 = nn.Conv2d(cout, inter, 1)
        self.bn1 = nn.BatchNorm2d(inter)
        self.fc2 = nn.Conv2d(inter, cout * radix, 1)

    def forward(self, x):
        x = F.relu(self.bn0(self.conv(x)), inplace=True)
        b = x.shape[0]
        splits = x.view(b, self.radix, self.cout, *x.shape[2:])
        gap = splits.sum(dim=1).mean(dim=(2, 3), keepdim=True)
        att = self.fc2(F.relu(self.bn1(self.fc1(gap)), inplace=True))
        att = att.view(b, self.radix, self.cout, 1, 1).softmax(dim=1)
        return (splits * att).sum(dim=1)


class SplitAttentionBottleneck(nn.Module):
    def __init__(self, cin, planes, stride=1):
        super().__init__()
        cout = planes * 4
        self.reduce = conv_bn_relu(cin, planes, k=1)
        self.splat = SplitAttentionConv(planes, planes)
        self.pool = nn.AvgPool2d(3, stride, padding=1) if stride > 1 else nn.Identity()
        self.expand = nn.Sequential(
            nn.Conv2d(planes, cout, 1, bias=False), nn.BatchNorm2d(cout))
        self.short = None
        if stride > 1 or cin != cout:
            self.short = nn.Sequential(
                nn.AvgPool2d(stride, stride) if stride > 1 else nn.Identity(),
                nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = self.expand(self.pool(self.splat(self.reduce(x))))
        res = self.short(x) if self.short is not None else x
        return F.relu(out + res, inplace=True)


class ResNeStBackbone(nn.Module):
    """Split-attention residual backbone in the ResNet-50 layout
    (3/4/6/3 bottlenecks), trained from scratch."""

    def __init__(self, in_ch=3):
        super().__init__()
        self.stem = nn.Sequential(
            conv_bn_relu(in_ch, 32, stride=2),
            conv_bn_relu(32, 32),
            conv_bn_relu(32, 64))
        self.pool = nn.MaxPool2d(3, 2, padding=1)
        self.layer1 = self._layer(64, 64, 3, stride=1)
        self.layer2 = self._layer(256, 128, 4, stride=2)
        self.layer3 = self._layer(512, 256, 6, stride=2)
        self.layer4 = self._layer(1024, 512, 3, stride=2)

    @staticmethod
    def _layer(cin, planes, blocks, stride):
        layers = [SplitAttentionBottleneck(cin, planes, stride)]
        layers += [SplitAttentionBottleneck(planes * 4, planes)
                   for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x):
        s1 = self.stem(x)              # stride 2
        s2 = self.layer1(self.pool(s1))  # stride 4
        s3 = self.layer2(s2)           # stride 8
        s4 = self.layer3(s3)           # stride 16
        s5 = self.layer4(s4)           # stride 32
        return [s1, s2, s3, s4, s5]


class AsppAttention(nn.Module):
    """Dilated pyramid over concat(image features, prior features), fused to
    a single-channel attention logit map."""

    def __init__(self, cin, rates, branch_ch=32):
        super().__init__()
        self.branches = nn.ModuleList(
            [conv_bn_relu(cin, branch_ch, dilation=r) for r in rates])
        self.global_branch = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(cin, branch_ch, 1, bias=False),
            nn.ReLU(inplace=True))
        self.fuse = nn.Conv2d(branch_ch * (len(self.branches) + 1), 1, 1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        g = self.global_branch(x)
        outs.append(g.expand(-1, -1, x.shape[2], x.shape[3]))
        return self.fuse(torch.cat(outs, dim=1))  # attention logits


class PriorEncoder(nn.Module):
    """Repeated stride-2 convolutions over the 3-channel prior image, with
    an ASPP attention module per scale."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cc = cfg.compress_channels
        self.downs = nn.ModuleList(
            [conv_bn_relu(3 if k == 0 else cc, cc, stride=2)
             for k in range(NUM_SCALES)])
        self.attn = nn.ModuleList(
            [AsppAttention(2 * cc, cfg.aspp_rates, cc) for _ in range(NUM_SCALES)])

    def forward(self, feats, prior3):
        enhanced, sides = [], []
        p = prior3
        for k in range(NUM_SCALES):
            p = self.downs[k](p)
            logits = self.attn[k](torch.cat([feats[k], p], dim=1))
            sides.append(logits)
            a = torch.sigmoid(logits)
            enhanced.append(feats[k] * a + feats[k])
        return enhanced, sides


class ChannelAttention(nn.Module):
    """Channel-affinity attention: softmax(X Xt) X scaled by a learnable
    gamma initialized at zero (identity at init)."""

    def __init__(self):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        b, c, h, w = x.shape
        flat = x.view(b, c, h * w)
        affinity = torch.softmax(torch.bmm(flat, flat.transpose(1, 2)), dim=2)
        out = torch.bmm(affinity, flat).view(b, c, h, w)
        return self.gamma * out + x


class DualPathDecoder(nn.Module):
    """Every scale receives bilinear-upsampled (T2D) and strided-conv
    downsampled (B2U) contributions from every other scale, concatenated
    [self, T2D nearest-first, B2U nearest-first]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cc = cfg.compress_channels
        self.cfg = cfg
        self.t2d = nn.ModuleDict()
        self.b2u = nn.ModuleDict()
        for k in range(NUM_SCALES):
            for j in range(NUM_SCALES):
                if j > k and cfg.enable_t2d:
                    self.t2d[f"{j}to{k}"] = conv_bn_relu(cc, cc)
                if j < k and cfg.enable_b2u:
                    self.b2u[f"{j}to{k}"] = conv_bn_relu(cc, cc, stride=2 ** (k - j))

    def fused_channels(self, k: int) -> int:
        cc = self.cfg.compress_channels
        n = 1
        if self.cfg.enable_t2d:
            n += NUM_SCALES - 1 - k
        if self.cfg.enable_b2u:
            n += k
        return n * cc

    def forward(self, feats):
        fused = []
        for k in range(NUM_SCALES):
            size = feats[k].shape[2:]
            parts = [feats[k]]
            if self.cfg.enable_t2d:
                for j in range(k + 1, NUM_SCALES):
                    up = F.interpolate(feats[j], size=size, mode="bilinear",
                                       align_corners=False)
                    parts.append(self.t2d[f"{j}to{k}"](up))
            if self.cfg.enable_b2u:
                for j in range(k - 1, -1, -1):
                    parts.append(self.b2u[f"{j}to{k}"](feats[j]))
            fused.append(torch.cat(parts, dim=1))
        return fused


class PDNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        in_ch = 3 if cfg.enable_pe else 6  # prior joins the input when PE is off
        if cfg.backbone == "tiny_cnn":
            self.backbone = TinyBackbone(in_ch)
            raw_channels = TinyBackbone.CHANNELS
        else:
            self.backbone = ResNeStBackbone(in_ch)
            raw_channels = [64, 256, 512, 1024, 2048]
        cc = cfg.compress_channels
        self.compress = nn.ModuleList(
            [nn.Conv2d(c, cc, 3, padding=1) for c in raw_channels])
        self.prior_encoder = PriorEncoder(cfg) if cfg.enable_pe else None
        self.decoder = DualPathDecoder(cfg)
        if cfg.enable_sa:
            self.sa = nn.ModuleList([ChannelAttention() for _ in range(NUM_SCALES)])
        else:
            self.sa = None
        self.deconv = nn.ConvTranspose2d(self.decoder.fused_channels(0), cc,
                                         4, stride=2, padding=1)
        self.mask_heads = nn.ModuleList(
            [nn.Conv2d(self.decoder.fused_channels(k), 1, 3, padding=1)
             for k in range(NUM_SCALES)])
        self.mask_head_full = nn.Conv2d(cc, 1, 3, padding=1)
        self.diam_head_full = nn.Conv2d(cc, 4, 3, padding=1)
        self.diam_heads = nn.ModuleList(
            [nn.Conv2d(self.decoder.fused_channels(k), 4, 3, padding=1)
             for k in range(2)])  # stride-2 and stride-4 scales

    def encode_image(self, x3):
        s = self.cfg.input_size
        if x3.shape[-1] != s or x3.shape[-2] != s:
            raise ModelError(f"expected {s}x{s} input, got {tuple(x3.shape[-2:])}")
        return self.backbone(x3)

    def compress_features(self, raw):
        return [self.compress[k](raw[k]) for k in range(NUM_SCALES)]

    def forward(self, image3, prior3):
        """image3/prior3: (B, 3, S, S) tensors; both are the (CT, click,
        distance) stack. Returns (SideOutputs, final mask logits,
        final diameter heatmap logits)."""
        if self.cfg.enable_pe:
            raw = self.encode_image(image3)
            feats = self.compress_features(raw)
            enhanced, pe_sides = self.prior_encoder(feats, prior3)
        else:
            raw = self.encode_image(torch.cat([image3, prior3], dim=1))
            enhanced = self.compress_features(raw)
            pe_sides = []
        fused = self.decoder(enhanced)
        if self.sa is not None:
            fused = [self.sa[k](fused[k]) for k in range(NUM_SCALES)]
        full = self.deconv(fused[0])
        final_mask = self.mask_head_full(full)
        final_diam = self.diam_head_full(full)
        dec_masks = [self.mask_heads[k](fused[k]) for k in range(NUM_SCALES)]
        diam_sides = [final_diam,
                      self.diam_heads[0](fused[0]),
                      self.diam_heads[1](fused[1])]
        mask_sides = pe_sides + dec_masks + [final_mask]
        return SideOutputs(mask_sides, diam_sides), final_mask, final_diam


def build_inputs(image01: np.ndarray, click: Point2D,
                 device: str = "cpu") -> tuple[torch.Tensor, torch.Tensor]:
    """Assemble the 3-channel (CT, click, distance) stack for one slice."""
    h, w = image01.shape
    click_img = geometry.make_click_image(click, h, w)
    dist_img = geometry.make_distance_image(click, h, w)
    stack = np.stack([image01.astype(np.float32), click_img, dist_img])
    t = torch.from_numpy(stack).unsqueeze(0).to(device)
    return t, t.clone()


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: PDNet, directory: Path, stage: int,
                    sigma: float, lam: float = 0.01,
                    extra: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"model": model.cfg.to_json(), "stage": stage,
            "sigma": sigma, "lambda": lam}
    if extra:
        meta.update(extra)
    with open(directory / "config.json", "w") as f:
        json.dump(meta, f, indent=2)
    state = model.state_dict()
    torch.save(state, directory / "weights.pt")
    with open(directory / "manifest.txt", "w") as f:
        for name, tensor in state.items():
            f.write(f"{name}\t{tuple(tensor.shape)}\n")


def load_checkpoint(directory: Path) -> tuple[PDNet, dict]:
    directory = Path(directory)
    with open(directory / "config.json") as f:
        meta = json.load(f)
    model = PDNet(ModelConfig.from_json(meta["model"]))
    state = torch.load(directory / "weights.pt", map_location="cpu",
                       weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, meta
