"""Encoder-decoder segmentation network, loss functions, embeddings, checkpoints.

The network follows a U-Net layout with a five-stage convolutional encoder
(feature strides 2/4/8/16/32), bilinear upsampling in the decoder (never
transposed convolution), batch normalization, ReLU6 activations, optional
identity residual links across each decoder convolution pair, and optional
channel squeeze-excitation attention after every decoder stage.

Losses operate on softmax probability fields and dense masks; pixels holding
the ignore id are excluded from every sum. The combined loss is the equal
mix of the soft dice loss over ground-truth-present classes and categorical
cross entropy, computed per sample and averaged over the batch.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import preprocessing
from .errors import InvalidConfig, NoLabeledPixels, ShapeMismatch
from .taxonomy import IGNORE_ID, NUM_CLASSES

CHECKPOINT_VERSION = 1

# encoder channel widths per stage (strides 2, 4, 8, 16, 32); the reference
# preset mirrors a compound-scaled backbone's feature widths so external
# pretrained weights can plug in, the tiny preset is for desk-scale work
ENCODER_PRESETS = {
    "reference": (16, 24, 48, 120, 352),
    "tiny": (8, 16, 24, 32, 64),
}

DICE_EPS = 1e-6
PROB_FLOOR = 1e-12
NORMALIZATION = "(x / 127.5) - 1"


@dataclass
class NetworkConfig:
    input_size: int = 192
    num_classes: int = NUM_CLASSES
    encoder: str = "reference"
    decoder_filters: tuple[int, ...] = (256, 128, 64, 48, 32)
    use_channel_attention: bool = True
    use_residual_decoder: bool = True
    pretrained: bool = False
    # overrides the preset widths; used to shrink networks below the tiny
    # preset for very fast numerical tests
    encoder_channels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.encoder not in ENCODER_PRESETS:
            raise InvalidConfig(f"unknown encoder {self.encoder!r}")
        self.decoder_filters = tuple(self.decoder_filters)
        if self.encoder_channels is not None:
            self.encoder_channels = tuple(self.encoder_channels)
        if len(self.decoder_filters) != len(self.stage_channels):
            raise InvalidConfig("decoder_filters must match the number of encoder stages")
        if self.encoder == "reference" and self.input_size % 32 != 0:
            raise InvalidConfig("reference encoder requires input_size divisible by 32")
        if self.input_size < 4:
            raise InvalidConfig("input_size must be at least 4")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return self.encoder_channels or ENCODER_PRESETS[self.encoder]


def _conv_bn_act(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU6(inplace=True),
    )


class EncoderStage(nn.Module):
    """Halves resolution (stride-2 conv) then refines once."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.down = _conv_bn_act(in_ch, out_ch, stride=2)
        self.refine = _conv_bn_act(out_ch, out_ch)

    def forward(self, x):
        return self.refine(self.down(x))


class Encoder(nn.Module):
    def __init__(self, channels: Sequence[int]):
        super().__init__()
        stages = []
        in_ch = 3
        for out_ch in channels:
            stages.append(EncoderStage(in_ch, out_ch))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> list[torch.Tensor]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class SqueezeExcite(nn.Module):
    """Channel attention: global pool, bottleneck MLP, sigmoid gate."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, kernel_size=1)
        self.fc2 = nn.Conv2d(hidden, channels, kernel_size=1)

    def forward(self, x):
        gate = F.adaptive_avg_pool2d(x, 1)
        gate = F.relu6(self.fc1(gate))
        gate = torch.sigmoid(self.fc2(gate))
        return x * gate


class DecoderStage(nn.Module):
    """Bilinear x2 upsample, skip concat, conv pair with optional residual/SE."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int,
                 residual: bool, attention: bool):
        super().__init__()
        cat_ch = in_ch + skip_ch
        self.block1 = _conv_bn_act(cat_ch, out_ch)
        self.block2 = _conv_bn_act(out_ch, out_ch)
        self.residual = residual
        if residual and cat_ch != out_ch:
            self.shortcut = nn.Conv2d(cat_ch, out_ch, kernel_size=1, bias=False)
        else:
            self.shortcut = None
        self.attention = SqueezeExcite(out_ch) if attention else None

    def forward(self, x, skip, out_size):
        x = F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        y = self.block2(self.block1(x))
        if self.residual:
            y = y + (self.shortcut(x) if self.shortcut is not None else x)
        if self.attention is not None:
            y = self.attention(y)
        return y


class SegmentationNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        enc_ch = config.stage_channels
        self.encoder = Encoder(enc_ch)
        filters = config.decoder_filters
        skips = list(enc_ch[:-1][::-1]) + [0]  # deepest-to-shallowest, last stage bare
        stages = []
        in_ch = enc_ch[-1]
        for skip_ch, out_ch in zip(skips, filters):
            stages.append(
                DecoderStage(in_ch, skip_ch, out_ch,
                             residual=config.use_residual_decoder,
                             attention=config.use_channel_attention)
            )
            in_ch = out_ch
        self.decoder = nn.ModuleList(stages)
        self.head = nn.Conv2d(filters[-1], config.num_classes, kernel_size=1)

    def forward(self, x):
        full_size = x.shape[-2:]
        features = self.encoder(x)
        y = features[-1]
        skips = features[:-1][::-1] + [None]
        for stage, skip in zip(self.decoder, skips):
            out_size = skip.shape[-2:] if skip is not None else full_size
            y = stage(y, skip, out_size)
        return self.head(y)

    def embed(self, x) -> torch.Tensor:
        """Spatial average of the deepest encoder feature map, shape (N, C)."""
        deepest = self.encoder(x)[-1]
        return deepest.mean(dim=(2, 3))


def build_network(
    config: NetworkConfig,
    weights_path: str | None = None,
    seed: int | None = None,
) -> SegmentationNet:
    """Construct the network; optionally load pretrained encoder weights."""
    if seed is not None:
        torch.manual_seed(seed)
    net = SegmentationNet(config)
    if config.pretrained:
        if weights_path is None:
            raise InvalidConfig("pretrained=True requires a weights file")
        blobs = np.load(weights_path)
        state = net.encoder.state_dict()
        for key in state:
            if key not in blobs:
                raise InvalidConfig(f"pretrained weights missing {key}")
            state[key] = torch.as_tensor(blobs[key])
        net.encoder.load_state_dict(state)
    net.eval()
    return net


# ---------------------------------------------------------------------------
# Input handling
# ---------------------------------------------------------------------------

def normalize_images(images: np.ndarray) -> np.ndarray:
    """Map uint8 RGB to the encoder's expected range [-1, 1]."""
    return (np.asarray(images, dtype=np.float32) / 127.5) - 1.0


def _to_batch_tensor(images: np.ndarray, input_size: int, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ShapeMismatch(f"expected (N, H, W, 3) images, got {arr.shape}")
    if arr.shape[1] != input_size or arr.shape[2] != input_size:
        raise ShapeMismatch(
            f"images are {arr.shape[1]}x{arr.shape[2]}, network expects {input_size}"
        )
    norm = normalize_images(arr)
    return torch.from_numpy(np.ascontiguousarray(norm.transpose(0, 3, 1, 2))).to(dtype)


def forward_logits(net: SegmentationNet, images: np.ndarray) -> np.ndarray:
    """Inference-mode logits for a batch of tiles, shape (N, H, W, C)."""
    batch = _to_batch_tensor(images, net.config.input_size)
    net.eval()
    with torch.no_grad():
        logits = net(batch)
    return logits.permute(0, 2, 3, 1).numpy()


def predict_probabilities(net: SegmentationNet, images: np.ndarray) -> np.ndarray:
    """Softmax fields for a batch of tiles, shape (N, H, W, C)."""
    logits = forward_logits(net, images)
    return softmax_field(logits)


def softmax_field(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def extract_embeddings(net: SegmentationNet, images: np.ndarray) -> np.ndarray:
    """Pooled deepest-stage features, shape (N, channels)."""
    batch = _to_batch_tensor(images, net.config.input_size)
    net.eval()
    with torch.no_grad():
        emb = net.embed(batch)
    return emb.numpy()


def extract_embedding(net: SegmentationNet, image: np.ndarray) -> np.ndarray:
    return extract_embeddings(net, image)[0]


def spatial_average(feature_map: np.ndarray) -> np.ndarray:
    """Mean over the spatial axes of an (H, W, C) feature map."""
    return np.asarray(feature_map, dtype=np.float64).mean(axis=(0, 1))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    total: float
    dice: float
    ce: float
    present_classes: list[set[int]] = field(default_factory=list)


def _sample_losses_torch(
    probs: torch.Tensor, mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(dice, ce) for one sample; probs (C, H, W), mask (H, W) integer."""
    labeled = mask != IGNORE_ID
    if not bool(labeled.any()):
        raise NoLabeledPixels("sample has no labeled pixels")
    labels = mask[labeled].long()
    p = probs[:, labeled]  # (C, M)
    one_hot = F.one_hot(labels, num_classes=p.shape[0]).to(p.dtype).T  # (C, M)
    intersect = (one_hot * p).sum(dim=1)
    denom = one_hot.sum(dim=1) + p.sum(dim=1) + DICE_EPS
    present = one_hot.sum(dim=1) > 0
    dice = 1.0 - 2.0 * (intersect[present] / denom[present]).mean()
    p_true = p.gather(0, labels.unsqueeze(0)).squeeze(0)
    ce = -torch.log(torch.clamp(p_true, min=PROB_FLOOR)).mean()
    return dice, ce


def batch_loss_torch(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Differentiable combined loss averaged over the batch; logits (N, C, H, W)."""
    probs = torch.softmax(logits, dim=1)
    losses = []
    for i in range(probs.shape[0]):
        dice, ce = _sample_losses_torch(probs[i], masks[i])
        losses.append(0.5 * (dice + ce))
    return torch.stack(losses).mean()


def _as_sample_list(probs: np.ndarray, mask: np.ndarray):
    p = np.asarray(probs, dtype=np.float64)
    m = np.asarray(mask)
    if p.ndim == 3:
        p, m = p[None], m[None]
    if p.ndim != 4 or m.ndim != 3 or p.shape[:3] != m.shape or p.shape[3] != NUM_CLASSES:
        raise ShapeMismatch(f"incompatible shapes {p.shape} vs {m.shape}")
    return p, m


def dice_loss(probs: np.ndarray, mask: np.ndarray) -> float:
    """Soft dice loss over the classes present in the ground truth."""
    p, m = _as_sample_list(probs, mask)
    vals = []
    for i in range(p.shape[0]):
        d, _ = _sample_losses_torch(
            torch.from_numpy(p[i].transpose(2, 0, 1)), torch.from_numpy(m[i].astype(np.int64))
        )
        vals.append(float(d))
    return float(np.mean(vals))


def cross_entropy_loss(probs: np.ndarray, mask: np.ndarray) -> float:
    """Mean negative log-probability of the true class over labeled pixels."""
    p, m = _as_sample_list(probs, mask)
    vals = []
    for i in range(p.shape[0]):
        _, ce = _sample_losses_torch(
            torch.from_numpy(p[i].transpose(2, 0, 1)), torch.from_numpy(m[i].astype(np.int64))
        )
        vals.append(float(ce))
    return float(np.mean(vals))


def combined_loss(probs: np.ndarray, mask: np.ndarray) -> LossReport:
    """Equal mix of dice and cross entropy, per sample then batch-averaged."""
    p, m = _as_sample_list(probs, mask)
    dices, ces, present = [], [], []
    for i in range(p.shape[0]):
        d, ce = _sample_losses_torch(
            torch.from_numpy(p[i].transpose(2, 0, 1)), torch.from_numpy(m[i].astype(np.int64))
        )
        dices.append(float(d))
        ces.append(float(ce))
        labeled = m[i][m[i] != IGNORE_ID]
        present.append(set(int(c) for c in np.unique(labeled)))
    dice_mean = float(np.mean(dices))
    ce_mean = float(np.mean(ces))
    return LossReport(
        total=0.5 * (dice_mean + ce_mean),
        dice=dice_mean,
        ce=ce_mean,
        present_classes=present,
    )


# ---------------------------------------------------------------------------
# Panel-level prediction
# ---------------------------------------------------------------------------

def predict_panel(
    net: SegmentationNet,
    panel: np.ndarray,
    tile_size: int = 384,
    overlap: int = 64,
    factor: int = 2,
    batch_size: int = 16,
) -> tuple[np.ndarray, np.ndarray]:
    """Tile a panel, run the network, and stitch panel-level probabilities.

    The panel is downsampled by `factor` first, then sliced with the
    network's input size as tile size and `overlap // factor` overlap.
    Returns (probability field, argmax mask) at the downsampled scale.
    """
    work = preprocessing.downsample(panel, factor) if factor > 1 else np.asarray(panel)
    size = net.config.input_size
    if size != tile_size // factor:
        raise ShapeMismatch(
            f"network input {size} incompatible with tile {tile_size} / factor {factor}"
        )
    tiles = preprocessing.tile_panel(work, size, max(overlap // factor, 0))
    fields = []
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start : start + batch_size]
        batch = np.stack([t for _, t in chunk])
        probs = predict_probabilities(net, batch)
        fields.extend((geom, probs[i]) for i, (geom, _) in enumerate(chunk))
    h, w = work.shape[:2]
    return preprocessing.stitch_probabilities(fields, (w, h))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: SegmentationNet, path: str) -> None:
    """Self-describing archive: config JSON plus parameter blobs by layer path."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "network": asdict(net.config),
        "normalization": NORMALIZATION,
    }
    blobs = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, **blobs)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", json.dumps(meta, indent=2, sort_keys=True))
        zf.writestr("params.npz", buf.getvalue())


def load_checkpoint(path: str) -> SegmentationNet:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("config.json"))
        if "version" not in meta:
            raise InvalidConfig("checkpoint missing version field")
        raw = meta["network"]
        config = NetworkConfig(
            input_size=raw["input_size"],
            num_classes=raw["num_classes"],
            encoder=raw["encoder"],
            decoder_filters=tuple(raw["decoder_filters"]),
            use_channel_attention=raw["use_channel_attention"],
            use_residual_decoder=raw["use_residual_decoder"],
            pretrained=False,
            encoder_channels=tuple(raw["encoder_channels"]) if raw.get("encoder_channels") else None,
        )
        blobs = np.load(io.BytesIO(zf.read("params.npz")))
        net = SegmentationNet(config)
        state = {k: torch.as_tensor(blobs[k]) for k in blobs.files}
        net.load_state_dict(state)
    net.eval()
    return net
