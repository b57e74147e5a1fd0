"""Recognition branch: staged encoder, convolutional alignment, decoupled decoders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .charset import EOS, Charset

INPUT_SIZE = (32, 128)
STRIDES = ((2, 2), (2, 2), (2, 2), (2, 1), (2, 1))
LOG_EPS = 1e-12


class ShapeError(ValueError):
    pass


class LabelBatch(NamedTuple):
    """Teacher targets in reading order: symbols, EOS, then EOS padding."""

    targets: torch.Tensor  # (b, max_t) long
    lengths: torch.Tensor  # (b,) long, label length without EOS

    def to(self, device):
        return LabelBatch(self.targets.to(device), self.lengths.to(device))

    def reversed(self):
        return LabelBatch(reverse_targets(self.targets, self.lengths), self.lengths)


@dataclass
class Recognition:
    text: str
    direction: str
    confidence: float


def encode_labels(texts, charset: Charset, max_t):
    rows, lengths = [], []
    for text in texts:
        idx = charset.encode(text)
        if not 1 <= len(idx) <= max_t - 1:
            raise ValueError(f"label {text!r} has length {len(idx)}; allowed 1..{max_t - 1}")
        rows.append(idx + [EOS] * (max_t - len(idx)))
        lengths.append(len(idx))
    return LabelBatch(torch.tensor(rows, dtype=torch.long), torch.tensor(lengths, dtype=torch.long))


def reverse_targets(targets, lengths):
    out = targets.clone()
    for i, n in enumerate(lengths.tolist()):
        out[i, :n] = targets[i, :n].flip(0)
    return out


def stage_channels(channels):
    if channels % 8:
        raise ValueError(f"recognizer width must be a multiple of 8, got {channels}")
    return (channels // 8, channels // 4, channels // 2, channels, channels)


# keeps near-blank images from being amplified into noise
CONTRAST_FLOOR = 0.05


def _conv_bn(cin, cout, stride=1):
    return [nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class FeatureEncoder(nn.Module):
    """Five strided stages, two 3x3 conv/BN/ReLU layers each.

    Each image is standardized to zero mean and unit contrast first, which
    removes the foreground/background intensity draw from what the stages see.
    """

    def __init__(self, channels=512, in_channels=1):
        super().__init__()
        self.channels = stage_channels(channels)
        stages, cin = [], in_channels
        for cout, stride in zip(self.channels, STRIDES):
            stages.append(nn.Sequential(*_conv_bn(cin, cout, stride), *_conv_bn(cout, cout)))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, img):
        if img.dim() != 4 or tuple(img.shape[1:]) != (1, *INPUT_SIZE):
            raise ShapeError(f"expected input of shape (b, 1, {INPUT_SIZE[0]}, {INPUT_SIZE[1]}), "
                             f"got {tuple(img.shape)}")
        mean = img.mean(dim=(2, 3), keepdim=True)
        std = img.std(dim=(2, 3), keepdim=True)
        feats, x = [], (img - mean) / (std + CONTRAST_FLOOR)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def spatial_softmax(logits):
    """Softmax over the spatial cells of each channel of (b, c, h, w) logits."""
    b, c, h, w = logits.shape
    return F.softmax(logits.reshape(b, c, h * w), dim=-1).reshape(b, c, h, w)


class AlignmentModule(nn.Module):
    """Encoder-decoder over stages 3-5 emitting one attention map per decoding step.

    The head has ``2 * max_t`` channels: the first half serves left-to-right
    decoding, the second half right-to-left.
    """

    def __init__(self, channels, max_t):
        super().__init__()
        c3, c4, c5 = stage_channels(channels)[2:]
        w = channels
        self.max_t = max_t
        self.proj = nn.Sequential(nn.Conv2d(c3 + c4 + c5, w, 1, bias=False), nn.BatchNorm2d(w),
                                  nn.ReLU(inplace=True))
        self.down1 = nn.Sequential(*_conv_bn(w, w, (1, 2)))
        self.down2 = nn.Sequential(*_conv_bn(w, w, (1, 2)))
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(w, w, 3, (1, 2), 1, output_padding=(0, 1), bias=False),
            nn.BatchNorm2d(w), nn.ReLU(inplace=True))
        self.up2 = nn.Sequential(
            nn.ConvTranspose2d(w, w, 3, (1, 2), 1, output_padding=(0, 1), bias=False),
            nn.BatchNorm2d(w), nn.ReLU(inplace=True))
        self.head = nn.Conv2d(w, 2 * max_t, 1)

    def logits(self, feats):
        grid = feats[4].shape[-2:]
        x = torch.cat([F.adaptive_avg_pool2d(f, grid) for f in feats[2:5]], dim=1)
        x = self.proj(x)
        d1 = self.down1(x)
        d2 = self.down2(d1)
        u1 = self.up1(d2) + d1
        u2 = self.up2(u1) + x
        return self.head(u2)

    def forward(self, feats):
        attn = spatial_softmax(self.logits(feats))
        return attn[:, :self.max_t], attn[:, self.max_t:]


class Decoder(nn.Module):
    """GRU decoder reading one attention-pooled context vector per step.

    The classifier sees the hidden state together with the current context, so
    glyph evidence reaches the output without passing through the recurrence.
    """

    def __init__(self, channels, num_classes):
        super().__init__()
        self.num_classes = num_classes
        self.embed = nn.Embedding(num_classes + 1, channels // 4)
        self.cell = nn.GRUCell(channels + channels // 4, channels)
        self.classifier = nn.Linear(2 * channels, num_classes)

    def forward(self, feat, attn, targets=None):
        """Return per-step class distributions, shape (b, max_t, num_classes)."""
        b, max_t = attn.shape[:2]
        context = torch.einsum("bthw,bchw->btc", attn, feat)
        h = context.new_zeros(b, self.cell.hidden_size)
        prev = torch.full((b,), self.num_classes, dtype=torch.long, device=feat.device)
        probs = []
        for t in range(max_t):
            h = self.cell(torch.cat([context[:, t], self.embed(prev)], dim=1), h)
            p = F.softmax(self.classifier(torch.cat([h, context[:, t]], dim=1)), dim=-1)
            probs.append(p)
            prev = targets[:, t] if targets is not None else p.argmax(dim=-1)
        return torch.stack(probs, dim=1)


class Recognizer(nn.Module):
    def __init__(self, channels=512, max_t=16, num_classes=37):
        super().__init__()
        self.max_t = max_t
        self.num_classes = num_classes
        self.encoder = FeatureEncoder(channels)
        self.cam = AlignmentModule(channels, max_t)
        self.decoders = nn.ModuleDict({"lr": Decoder(channels, num_classes),
                                       "rl": Decoder(channels, num_classes)})

    @property
    def stage_channels(self):
        return self.encoder.channels

    def feature_encode(self, img):
        return self.encoder(img)

    def compute_attention(self, feats):
        return self.cam(feats)

    def decode(self, feats, attn, direction="lr", teacher: LabelBatch | None = None,
               decoder=None):
        """Decode one direction; RL teachers are reversed here, outputs stay in decoding order."""
        if direction not in ("lr", "rl"):
            raise ValueError(f"direction must be 'lr' or 'rl', got {direction!r}")
        targets = None
        if teacher is not None:
            if int(teacher.lengths.max()) > self.max_t - 1:
                raise ValueError(f"teacher longer than {self.max_t - 1} symbols")
            targets = teacher.targets if direction == "lr" else teacher.reversed().targets
        decoder = decoder if decoder is not None else self.decoders[direction]
        return decoder(feats[4], attn, targets)

    def decode_both(self, feats, attn_lr, attn_rl, teacher=None):
        return (self.decode(feats, attn_lr, "lr", teacher),
                self.decode(feats, attn_rl, "rl", teacher))

    def recognize_bidirectional(self, feats, attn_lr, attn_rl, charset: Charset):
        p_lr, p_rl = self.decode_both(feats, attn_lr, attn_rl)
        return select_bidirectional(p_lr, p_rl, charset), p_lr, p_rl


def _greedy(probs_row):
    """Greedy tokens up to and including the first EOS, and their mean log-probability."""
    p, idx = probs_row.max(dim=-1)
    idx = idx.tolist()
    n = idx.index(EOS) + 1 if EOS in idx else len(idx) - 1
    logp = torch.log(p[:n].clamp_min(LOG_EPS))
    return [i for i in idx[:n] if i != EOS], float(logp.mean())


def select_bidirectional(p_lr, p_rl, charset: Charset):
    """Pick, per sample, the direction with higher mean log-probability (LR on ties)."""
    out = []
    for row_lr, row_rl in zip(p_lr.detach(), p_rl.detach()):
        tok_lr, conf_lr = _greedy(row_lr)
        tok_rl, conf_rl = _greedy(row_rl)
        if conf_lr >= conf_rl:
            out.append(Recognition(charset.decode(tok_lr), "lr", conf_lr))
        else:
            out.append(Recognition(charset.decode(tok_rl[::-1]), "rl", conf_rl))
    return out


def sequence_log_likelihood(probs, targets, lengths):
    """Sum of log p(target) over steps 0..length (EOS included), per sample."""
    steps = torch.arange(probs.shape[1], device=probs.device)
    mask = (steps[None, :] <= lengths[:, None]).to(probs.dtype)
    picked = probs.gather(2, targets[:, :, None]).squeeze(2)
    return (torch.log(picked.clamp_min(LOG_EPS)) * mask).sum(dim=1)


def recognition_loss(p_lr, p_rl, labels: LabelBatch):
    """Bidirectional cross-entropy, halved and averaged over the batch."""
    rev = labels.reversed()
    ll = sequence_log_likelihood(p_lr, labels.targets, labels.lengths) \
        + sequence_log_likelihood(p_rl, rev.targets, rev.lengths)
    return (-0.5 * ll).mean()
