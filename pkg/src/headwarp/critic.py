"""Frozen random-feature critic used by every perceptual loss term.

A seed-fixed 4-stage conv pyramid with smooth activations stands in for a
pretrained feature network at desk scale. Random convolutional features
preserve enough structure for L1 feature matching to act as a perceptual
distance, and the fixed seed makes every loss value reproducible.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

DEFAULT_SEED = 777
_STAGE_CHANNELS = (12, 16, 24, 32)


class FeatureCritic:
    """Immutable conv pyramid; returns one activation map per stage."""

    def __init__(self, in_channels: int = 3, seed: int = DEFAULT_SEED,
                 dtype=torch.float32):
        gen = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.weights = []
        cin = in_channels
        for cout in _STAGE_CHANNELS:
            w = torch.randn(cout, cin, 3, 3, generator=gen, dtype=torch.float64)
            w = w / (cin * 9) ** 0.5
            b = 0.1 * torch.randn(cout, generator=gen, dtype=torch.float64)
            self.weights.append((w.to(dtype), b.to(dtype)))
            cin = cout
        self.dtype = dtype

    def to(self, dtype):
        if dtype == self.dtype:
            return self
        clone = FeatureCritic.__new__(FeatureCritic)
        clone.seed = self.seed
        clone.dtype = dtype
        clone.weights = [(w.to(dtype), b.to(dtype)) for w, b in self.weights]
        return clone

    def features(self, x):
        """Per-stage activations for (B,C,H,W) or (C,H,W) input."""
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        feats = []
        for i, (w, b) in enumerate(self.weights):
            x = torch.tanh(F.conv2d(x, w.to(x.dtype), b.to(x.dtype), padding=1))
            feats.append(x.squeeze(0) if squeeze else x)
            if i < len(self.weights) - 1:
                x = F.avg_pool2d(x, 2)
        return feats

    def __call__(self, x):
        return self.features(x)


_default = None


def default_critic() -> FeatureCritic:
    global _default
    if _default is None:
        _default = FeatureCritic()
    return _default


def feature_l1(a_feats, b_feats, masks=None) -> torch.Tensor:
    """Sum over stages of the (optionally masked) mean absolute difference."""
    total = None
    for i, (fa, fb) in enumerate(zip(a_feats, b_feats)):
        diff = fa - fb
        if masks is not None:
            diff = masks[i] * diff
        term = diff.abs().mean()
        total = term if total is None else total + term
    return total


def resize_mask(mask, h: int, w: int):
    """Resize an (H,W) or (1,H,W) mask to a feature stage's resolution."""
    m = mask
    if m.dim() == 2:
        m = m.unsqueeze(0)
    if m.shape[-2:] == (h, w):
        return m
    return F.interpolate(m.unsqueeze(0), size=(h, w), mode="bilinear",
                         align_corners=False).squeeze(0)


def stage_masks(mask, feats):
    """One resized copy of `mask` per critic stage, broadcastable over it."""
    out = []
    for f in feats:
        m = resize_mask(mask.to(f.dtype), f.shape[-2], f.shape[-1])
        out.append(m if f.dim() == 3 else m.unsqueeze(0))
    return out
