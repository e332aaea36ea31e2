"""Generator training objective: keypoint regularizers, image losses and their weighted sum."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as tf
from torch import nn

from .errors import InvalidParamsError, ShapeMismatchError

BODY_TERMS = ("E", "L", "D", "Per", "GAN", "Recon", "lms", "Per_hand")
FACE_REQUIRED = ("Per", "GAN", "Recon", "Per_face")
FACE_OPTIONAL = ("E", "L", "D")
FACE_FORBIDDEN = ("lms", "Per_hand")
SIGNED_TERMS = ("GAN",)


@dataclass
class LossReport:
    terms: dict
    weights: dict
    total: torch.Tensor
    mode: str = "body"

    def scalars(self):
        out = scalar_terms(self.terms)
        out["total"] = _num(self.total)
        return out


def _num(v):
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def scalar_terms(terms):
    return {k: _num(v) for k, v in terms.items()}


def total_loss(terms, weights=None, mode="body"):
    """Weighted sum of named loss terms with per-mode term bookkeeping.

    Body mode needs all eight generator terms. Face-refine mode needs the
    face perceptual term, rejects the landmark and hand terms, and accepts the
    keypoint regularizers only when a detector is trained alongside.
    """
    weights = dict(weights or {})
    if mode == "body":
        missing = [k for k in BODY_TERMS if k not in terms]
        extra = [k for k in terms if k not in BODY_TERMS]
    elif mode == "face":
        bad = [k for k in FACE_FORBIDDEN if k in terms]
        if bad:
            raise InvalidParamsError(f"face-refine objective cannot contain {bad}")
        missing = [k for k in FACE_REQUIRED if k not in terms]
        extra = [k for k in terms if k not in FACE_REQUIRED + FACE_OPTIONAL]
    else:
        raise InvalidParamsError(f"unknown loss mode {mode!r}")
    if missing:
        raise InvalidParamsError(f"missing loss terms for {mode} mode: {missing}")
    if extra:
        raise InvalidParamsError(f"unexpected loss terms for {mode} mode: {extra}")
    used = {k: float(weights.get(k, 1.0)) for k in terms}
    total = sum(used[k] * terms[k] for k in terms)
    for k, v in terms.items():
        value = _num(v)
        if not math.isfinite(value):
            raise FloatingPointError(f"loss term {k} is not finite")
        if k not in SIGNED_TERMS and value < 0:
            raise InvalidParamsError(f"loss term {k} is negative")
    return LossReport(dict(terms), used, total, mode)


# --------------------------------------------------------------------------
# keypoint terms
# --------------------------------------------------------------------------

def random_affine(rng, max_rot_deg=15.0, scale_range=(0.9, 1.1), max_shift=0.1):
    """(A, b) of a point map ``q -> A q + b`` in normalized image coordinates."""
    ang = math.radians(rng.uniform(-max_rot_deg, max_rot_deg))
    s = rng.uniform(*scale_range)
    shift = rng.uniform(-max_shift, max_shift, 2)
    A = s * np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    return A, shift


def warp_image(image, A, b):
    """Move image content by the point map ``q -> A q + b`` (normalized coordinates)."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inv = np.linalg.inv(A)
    theta = np.concatenate([inv, -(inv @ b)[:, None]], axis=1)
    theta = torch.as_tensor(theta, dtype=image.dtype)[None].expand(image.shape[0], 2, 3)
    grid = tf.affine_grid(theta, list(image.shape), align_corners=False)
    return tf.grid_sample(image, grid, mode="bilinear", padding_mode="border", align_corners=False)


def equivariance_loss(detect2d, frame, rng=None, transform=None):
    """Mean L1 between keypoints detected on a transformed frame and transformed detections.

    ``detect2d`` maps ``(B, 3, H, W)`` frames to ``(B, k, 2)`` normalized image
    coordinates. ``transform`` fixes ``(A, b)``; otherwise one is drawn from ``rng``.
    """
    A, b = transform if transform is not None else random_affine(rng)
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    kp = detect2d(frame)
    if np.array_equal(A, np.eye(2)) and not np.any(b):
        kp_t = detect2d(frame)
    else:
        kp_t = detect2d(warp_image(frame, A, b))
    At = torch.as_tensor(A, dtype=kp.dtype)
    bt = torch.as_tensor(b, dtype=kp.dtype)
    moved = kp @ At.T + bt
    return (kp_t - moved).abs().mean()


def prior_losses(canonical, deformation, threshold=0.1):
    """(keypoint prior, deformation prior).

    The keypoint prior averages ``relu(threshold - |x_i - x_j|)`` over unordered
    pairs and adds the absolute mean depth; the deformation prior is mean ``|delta|``.
    """
    k = canonical.shape[-2]
    diff = canonical[..., :, None, :] - canonical[..., None, :, :]
    dist = torch.sqrt((diff ** 2).sum(-1) + 1e-12)
    iu = torch.triu_indices(k, k, 1)
    hinge = torch.relu(threshold - dist[..., iu[0], iu[1]])
    depth = canonical[..., 2].mean(-1).abs()
    l_kp = hinge.mean() + depth.mean()
    return l_kp, deformation.abs().mean()


def landmark_loss(projected, target):
    if projected.shape != target.shape:
        raise ShapeMismatchError("landmark shapes differ")
    return (projected - target).abs().mean()


# --------------------------------------------------------------------------
# image terms
# --------------------------------------------------------------------------

class FeatureStack(nn.Module):
    """Frozen, seeded random convolution pyramid used as a perceptual feature space."""

    def __init__(self, seed=0, channels=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        ch = 3
        for out in channels:
            conv = nn.Conv2d(ch, out, 3, 2, 1)
            with torch.no_grad():
                bound = math.sqrt(6.0 / (9 * ch))
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.zero_()
            layers.append(conv)
            ch = out
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = [x]
        for conv in self.layers:
            x = tf.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def perceptual(features, pred, target, mask=None):
    """L1 over pyramid features (level 0 is the image); masked version renormalizes by mask area."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if mask is not None:
        if mask.shape[0] != pred.shape[0] or mask.shape[-2:] != pred.shape[-2:]:
            raise ShapeMismatchError("mask does not match image")
        if float(mask.sum()) == 0.0:
            return pred.sum() * 0.0
    fp, ft = features(pred), features(target)
    total = 0.0
    for a, b in zip(fp, ft):
        d = (a - b).abs()
        if mask is None:
            total = total + d.mean()
        else:
            m = tf.adaptive_avg_pool2d(mask, d.shape[-2:]) if d.shape[-2:] != mask.shape[-2:] else mask
            area = m.sum() * d.shape[1]
            total = total + (d * m).sum() / area.clamp_min(1e-12)
    return total


def recon_loss(pred, target):
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


class PatchDiscriminator(nn.Module):
    """Three-scale patch discriminator."""

    def __init__(self, scales=3, width=16):
        super().__init__()
        self.nets = nn.ModuleList(
            nn.Sequential(nn.Conv2d(3, width, 4, 2, 1), nn.LeakyReLU(0.2),
                          nn.Conv2d(width, 2 * width, 4, 2, 1), nn.LeakyReLU(0.2),
                          nn.Conv2d(2 * width, 1, 3, 1, 1))
            for _ in range(scales))

    def forward(self, x):
        outs = []
        for i, net in enumerate(self.nets):
            if i:
                x = tf.avg_pool2d(x, 2)
            outs.append(net(x))
        return outs


def gan_generator_loss(disc, fake):
    return sum(-o.mean() for o in disc(fake)) / len(disc.nets)


def gan_discriminator_loss(disc, real, fake):
    loss = 0.0
    for r, f in zip(disc(real), disc(fake.detach())):
        loss = loss + torch.relu(1.0 - r).mean() + torch.relu(1.0 + f).mean()
    return loss / len(disc.nets)


def image_losses(features, pred, target, mask=None, disc=None):
    """(Per, Recon, GAN, Per_masked) for one prediction. GAN is 0 without a discriminator."""
    per = perceptual(features, pred, target)
    rec = recon_loss(pred, target)
    gan = gan_generator_loss(disc, pred) if disc is not None else pred.sum() * 0.0
    per_m = perceptual(features, pred, target, mask) if mask is not None else pred.sum() * 0.0
    return per, rec, gan, per_m
