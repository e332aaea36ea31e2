"""Stage 2: keypoint-driven warping generator with hand injection and face refinement.

Pipeline per driving frame: an appearance volume is lifted from the source
frame, a detector recovers the source body keypoints, fused source and
driving keypoints define sparse motion proposals, a small 3-D combiner mixes
them into a dense flow plus occlusion, and a decoder renders the warped
volume. Per-pixel modulation from the rendered hand image is added at three
decoder scales.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as tf
from scipy.ndimage import binary_dilation, distance_transform_edt
from torch import nn

from . import kernels
from . import motion_repr as mr
from .errors import CheckpointError, InvalidParamsError, ShapeMismatchError


@dataclass(frozen=True)
class GeneratorConfig:
    mode: str = "body"              # "body" (head + body keypoints) or "head"
    height: int = 192
    width: int = 128
    feat_channels: int = 32
    depth: int = 8
    down: int = 4
    combiner_width: int = 32
    dec_channels: tuple = (64, 32, 16)
    n_head: int = mr.N_HEAD
    n_body: int = mr.N_BODY
    sigma: float = 0.1
    detector_down: int = 2
    hand_injection: bool = True
    hand_hidden: int = 16

    def __post_init__(self):
        if self.mode not in ("body", "head"):
            raise InvalidParamsError(f"unknown generator mode {self.mode!r}")
        if self.height % self.down or self.width % self.down:
            raise InvalidParamsError("frame size must be divisible by the encoder stride")
        if (self.height // self.down) % 2 or (self.width // self.down) % 2:
            raise InvalidParamsError("feature grid must be even for the half-resolution combiner")
        if len(self.dec_channels) != 3:
            raise InvalidParamsError("decoder has exactly three scales")

    @property
    def feat_hw(self):
        return self.height // self.down, self.width // self.down

    @property
    def n_body_used(self):
        return self.n_body if self.mode == "body" else 0

    @property
    def n_keypoints(self):
        return self.n_head + self.n_body_used

    def camera(self):
        if self.mode == "body":
            return mr.body_camera(self.width, self.height)
        if self.height != self.width:
            raise InvalidParamsError("head mode frames are square")
        return mr.head_camera(self.width)

    def to_dict(self):
        d = asdict(self)
        d["dec_channels"] = list(self.dec_channels)
        return d


def paper_resolution(mode="body", **overrides):
    """Full-resolution configuration: 512 x 768 body frames or 512 x 512 head frames."""
    if mode == "body":
        return GeneratorConfig(mode="body", height=768, width=512, down=8, **overrides)
    return GeneratorConfig(mode="head", height=512, width=512, down=8, **overrides)


@dataclass
class DetectedMotion:
    canonical: torch.Tensor     # (B, k, 3)
    deformation: torch.Tensor   # (B, k, 3)
    translation: torch.Tensor   # (B, 3)

    def source_keypoints(self):
        """Composed source keypoints with unit scale and identity rotation."""
        return self.canonical + self.deformation + self.translation[:, None]


@dataclass
class WarpField:
    flow: torch.Tensor          # (B, D, H_f, W_f, 3) displacement in normalized volume coordinates
    occlusion: torch.Tensor     # (B, 1, H_f, W_f)
    weights: torch.Tensor       # (B, K + 1, D, H_f / 2, W_f / 2) proposal weights

    def grid(self):
        B, D, H, W, _ = self.flow.shape
        return identity_grid(D, H, W, self.flow.dtype)[None] + self.flow


def identity_grid(d, h, w, dtype=torch.float32):
    """``(D, H, W, 3)`` voxel-center coordinates in [-1, 1], ordered (x, y, z)."""
    def axis(n):
        return (torch.arange(n, dtype=dtype) * 2 + 1) / n - 1
    z, y, x = torch.meshgrid(axis(d), axis(h), axis(w), indexing="ij")
    return torch.stack([x, y, z], dim=-1)


def to_normalized(points, scale, offset):
    """Canonical ``(..., 3)`` tensor -> normalized volume coordinates via the camera affine."""
    return points * scale + offset


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------

class AppearanceExtractor(nn.Module):
    """Strided 2-D encoder whose channels are reshaped into a ``C x D`` feature volume.

    Hidden convolutions carry no bias, so a black frame maps to the bias of the
    final 1x1 layer.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        layers = [nn.Conv2d(3, 16, 3, 1, 1, bias=False), nn.LeakyReLU(0.2)]
        ch = 16
        for _ in range(int(math.log2(cfg.down))):
            nxt = min(ch * 2, 64)
            layers += [nn.Conv2d(ch, nxt, 3, 2, 1, bias=False), nn.LeakyReLU(0.2)]
            ch = nxt
        layers += [nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(ch, cfg.feat_channels * cfg.depth, 1)

    def forward(self, image):
        cfg = self.cfg
        if image.shape[1:] != (3, cfg.height, cfg.width):
            raise ShapeMismatchError(f"source frame {tuple(image.shape[1:])} != {(3, cfg.height, cfg.width)}")
        x = self.out(self.body(image))
        B, _, H, W = x.shape
        return x.view(B, cfg.feat_channels, cfg.depth, H, W)


class MotionDetector(nn.Module):
    """Regresses canonical body keypoints, their deformation and a global translation."""

    def __init__(self, cfg, template):
        super().__init__()
        self.cfg = cfg
        k = cfg.n_body
        self.register_buffer("template", torch.as_tensor(template, dtype=torch.float32))
        h, w = cfg.height // cfg.detector_down, cfg.width // cfg.detector_down
        self.in_size = (h, w)
        chans = [3, 16, 32, 64, 64]
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 3, 2, 1), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        flat = 64 * math.ceil(h / 16) * math.ceil(w / 16)
        self.fc = nn.Sequential(nn.Flatten(), nn.Linear(flat, 256), nn.LeakyReLU(0.2))
        self.canon = nn.Linear(256, 3 * k)
        self.delta = nn.Linear(256, 3 * k)
        self.trans = nn.Linear(256, 3)
        for head in (self.canon, self.delta, self.trans):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, image):
        x = tf.interpolate(image, size=self.in_size, mode="area")
        f = self.fc(self.features(x))
        B, k = f.shape[0], self.template.shape[0]
        canonical = self.template + 0.1 * self.canon(f).view(B, k, 3)
        return DetectedMotion(canonical, 0.1 * self.delta(f).view(B, k, 3), 0.1 * self.trans(f))


class Pointwise3d(nn.Module):
    """1x1x1 convolution computed as a 2-D 1x1 convolution over flattened depth."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        B, C, D, H, W = x.shape
        return self.conv(x.reshape(B, C, D * H, W)).reshape(B, -1, D, H, W)


class Combiner(nn.Module):
    """Half-resolution 3-D network: proposals + heatmap differences -> mixing logits, occlusion."""

    def __init__(self, n_proposals, feat_channels, width):
        super().__init__()
        self.n = n_proposals
        self.squeeze = Pointwise3d(feat_channels, 4)
        self.inp = Pointwise3d(4 * n_proposals + 4, width)
        self.mid = nn.Sequential(nn.LeakyReLU(0.2), nn.Conv3d(width, width, 3, 1, 1), nn.LeakyReLU(0.2))
        self.logits = Pointwise3d(width, n_proposals)
        self.occ = Pointwise3d(width, 1)

    def forward(self, heat_diff, displacement, volume):
        """``heat_diff (B, K+1, D, h, w)``, ``displacement (B, K+1, 3, D, h, w)``, ``volume`` at half res."""
        B, n, D, h, w = heat_diff.shape
        x = torch.cat([heat_diff, displacement.reshape(B, 3 * n, D, h, w), self.squeeze(volume)], dim=1)
        x = self.mid(self.inp(x))
        return self.logits(x), self.occ(x).mean(dim=2)


class WarpEstimator(nn.Module):
    """Dense flow from sparse keypoint motion.

    Proposal 0 is the identity; proposal ``k`` translates by ``X_s[k] - X_d[k]``
    in normalized coordinates. Gaussian heatmaps (``sigma`` in canonical units)
    around driving and source points feed the combiner, which runs at half the
    spatial resolution of the volume; its softmax weights mix the proposals and
    the resulting flow is upsampled to the full volume.
    """

    def __init__(self, cfg, sigma_norm):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("sigma", torch.as_tensor(sigma_norm, dtype=torch.float32))
        self.combiner = Combiner(cfg.n_keypoints + 1, cfg.feat_channels, cfg.combiner_width)

    def heatmaps(self, kp, d, h, w):
        """Separable Gaussians around ``kp (B, K, 3)`` on the voxel-center grid -> ``(B, K, d, h, w)``."""
        sigma = self.sigma.to(kp.dtype)

        def axis_weights(n, i):
            centers = (torch.arange(n, dtype=kp.dtype) * 2 + 1) / n - 1
            return torch.exp(-0.5 * ((centers - kp[..., i:i + 1]) / sigma[i]) ** 2)

        gx, gy, gz = axis_weights(w, 0), axis_weights(h, 1), axis_weights(d, 2)
        return gz[..., :, None, None] * gy[..., None, :, None] * gx[..., None, None, :]

    def forward(self, x_s, x_d, volume):
        cfg = self.cfg
        if x_s.shape != x_d.shape or x_s.shape[1:] != (cfg.n_keypoints, 3):
            raise ShapeMismatchError(f"keypoint layouts disagree: {tuple(x_s.shape)} vs {tuple(x_d.shape)}")
        B = x_s.shape[0]
        C, D, H, W = volume.shape[1:]
        dtype = volume.dtype
        x_s, x_d = x_s.to(dtype), x_d.to(dtype)
        h, w = H // 2, W // 2
        disp = torch.cat([torch.zeros(B, 1, 3, dtype=dtype), x_s - x_d], dim=1)   # (B, K+1, 3)
        heat = self.heatmaps(x_d, D, h, w) - self.heatmaps(x_s, D, h, w)
        heat = torch.cat([torch.zeros(B, 1, D, h, w, dtype=dtype), heat], dim=1)
        disp_field = disp[:, :, :, None, None, None].expand(B, disp.shape[1], 3, D, h, w)
        vol_lo = tf.avg_pool3d(volume, (1, 2, 2))
        logits, occ = self.combiner(heat, disp_field, vol_lo)
        weights = torch.softmax(logits, dim=1)
        flow = torch.einsum("bkdhw,bkc->bcdhw", weights, disp)
        flow = tf.interpolate(flow, size=(D, H, W), mode="trilinear", align_corners=False)
        occ = torch.sigmoid(tf.interpolate(occ, size=(H, W), mode="bilinear", align_corners=False))
        return WarpField(flow.permute(0, 2, 3, 4, 1), occ, weights)


def instance_norm(x, eps=1e-5):
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mu) / torch.sqrt(var + eps)


class ConditionEncoder(nn.Module):
    """Per-scale spatial modulation ``(gamma, beta)`` from a conditioning image.

    The output convolutions start at zero, so a fresh encoder contributes nothing.
    """

    def __init__(self, in_ch, channels, hidden):
        super().__init__()
        self.shared = nn.ModuleList(nn.Sequential(nn.Conv2d(in_ch, hidden, 3, 1, 1), nn.LeakyReLU(0.2))
                                    for _ in channels)
        self.gamma = nn.ModuleList(nn.Conv2d(hidden, c, 1) for c in channels)
        self.beta = nn.ModuleList(nn.Conv2d(hidden, c, 1) for c in channels)
        for conv in list(self.gamma) + list(self.beta):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, image, scale, size):
        x = tf.interpolate(image, size=size, mode="area") if image.shape[-2:] != size else image
        h = self.shared[scale](x)
        return self.gamma[scale](h), self.beta[scale](h)


class Decoder(nn.Module):
    """Warped volume -> frame, with additive conditional modulation at three scales."""

    def __init__(self, cfg, n_encoders):
        super().__init__()
        c0, c1, c2 = cfg.dec_channels
        self.cfg = cfg
        self.inp = nn.Sequential(nn.Conv2d(cfg.feat_channels * cfg.depth, c0, 1), nn.LeakyReLU(0.2),
                                 nn.Conv2d(c0, c0, 3, 1, 1), nn.LeakyReLU(0.2))
        n_up = int(math.log2(cfg.down))
        # scale 0 at the feature grid, scale 1 halfway, scale 2 at full resolution
        self.ups = nn.ModuleList()
        ch = c0
        targets = [c1] * (n_up - 1) + [c2]
        for i, out in enumerate(targets):
            self.ups.append(nn.Sequential(nn.Conv2d(ch, out, 3, 1, 1), nn.LeakyReLU(0.2)))
            ch = out
        self.inject_after = [0, max(n_up - 2, 0) + 1, n_up]
        self.out = nn.Conv2d(c2, 3, 3, 1, 1)
        self.encoders = nn.ModuleList(ConditionEncoder(4, cfg.dec_channels, cfg.hand_hidden)
                                      for _ in range(n_encoders))

    def inject(self, f, cond, scale):
        if cond is None or len(self.encoders) == 0:
            return f
        normed = instance_norm(f)
        for enc in self.encoders:
            gamma, beta = enc(cond, scale, tuple(f.shape[-2:]))
            f = f + gamma * normed + beta
        return f

    def forward(self, features, cond=None):
        f = self.inp(features)
        f = self.inject(f, cond, 0)
        scale = 1
        for i, up in enumerate(self.ups):
            f = up(tf.interpolate(f, scale_factor=2, mode="bilinear", align_corners=False))
            if i + 1 in self.inject_after[1:]:
                f = self.inject(f, cond, scale)
                scale += 1
        return torch.sigmoid(self.out(f))


def condition_image(rgb, mask):
    """Stack an ``(B, 3, H, W)`` control raster with its ``(B, 1, H, W)`` mask."""
    return torch.cat([rgb * mask, mask], dim=1)


class PortraitGenerator(nn.Module):
    """Appearance extractor, body detector, warp estimator and decoder in one module."""

    def __init__(self, config=None, template=None, n_encoders=None):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        cam = cfg.camera()
        scale, offset = cam.normalized_affine(cfg.width, cfg.height)
        self.register_buffer("nscale", torch.as_tensor(scale, dtype=torch.float32))
        self.register_buffer("noffset", torch.as_tensor(offset, dtype=torch.float32))
        self.extractor = AppearanceExtractor(cfg)
        if cfg.mode == "body":
            tpl = mr.body_template() if template is None else template
            self.detector = MotionDetector(cfg, tpl)
        else:
            self.detector = None
        self.warp = WarpEstimator(cfg, np.abs(scale) * cfg.sigma)
        if n_encoders is None:
            n_encoders = 1 if cfg.hand_injection else 0
        self.decoder = Decoder(cfg, n_encoders)

    def normalize(self, points):
        return to_normalized(points, self.nscale.to(points.dtype), self.noffset.to(points.dtype))

    def extract_appearance(self, source):
        return self.extractor(source)

    def detect_motion(self, source):
        if self.detector is None:
            raise InvalidParamsError("head mode has no body detector")
        return self.detector(source)

    def fuse(self, head, body=None):
        """Fused canonical keypoints ``[head; body]`` for this mode."""
        if self.config.mode == "head" or body is None:
            if self.config.mode == "body":
                raise ShapeMismatchError("body mode needs body keypoints")
            return head
        return torch.cat([head, body], dim=1)

    def estimate_warp(self, x_s, x_d, volume):
        """Canonical fused keypoints -> :class:`WarpField`."""
        return self.warp(self.normalize(x_s), self.normalize(x_d), volume)

    def generate_frame(self, volume, warp, cond=None):
        warped = tf.grid_sample(volume, warp.grid(), mode="bilinear", padding_mode="border",
                                align_corners=False)
        B, C, D, H, W = warped.shape
        feats = warped.reshape(B, C * D, H, W) * warp.occlusion
        return self.decoder(feats, cond)

    def forward(self, source, head_s, head_d, body_d=None, cond=None, volume=None, detected=None):
        """Render driving frames.

        ``head_s``/``head_d`` are ``(B, N_h, 3)`` canonical head keypoints (offsets
        applied). ``body_d`` is ``(deformation, scale, translation)`` for the driving
        frame; the source canonical keypoints come from the detector.
        """
        if volume is None:
            volume = self.extract_appearance(source)
        if self.config.mode == "body":
            if detected is None:
                detected = self.detect_motion(source)
            delta, s, t = body_d
            x_s = self.fuse(head_s, detected.source_keypoints())
            body = s[:, None, None] * (detected.canonical + delta) + t[:, None]
            x_d = self.fuse(head_d, body)
        else:
            x_s, x_d = head_s, head_d
        warp = self.estimate_warp(x_s, x_d, volume)
        return self.generate_frame(volume, warp, cond), warp, detected


def hand_condition(hands_per_frame, camera, size):
    """Rendered hand controls for a batch of frames -> ``(B, 4, H, W)`` tensor (or None)."""
    imgs = []
    for hands in hands_per_frame:
        if not hands:
            return None
        ctrl = mr.render_hand_control(list(hands), camera, size)
        imgs.append(np.concatenate([ctrl.pixels * ctrl.mask[..., None], ctrl.mask[..., None]], axis=-1))
    return torch.as_tensor(np.stack(imgs), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()


# --------------------------------------------------------------------------
# face refinement
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FaceBox:
    top: int
    left: int
    size: int

    def slices(self):
        return slice(self.top, self.top + self.size), slice(self.left, self.left + self.size)

    def check(self, height, width):
        if self.top < 0 or self.left < 0 or self.top + self.size > height or self.left + self.size > width:
            raise InvalidParamsError(f"face box {self} leaves the {height}x{width} frame")
        return self

    def camera(self, frame_camera):
        """Camera whose pixel grid is this crop of ``frame_camera``'s grid."""
        return mr.Camera(frame_camera.scale_x, frame_camera.scale_y,
                         frame_camera.offset_x - self.left, frame_camera.offset_y - self.top)


def face_box(head_kp, camera, size, height, width):
    """Crop box of ``size`` pixels centered on the projected head contour, clamped inside the frame."""
    c = camera.project(np.asarray(head_kp)[mr.CONTOUR]).mean(axis=0)
    top = int(np.clip(round(c[1] - size / 2), 0, height - size))
    left = int(np.clip(round(c[0] - size / 2), 0, width - size))
    return FaceBox(top, left, size)


def face_mask(head_kp, camera, height, width, dilate=2):
    """Binary mask of the head-contour polygon, dilated by ``dilate`` pixels."""
    shapes = kernels.ShapeList()
    shapes.polygon(camera.project(np.asarray(head_kp)[mr.CONTOUR]), [1.0, 1.0, 1.0])
    cov = kernels.raster_soft(shapes, np.zeros((height, width, 3)))[..., 0]
    mask = cov >= 0.5
    if dilate > 0:
        mask = binary_dilation(mask, iterations=dilate)
    return mask


def feather(mask, ramp=3):
    """Blend weights: 0 outside ``mask``, rising linearly over ``ramp`` pixels inside it."""
    if not mask.any():
        return np.zeros(mask.shape)
    inside = distance_transform_edt(mask)
    return np.clip(inside / ramp, 0.0, 1.0)


def blend(frame, patch, weights, box):
    """Composite ``patch`` into ``frame`` at ``box`` with per-pixel ``weights``; returns a new array."""
    out = np.array(frame, dtype=np.float64, copy=True)
    rows, cols = box.slices()
    region = out[rows, cols]
    w = weights[..., None]
    out[rows, cols] = np.where(w > 0, region + w * (np.asarray(patch, dtype=np.float64) - region), region)
    return out


class FaceRefiner(nn.Module):
    """Head-scale generator that re-renders a face crop with head keypoints only.

    The background of the crop, with the face masked out, drives the decoder's
    modulation path.
    """

    def __init__(self, crop=64):
        super().__init__()
        self.crop = crop
        cfg = GeneratorConfig(mode="head", height=crop, width=crop, hand_injection=True)
        self.config = cfg
        self.net = PortraitGenerator(cfg)

    def render_crop(self, src_crop, kp_s, kp_d, background):
        """All tensors in crop space; keypoints already normalized to the crop."""
        volume = self.net.extract_appearance(src_crop)
        warp = self.net.warp(kp_s, kp_d, volume)
        return self.net.generate_frame(volume, warp, background)


def crop_inputs(frame, head_kp, box, camera, dilate=2):
    """Crop pixels, normalized crop keypoints and the face mask of a frame."""
    rows, cols = box.slices()
    crop = np.asarray(frame)[rows, cols]
    crop_cam = box.camera(camera)
    kp = crop_cam.to_normalized(np.asarray(head_kp), box.size, box.size)
    mask = face_mask(head_kp, crop_cam, box.size, box.size, dilate)
    return crop, kp, mask


def _img(x):
    return torch.tensor(np.asarray(x), dtype=torch.float32).permute(2, 0, 1)[None]


@torch.no_grad()
def refine_face(refiner, frame, source, head_src, head_drv, camera, box=None, mask=None):
    """Re-render the face of ``frame`` from ``source`` and composite it back.

    ``frame``/``source`` are ``H x W x 3`` arrays. Pixels outside the dilated
    face mask are returned unchanged.
    """
    if refiner is None:
        raise CheckpointError("no face refiner loaded")
    frame = np.asarray(frame, dtype=np.float64)
    H, W = frame.shape[:2]
    size = refiner.crop
    box = (box or face_box(head_drv, camera, size, H, W)).check(H, W)
    box_s = face_box(head_src, camera, size, H, W)
    src_crop, kp_s, _ = crop_inputs(source, head_src, box_s, camera)
    drv_crop, kp_d, drv_mask = crop_inputs(frame, head_drv, box, camera)
    if mask is not None:
        drv_mask = mask
    background = condition_image(_img(drv_crop), torch.as_tensor(~drv_mask, dtype=torch.float32)[None, None])
    patch = refiner.render_crop(_img(src_crop), torch.as_tensor(kp_s, dtype=torch.float32)[None],
                                torch.as_tensor(kp_d, dtype=torch.float32)[None], background)
    patch = patch[0].permute(1, 2, 0).double().numpy()
    return blend(frame, patch, feather(drv_mask), box)


@torch.no_grad()
def animate_head(model, source, head_src, head_drv):
    """Head-only animation: ``source`` ``S x S x 3`` frame, ``(N_h, 3)`` keypoints -> frame."""
    if model is None or model.config.mode != "head":
        raise CheckpointError("animate_head needs a head-mode generator")
    src = _img(source)
    kp_s = torch.tensor(np.asarray(head_src), dtype=torch.float32)[None]
    kp_d = torch.tensor(np.asarray(head_drv), dtype=torch.float32)[None]
    out, _, _ = model(src, kp_s, kp_d)
    return out[0].permute(1, 2, 0).double().numpy()
