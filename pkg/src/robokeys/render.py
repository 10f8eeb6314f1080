"""Rasterizer turning a SceneSample into a training image and belief maps.

Conventions: images are float32 arrays of shape ``(3, H, W)`` with values in
[0, 1]; belief maps are float32 ``(J, H, W)``. Pixel ``(u, v)`` has its
center at integer coordinates, so column ``u`` spans ``[u - 0.5, u + 0.5)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .kinematics import Camera, RobotModel, forward_kinematics, look_at_camera, project_unchecked
from .scenegen import SceneSample, make_rng

BACKGROUND_MODES = ("gradient", "checker", "perlin")
NEAR_PLANE = 0.05

# 2x2 subpixel grid used for coverage anti-aliasing
_SUB = np.array([-0.25, 0.25])


class DegenerateSceneError(ValueError):
    pass


class PPMError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class HardBinInjector:
    """Extra clutter for scenes whose ``joint`` angle falls in ``bins``."""

    joint: int = 0
    bins: tuple[int, ...] = (0, 1)
    extra_distractors: int = 6

    def active(self, scene: SceneSample) -> bool:
        return self.joint < len(scene.bins) and int(scene.bins[self.joint]) in self.bins


# Each link gets a fixed hue, scaled by a random intensity, so that neighbouring
# joints are told apart by local color rather than by the whole chain.
LINK_PALETTE = (
    (1.0, 0.15, 0.15),
    (1.0, 0.85, 0.1),
    (0.15, 0.9, 0.2),
    (0.1, 0.85, 1.0),
    (0.25, 0.3, 1.0),
    (1.0, 0.2, 0.95),
)


@dataclass(frozen=True)
class RenderConfig:
    image_size: tuple[int, int] = (64, 64)
    focal_scale: float = 1.5
    link_thickness: float = 16.0
    link_taper: float = 0.12
    belief_sigma: float = 1.5
    distractor_count_range: tuple[int, int] = (0, 3)
    noise_stddev: float = 0.02
    background_mode: str = "mixed"
    background_intensity: tuple[float, float] = (0.0, 1.0)
    link_intensity: tuple[float, float] = (0.3, 1.0)
    link_palette: tuple[tuple[float, float, float], ...] = LINK_PALETTE
    injector: HardBinInjector | None = None

    def __post_init__(self):
        if self.belief_sigma <= 0:
            raise ValueError("belief_sigma must be positive")
        if self.link_thickness <= 0:
            raise ValueError("link_thickness must be positive")
        if not self.link_palette:
            raise ValueError("link_palette must not be empty")
        if self.background_mode not in BACKGROUND_MODES + ("mixed",):
            raise ValueError(f"unknown background mode {self.background_mode!r}")
        lo, hi = self.distractor_count_range
        if lo < 0 or hi < lo:
            raise ValueError("bad distractor_count_range")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image size must be positive")

    @property
    def focal(self) -> float:
        return self.focal_scale * self.image_size[0]

    @property
    def scale(self) -> float:
        """Pixel scale relative to the 64-pixel-wide reference image."""
        return self.image_size[0] / 64.0

    def resized(self, width: int, height: int) -> "RenderConfig":
        """Same scene appearance at another resolution."""
        s = width / self.image_size[0]
        return replace(
            self,
            image_size=(width, height),
            link_thickness=self.link_thickness * s,
            belief_sigma=self.belief_sigma * s,
        )


# Uniform joint angles make the chain's mean position the base origin, so the
# orbit camera aims there.
LOOK_AT = (0.0, 0.0, 0.0)


def scene_camera(scene: SceneSample, model: RobotModel, cfg: RenderConfig) -> Camera:
    return look_at_camera(
        scene.camera_azimuth,
        scene.camera_elevation,
        scene.camera_distance,
        LOOK_AT,
        cfg.focal,
        cfg.image_size,
    )


def project_keypoints(scene: SceneSample, model: RobotModel, cfg: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(J, 2)`` and depths ``(J,)`` of the labelled joints."""
    cam = scene_camera(scene, model, cfg)
    pts = forward_kinematics(model, scene.angles)[1:]
    return project_unchecked(cam, pts)


def in_frame(uv: np.ndarray, depth: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    w, h = image_size
    return (
        (depth > 1e-6)
        & (uv[:, 0] >= 0)
        & (uv[:, 0] < w)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] < h)
    )


# ---------------------------------------------------------------- primitives


def capsule_coverage(p0, p1, radius: float, width: int, height: int):
    """Fractional 2x2-supersampled coverage of a thick segment.

    Returns ``(y0, x0, cov)`` where ``cov`` covers the clipped bounding box
    starting at row ``y0``/column ``x0``, or ``None`` if nothing is visible.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    x0 = max(int(np.floor(min(p0[0], p1[0]) - radius)), 0)
    x1 = min(int(np.ceil(max(p0[0], p1[0]) + radius)) + 1, width)
    y0 = max(int(np.floor(min(p0[1], p1[1]) - radius)), 0)
    y1 = min(int(np.ceil(max(p0[1], p1[1]) + radius)) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return None
    xs = (np.arange(x0, x1)[:, None] + _SUB).reshape(-1)
    ys = (np.arange(y0, y1)[:, None] + _SUB).reshape(-1)
    px = xs[None, :] - p0[0]
    py = ys[:, None] - p0[1]
    d = p1 - p0
    dd = float(d @ d)
    if dd > 0:
        t = np.clip((px * d[0] + py * d[1]) / dd, 0.0, 1.0)
    else:
        t = np.zeros_like(px * py)
    ex = px - t * d[0]
    ey = py - t * d[1]
    inside = (ex * ex + ey * ey) <= radius * radius
    cov = inside.reshape(y1 - y0, 2, x1 - x0, 2).mean(axis=(1, 3))
    return y0, x0, cov


def ring_coverage(center, radius: float, half_width: float, width: int, height: int):
    """Coverage of an annulus; ``half_width >= radius`` gives a filled disc."""
    c = np.asarray(center, dtype=np.float64)
    outer = radius + half_width
    x0 = max(int(np.floor(c[0] - outer)), 0)
    x1 = min(int(np.ceil(c[0] + outer)) + 1, width)
    y0 = max(int(np.floor(c[1] - outer)), 0)
    y1 = min(int(np.ceil(c[1] + outer)) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return None
    xs = (np.arange(x0, x1)[:, None] + _SUB).reshape(-1) - c[0]
    ys = (np.arange(y0, y1)[:, None] + _SUB).reshape(-1) - c[1]
    r = np.sqrt(xs[None, :] ** 2 + ys[:, None] ** 2)
    inside = np.abs(r - radius) <= half_width
    cov = inside.reshape(y1 - y0, 2, x1 - x0, 2).mean(axis=(1, 3))
    return y0, x0, cov


def composite(image: np.ndarray, coverage, color) -> None:
    """Blend ``color`` over ``image`` in place using fractional coverage."""
    if coverage is None:
        return
    y0, x0, cov = coverage
    h, w = cov.shape
    region = image[:, y0 : y0 + h, x0 : x0 + w]
    col = np.asarray(color, dtype=np.float32).reshape(-1, 1, 1)
    c = cov.astype(np.float32)[None]
    region *= 1.0 - c
    region += c * col


def draw_segments(
    image: np.ndarray,
    segments: Sequence[tuple],
) -> None:
    """Painter's algorithm over ``(p0, p1, radius, color, depth)`` tuples.

    ``color`` is an RGB triple or a gray level.

    Farther segments are drawn first so nearer ones end up on top.
    """
    _, h, w = image.shape
    order = sorted(range(len(segments)), key=lambda i: -segments[i][4])
    for i in order:
        p0, p1, radius, color, _ = segments[i]
        composite(image, capsule_coverage(p0, p1, radius, w, h), np.broadcast_to(color, 3))


# --------------------------------------------------------------- backgrounds


def _background(mode: str, rng: np.random.Generator, cfg: RenderConfig) -> np.ndarray:
    w, h = cfg.image_size
    lo, hi = cfg.background_intensity
    if mode == "gradient":
        c0 = rng.uniform(lo, hi, 3)
        c1 = rng.uniform(lo, hi, 3)
        ang = rng.uniform(0, 2 * np.pi)
        xs = np.arange(w) / max(w - 1, 1) - 0.5
        ys = np.arange(h) / max(h - 1, 1) - 0.5
        t = np.cos(ang) * xs[None, :] + np.sin(ang) * ys[:, None]
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        img = c0[:, None, None] + (c1 - c0)[:, None, None] * t[None]
    elif mode == "checker":
        c0 = rng.uniform(lo, hi, 3)
        c1 = rng.uniform(lo, hi, 3)
        cell = rng.uniform(4, 16) * cfg.scale
        ox, oy = rng.uniform(0, cell, 2)
        xs = np.floor((np.arange(w) + ox) / cell).astype(int)
        ys = np.floor((np.arange(h) + oy) / cell).astype(int)
        mask = ((xs[None, :] + ys[:, None]) % 2).astype(np.float64)
        img = c0[:, None, None] + (c1 - c0)[:, None, None] * mask[None]
    else:
        img = np.zeros((3, h, w))
        total = 0.0
        for octave, amp in ((3, 1.0), (6, 0.5), (12, 0.25)):
            grid = rng.uniform(0, 1, (3, octave + 1, octave + 1))
            gx = np.linspace(0, octave, w)
            gy = np.linspace(0, octave, h)
            ix = np.minimum(gx.astype(int), octave - 1)
            iy = np.minimum(gy.astype(int), octave - 1)
            fx = (gx - ix)[None, None, :]
            fy = (gy - iy)[None, :, None]
            g00 = grid[:, iy][:, :, ix]
            g01 = grid[:, iy][:, :, ix + 1]
            g10 = grid[:, iy + 1][:, :, ix]
            g11 = grid[:, iy + 1][:, :, ix + 1]
            top = g00 + (g01 - g00) * fx
            bot = g10 + (g11 - g10) * fx
            img += amp * (top + (bot - top) * fy)
            total += amp
        img = lo + (hi - lo) * img / total
    return img.astype(np.float32)


def _draw_distractors(image, count: int, rng: np.random.Generator, cfg: RenderConfig) -> None:
    _, h, w = image.shape
    lo, hi = cfg.link_intensity
    for _ in range(count):
        kind = rng.integers(0, 2)
        color = rng.uniform(lo, hi) * np.asarray(cfg.link_palette[rng.integers(0, len(cfg.link_palette))])
        if kind == 0:
            p0 = rng.uniform((0, 0), (w, h))
            p1 = rng.uniform((0, 0), (w, h))
            radius = rng.uniform(0.5, 2.5) * cfg.scale
            composite(image, capsule_coverage(p0, p1, radius, w, h), color)
        else:
            c = rng.uniform((0, 0), (w, h))
            radius = rng.uniform(2.0, 8.0) * cfg.scale
            half = rng.uniform(0.5, 1.0) * radius if rng.random() < 0.5 else radius
            composite(image, ring_coverage(c, radius, half, w, h), color)


# ------------------------------------------------------------------ renderer


def _link_segments(scene: SceneSample, model: RobotModel, cfg: RenderConfig, intensities):
    cam = scene_camera(scene, model, cfg)
    pts = cam.to_camera(forward_kinematics(model, scene.angles))
    if np.all(pts[:, 2] <= NEAR_PLANE):
        raise DegenerateSceneError("every chain point lies behind the camera")
    cx, cy = cam.principal_point
    f = cam.focal
    segments = []
    for i in range(model.joint_count):
        a, b = pts[i].copy(), pts[i + 1].copy()
        if a[2] <= NEAR_PLANE and b[2] <= NEAR_PLANE:
            continue
        # clip against the near plane
        if a[2] <= NEAR_PLANE or b[2] <= NEAR_PLANE:
            t = (NEAR_PLANE - a[2]) / (b[2] - a[2])
            c = a + t * (b - a)
            if a[2] <= NEAR_PLANE:
                a = c
            else:
                b = c
        uv0 = (cx + f * a[0] / a[2], cy + f * a[1] / a[2])
        uv1 = (cx + f * b[0] / b[2], cy + f * b[1] / b[2])
        depth = 0.5 * (a[2] + b[2])
        thickness = cfg.link_thickness * max(1.0 - cfg.link_taper * i, 0.2) / depth
        color = intensities[i] * np.asarray(cfg.link_palette[i % len(cfg.link_palette)])
        segments.append((uv0, uv1, 0.5 * thickness, color, depth))
    return segments


def render_image(scene: SceneSample, model: RobotModel, cfg: RenderConfig) -> np.ndarray:
    """Rasterize ``scene`` into a float32 ``(3, H, W)`` image in [0, 1]."""
    if scene.joint_count != model.joint_count:
        raise ValueError("scene and model disagree on the joint count")
    rng = make_rng(scene.augmentation_seed)
    mode = cfg.background_mode
    mode_pick = int(rng.integers(0, len(BACKGROUND_MODES)))
    if mode == "mixed":
        mode = BACKGROUND_MODES[mode_pick]
    intensities = rng.uniform(*cfg.link_intensity, size=model.joint_count)
    lo, hi = cfg.distractor_count_range
    count = int(rng.integers(lo, hi + 1))
    bg_rng, clutter_rng, noise_rng = rng.spawn(3)

    image = _background(mode, bg_rng, cfg)
    _draw_distractors(image, count, clutter_rng, cfg)
    if cfg.injector is not None and cfg.injector.active(scene):
        _draw_distractors(image, cfg.injector.extra_distractors, clutter_rng, cfg)
    draw_segments(image, _link_segments(scene, model, cfg, intensities))
    if cfg.noise_stddev > 0:
        image += noise_rng.normal(0.0, cfg.noise_stddev, image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)
    return image


def gaussian_planes(uv: np.ndarray, visible: np.ndarray, sigma: float, image_size) -> np.ndarray:
    w, h = image_size
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    out = np.zeros((len(uv), h, w), dtype=np.float32)
    inv = -0.5 / (sigma * sigma)
    for j in np.flatnonzero(visible):
        gx = np.exp(inv * (xs - uv[j, 0]) ** 2)
        gy = np.exp(inv * (ys - uv[j, 1]) ** 2)
        out[j] = np.outer(gy, gx)
    return out


def render_beliefs(scene: SceneSample, model: RobotModel, cfg: RenderConfig) -> np.ndarray:
    """Gaussian ground-truth belief maps ``(J, H, W)`` at the projected joints."""
    uv, depth = project_keypoints(scene, model, cfg)
    return gaussian_planes(uv, in_frame(uv, depth, cfg.image_size), cfg.belief_sigma, cfg.image_size)


# ----------------------------------------------------------------------- PPM


def write_ppm(image: np.ndarray, path: str | os.PathLike) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("expected a (3, H, W) image")
    _, h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def parse_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise PPMError("missing P6 magic", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PPMError("expected an integer header field", start)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PPMError("header must end with one whitespace byte", pos)
    pos += 1
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise PPMError("image dimensions must be positive", pos)
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}", pos)
    need = 3 * w * h
    if len(buf) - pos < need:
        raise PPMError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return (px.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())
