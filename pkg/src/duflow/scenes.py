"""Deterministic synthetic scenes with exact ground-truth flow and occlusion.

A scene is a stack of translating layers: a background texture plus textured
sprites (rectangles and discs) composited back to front. Every layer's
texture is a continuous function (bilinear interpolation of a coarse random
grid), and shape membership is an exact geometric predicate evaluated at
real coordinates, so the two frames, the flow field, and the occlusion mask
all come from the same closed-form model:

    flow(p)      = translation of the topmost layer at p in frame 1
    occluded(p)  = p + flow(p) leaves the image, or a different layer is
                   on top there in frame 2

Motion is translation-only, which keeps those predicates exact. The module
also carries the augmentation suite (geometric ops applied identically to
frames and flow with the proper vector transform; photometric ops per
frame) and the on-disk dataset layout:

    NNNNN_img1.ppm  NNNNN_img2.ppm  NNNNN_flow.flo  NNNNN_occ.pgm

A directory of bare *_img1/_img2 pairs without ground truth is accepted too.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, SceneError
from .flowio import read_flo, read_pgm, read_ppm, write_flo, write_pgm, write_ppm


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    background: str = "noise"  # noise | checker | gradient
    n_sprites: int = 3
    max_displacement: float = 4.0
    sprite_size_range: tuple = (10.0, 22.0)
    seed: int = 0
    # testing hook: pin the background translation instead of sampling it
    background_translation: tuple | None = None

    def __post_init__(self):
        if self.background not in ("noise", "checker", "gradient"):
            raise SceneError(f"unknown background kind {self.background!r}")
        if self.n_sprites < 0:
            raise SceneError("n_sprites must be >= 0")
        if self.max_displacement > min(self.height, self.width) / 8:
            raise SceneError(
                f"max_displacement {self.max_displacement} exceeds min(H,W)/8 "
                f"= {min(self.height, self.width) / 8}"
            )
        if self.sprite_size_range[0] > min(self.height, self.width):
            raise SceneError(
                f"sprites of size {self.sprite_size_range} do not fit a "
                f"{self.height}x{self.width} image"
            )


@dataclass
class ImagePair:
    frame1: np.ndarray  # (3, H, W) float32 in [0, 1]
    frame2: np.ndarray


@dataclass
class GroundTruth:
    flow: np.ndarray  # (2, H, W) float32, frame1 -> frame2
    occlusion: np.ndarray  # (H, W) float32 {0, 1}


@dataclass
class SceneSample:
    frame1: np.ndarray
    frame2: np.ndarray
    flow_fw: np.ndarray
    occ_fw: np.ndarray
    flow_bw: np.ndarray
    occ_bw: np.ndarray

    def pair(self):
        return ImagePair(self.frame1, self.frame2), GroundTruth(self.flow_fw, self.occ_fw)

    def reversed(self) -> "SceneSample":
        return SceneSample(
            self.frame2, self.frame1, self.flow_bw, self.occ_bw, self.flow_fw, self.occ_fw
        )


class BilinearTexture:
    """Continuous texture: clamped bilinear interpolation of a coarse grid."""

    def __init__(self, grid: np.ndarray, spacing: float, origin=(0.0, 0.0)):
        self.grid = np.asarray(grid, dtype=np.float64)
        self.spacing = float(spacing)
        self.origin = origin

    def eval(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        gh, gw = self.grid.shape[1:]
        gy = np.clip((ys - self.origin[0]) / self.spacing, 0.0, gh - 1.0)
        gx = np.clip((xs - self.origin[1]) / self.spacing, 0.0, gw - 1.0)
        y0 = np.floor(gy).astype(np.int64)
        x0 = np.floor(gx).astype(np.int64)
        y1 = np.minimum(y0 + 1, gh - 1)
        x1 = np.minimum(x0 + 1, gw - 1)
        wy = gy - y0
        wx = gx - x0
        top = self.grid[:, y0, x0] * (1 - wx) + self.grid[:, y0, x1] * wx
        bot = self.grid[:, y1, x0] * (1 - wx) + self.grid[:, y1, x1] * wx
        return top * (1 - wy) + bot * wy


def _noise_texture(rng, extent_y, extent_x, spacing, lo=0.15, hi=0.85, origin=(0.0, 0.0)):
    gh = int(np.ceil(extent_y / spacing)) + 2
    gw = int(np.ceil(extent_x / spacing)) + 2
    return BilinearTexture(rng.uniform(lo, hi, size=(3, gh, gw)), spacing, origin)


def _checker_texture(rng, extent_y, extent_x, cell, origin=(0.0, 0.0)):
    gh = int(np.ceil(extent_y / cell)) + 2
    gw = int(np.ceil(extent_x / cell)) + 2
    c1 = rng.uniform(0.55, 0.85, size=3)
    c2 = rng.uniform(0.15, 0.45, size=3)
    ii, jj = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    pattern = ((ii + jj) % 2).astype(np.float64)
    grid = c1[:, None, None] * pattern + c2[:, None, None] * (1 - pattern)
    return BilinearTexture(grid, cell, origin)


def _gradient_texture(rng, extent_y, extent_x, origin=(0.0, 0.0)):
    gh, gw = 2, 2
    base = rng.uniform(0.2, 0.5, size=3)
    gain = rng.uniform(0.2, 0.4, size=3)
    ii, jj = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    ramp = (ii + jj) / 2.0
    grid = base[:, None, None] + gain[:, None, None] * ramp
    return BilinearTexture(grid, max(extent_y, extent_x), origin)


@dataclass
class Sprite:
    kind: str  # rect | disc
    center: tuple  # (cy, cx) at frame-1 time
    size: tuple  # (height, width) for rect; (diameter, diameter) for disc
    translation: tuple  # (u, v) pixels, frame1 -> frame2
    texture: BilinearTexture

    def member(self, ys, xs, at_frame2: bool):
        cy, cx = self.center
        if at_frame2:
            cx = cx + self.translation[0]
            cy = cy + self.translation[1]
        if self.kind == "rect":
            return (np.abs(xs - cx) <= self.size[1] / 2) & (np.abs(ys - cy) <= self.size[0] / 2)
        if self.kind == "disc":
            r = self.size[0] / 2
            return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        raise SceneError(f"unknown sprite kind {self.kind!r}")

    def local(self, ys, xs, at_frame2: bool):
        cy, cx = self.center
        if at_frame2:
            cx = cx + self.translation[0]
            cy = cy + self.translation[1]
        return ys - cy, xs - cx


@dataclass
class Scene:
    height: int
    width: int
    background_texture: BilinearTexture
    background_translation: tuple  # (u, v)
    sprites: list

    def _top_layer_ids(self, ys, xs, at_frame2: bool):
        ids = np.zeros(ys.shape, dtype=np.int64)
        for i, s in enumerate(self.sprites):
            ids = np.where(s.member(ys, xs, at_frame2), i + 1, ids)
        return ids

    def _compose(self, at_frame2: bool):
        h, w = self.height, self.width
        ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        u, v = self.background_translation
        by = ys - (v if at_frame2 else 0.0)
        bx = xs - (u if at_frame2 else 0.0)
        frame = self.background_texture.eval(by, bx)
        for s in self.sprites:
            m = s.member(ys, xs, at_frame2)
            ly, lx = s.local(ys, xs, at_frame2)
            frame = np.where(m[None], s.texture.eval(ly, lx), frame)
        return frame

    def _flow_and_occlusion(self, forward: bool):
        h, w = self.height, self.width
        ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        src_frame2 = not forward
        ids = self._top_layer_ids(ys, xs, at_frame2=src_frame2)
        sign = 1.0 if forward else -1.0
        trans = np.array(
            [self.background_translation] + [s.translation for s in self.sprites], dtype=np.float64
        )
        flow_u = sign * trans[ids, 0]
        flow_v = sign * trans[ids, 1]
        tx = xs + flow_u
        ty = ys + flow_v
        oob = (tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)
        ids_there = self._top_layer_ids(ty, tx, at_frame2=not src_frame2)
        occ = (oob | (ids_there != ids)).astype(np.float32)
        flow = np.stack([flow_u, flow_v]).astype(np.float32)
        return flow, occ

    def render(self) -> SceneSample:
        frame1 = np.clip(self._compose(at_frame2=False), 0.0, 1.0).astype(np.float32)
        frame2 = np.clip(self._compose(at_frame2=True), 0.0, 1.0).astype(np.float32)
        flow_fw, occ_fw = self._flow_and_occlusion(forward=True)
        flow_bw, occ_bw = self._flow_and_occlusion(forward=False)
        return SceneSample(frame1, frame2, flow_fw, occ_fw, flow_bw, occ_bw)


def _random_translation(rng, max_disp: float):
    angle = rng.uniform(0.0, 2 * np.pi)
    mag = rng.uniform(0.0, max_disp)
    return (mag * np.cos(angle), mag * np.sin(angle))


def build_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0x5CE)))
    h, w = spec.height, spec.width
    pad = spec.max_displacement + 2.0
    extent_y, extent_x = h + 2 * pad, w + 2 * pad
    origin = (-pad, -pad)
    if spec.background == "noise":
        tex = _noise_texture(rng, extent_y, extent_x, spacing=4.0, origin=origin)
    elif spec.background == "checker":
        tex = _checker_texture(rng, extent_y, extent_x, cell=8.0, origin=origin)
    else:
        tex = _gradient_texture(rng, extent_y, extent_x, origin=origin)
    if spec.background_translation is not None:
        bg_t = tuple(float(t) for t in spec.background_translation)
    else:
        bg_t = _random_translation(rng, spec.max_displacement)

    sprites = []
    for _ in range(spec.n_sprites):
        size = rng.uniform(*spec.sprite_size_range)
        if size > min(h, w):
            raise SceneError(f"sprite of size {size:.1f} larger than {h}x{w} image")
        kind = "rect" if rng.uniform() < 0.5 else "disc"
        cy = rng.uniform(size / 2, h - size / 2)
        cx = rng.uniform(size / 2, w - size / 2)
        t = _random_translation(rng, spec.max_displacement)
        margin = size / 2 + spec.max_displacement + 2.0
        tex_s = _noise_texture(
            rng, size + 8, size + 8, spacing=3.0,
            lo=rng.uniform(0.0, 0.3), hi=rng.uniform(0.7, 1.0),
            origin=(-margin, -margin),
        )
        # sprite textures are anchored at the sprite centre
        tex_s.origin = (-size / 2 - 4, -size / 2 - 4)
        sprites.append(Sprite(kind, (cy, cx), (size, size), t, tex_s))
    return Scene(h, w, tex, bg_t, sprites)


def generate_scene(spec: SceneSpec) -> SceneSample:
    return build_scene(spec).render()


def generate_pair(spec: SceneSpec):
    """(ImagePair, GroundTruth) for one random scene; deterministic in the seed."""
    return generate_scene(spec).pair()


# --------------------------------------------------------------------------- #
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    scale_range: tuple = (0.9, 1.1)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_deg: float = 5.0
    noise_sigma: float = 0.01
    brightness: float = 0.1
    contrast_range: tuple = (0.8, 1.2)
    gamma_range: tuple = (0.8, 1.2)
    color_range: tuple = (0.9, 1.1)
    seed: int = 0


def _sample_bilinear_chw(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    c, h, w = img.shape
    cy = np.clip(ys, 0.0, h - 1.0)
    cx = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.floor(cx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = cy - y0
    wx = cx - x0
    top = img[:, y0, x0] * (1 - wx) + img[:, y0, x1] * wx
    bot = img[:, y1, x0] * (1 - wx) + img[:, y1, x1] * wx
    return top * (1 - wy) + bot * wy


def augment(pair: ImagePair, gt: GroundTruth, params: AugmentParams):
    """Geometric + photometric augmentation with consistent ground truth.

    The same similarity transform (scale, flips, rotation about the image
    centre) is applied to both frames and, as a linear map, to the flow
    vectors; sample sources that leave the canvas are marked occluded.
    Photometric changes are drawn independently per frame and never touch
    the ground truth. Outputs are clipped to [0, 1].
    """
    rng = np.random.default_rng(np.random.SeedSequence((params.seed, 0xA46)))
    c, h, w = pair.frame1.shape

    scale = rng.uniform(*params.scale_range)
    hflip = rng.uniform() < params.hflip_prob
    vflip = rng.uniform() < params.vflip_prob
    theta = np.deg2rad(rng.uniform(-params.rotation_deg, params.rotation_deg))

    flip = np.diag([-1.0 if hflip else 1.0, -1.0 if vflip else 1.0])
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    lin = scale * rot @ flip  # acts on (x, y) column vectors
    inv = np.linalg.inv(lin)

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    px = xs - cx
    py = ys - cy
    qx = inv[0, 0] * px + inv[0, 1] * py + cx
    qy = inv[1, 0] * px + inv[1, 1] * py + cy
    out_of_canvas = (qx < 0) | (qx > w - 1) | (qy < 0) | (qy > h - 1)

    frame1 = _sample_bilinear_chw(pair.frame1.astype(np.float64), qy, qx)
    frame2 = _sample_bilinear_chw(pair.frame2.astype(np.float64), qy, qx)

    src_flow = _sample_bilinear_chw(gt.flow.astype(np.float64), qy, qx)
    new_u = lin[0, 0] * src_flow[0] + lin[0, 1] * src_flow[1]
    new_v = lin[1, 0] * src_flow[0] + lin[1, 1] * src_flow[1]
    flow = np.stack([new_u, new_v]).astype(np.float32)

    occ_src = _sample_bilinear_chw(gt.occlusion[None].astype(np.float64), np.round(qy), np.round(qx))[0]
    occlusion = np.where(out_of_canvas, 1.0, (occ_src > 0.5).astype(np.float64)).astype(np.float32)
    # flow vectors that now point outside the canvas are unknowable too
    tx = xs + flow[0]
    ty = ys + flow[1]
    occlusion = np.maximum(
        occlusion, ((tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)).astype(np.float32)
    )

    def photometric(img):
        out = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
        out = out + rng.uniform(-params.brightness, params.brightness)
        out = (out - 0.5) * rng.uniform(*params.contrast_range) + 0.5
        out = np.clip(out, 0.0, 1.0) ** rng.uniform(*params.gamma_range)
        out = out * rng.uniform(*params.color_range, size=(3, 1, 1))
        return np.clip(out, 0.0, 1.0)

    frame1 = photometric(frame1).astype(np.float32)
    frame2 = photometric(frame2).astype(np.float32)
    return ImagePair(frame1, frame2), GroundTruth(flow, occlusion)


# --------------------------------------------------------------------------- #
# dataset directory layout


def sample_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((base_seed, index))


def write_dataset(directory, spec: SceneSpec, count: int, seed: int):
    """Generate `count` scenes and write the documented four-file layout."""
    os.makedirs(directory, exist_ok=True)
    for i in range(count):
        child_seed = int(sample_seed(seed, i).generate_state(1)[0])
        sample = generate_scene(replace(spec, seed=child_seed))
        stem = os.path.join(directory, f"{i:05d}")
        write_ppm(sample.frame1.transpose(1, 2, 0), stem + "_img1.ppm")
        write_ppm(sample.frame2.transpose(1, 2, 0), stem + "_img2.ppm")
        write_flo(sample.flow_fw, stem + "_flow.flo")
        write_pgm(sample.occ_fw, stem + "_occ.pgm")


@dataclass
class DatasetItem:
    name: str
    frame1: np.ndarray  # (3, H, W) float32
    frame2: np.ndarray
    flow: np.ndarray | None = None
    occlusion: np.ndarray | None = None


def read_dataset(directory):
    """Load every *_img1/_img2 pair; ground truth attached when present."""
    if not os.path.isdir(directory):
        raise DataError(f"dataset directory {directory} does not exist")
    stems = []
    for fn in sorted(os.listdir(directory)):
        m = re.match(r"^(.*)_img1\.ppm$", fn)
        if m:
            stems.append(m.group(1))
    if not stems:
        raise DataError(f"dataset directory {directory} contains no *_img1.ppm files")
    items = []
    for stem in stems:
        base = os.path.join(directory, stem)
        img2 = base + "_img2.ppm"
        if not os.path.exists(img2):
            raise DataError(f"{base}_img1.ppm has no matching _img2.ppm")
        frame1 = read_ppm(base + "_img1.ppm").transpose(2, 0, 1)
        frame2 = read_ppm(img2).transpose(2, 0, 1)
        flow = occ = None
        if os.path.exists(base + "_flow.flo"):
            flow = read_flo(base + "_flow.flo")
        if os.path.exists(base + "_occ.pgm"):
            occ = (read_pgm(base + "_occ.pgm") > 0.5).astype(np.float32)
        items.append(DatasetItem(stem, frame1, frame2, flow, occ))
    return items
