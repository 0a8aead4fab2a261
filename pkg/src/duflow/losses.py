"""Training objectives for bidirectional unsupervised flow.

The data term compares a frame against its reconstruction (the other frame
inverse-warped by the estimated flow) through a soft census descriptor and a
generalized Charbonnier penalty; occlusion flags derived from
forward-backward flow mismatch, together with warp validity, exclude pixels
whose photometric error is meaningless. A second-order smoothness term and a
forward-backward consistency penalty regularize the fields.

Census descriptor: on intensity images, for every offset k in the
(2r+1)^2 patch, e_k(p) = d / sqrt(sigma^2 + d^2) with d = I(p+k) - I(p)
(edge-clamped reads). The hard ternary transform has zero gradient almost
everywhere, so this bounded soft surrogate is used instead. Descriptor
distance per neighbor is q^2 / (dist_eps + q^2), bounded in [0, 1).

Occlusion flags are detection outputs, not learnable signals: they are
computed outside the tape and enter losses as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MaskEmptyError, ShapeError
from .tensor import Graph, Tensor4
from .warp import sample_flow_at_flow, warp_image

RGB_TO_INTENSITY = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class CharbonnierParams:
    """rho(x) = (x^2 + eps^2)^alpha."""

    alpha: float = 0.45
    eps: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"charbonnier alpha must lie in (0, 1], got {self.alpha}")
        if self.eps <= 0.0:
            raise ValueError(f"charbonnier eps must be positive, got {self.eps}")

    def rho_scalar(self, x: float) -> float:
        return float((x * x + self.eps * self.eps) ** self.alpha)


@dataclass(frozen=True)
class CensusParams:
    patch_radius: int = 3
    soft_sigma: float = 0.81
    dist_eps: float = 0.1

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError(f"census patch_radius must be >= 1, got {self.patch_radius}")


@dataclass(frozen=True)
class OcclusionParams:
    alpha1: float = 0.01
    alpha2: float = 0.5

    def __post_init__(self):
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("occlusion alphas must be positive")


@dataclass(frozen=True)
class LossWeights:
    w_data: float = 1.0
    w_smooth: float = 3.0
    w_fb: float = 0.2

    def __post_init__(self):
        if min(self.w_data, self.w_smooth, self.w_fb) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class OcclusionMask:
    """Binary occlusion flags plus warp-validity channels, all (N,1,H,W).

    o_f / o_b are the pure consistency-violation flags; valid_f / valid_b are
    1 where the flow-displaced sample stayed inside the image. `occluded_f`
    combines both: a pixel is unusable when flagged or carried out of bounds.
    """

    o_f: np.ndarray
    o_b: np.ndarray
    valid_f: np.ndarray
    valid_b: np.ndarray

    @property
    def occluded_f(self) -> np.ndarray:
        return np.maximum(self.o_f, 1.0 - self.valid_f)

    @property
    def occluded_b(self) -> np.ndarray:
        return np.maximum(self.o_b, 1.0 - self.valid_b)

    @staticmethod
    def none(n: int, h: int, w: int, dtype=np.float32) -> "OcclusionMask":
        z = np.zeros((n, 1, h, w), dtype=dtype)
        one = np.ones((n, 1, h, w), dtype=dtype)
        return OcclusionMask(z, z.copy(), one, one.copy())


@dataclass
class LossReport:
    total: float
    data_f: float
    data_b: float
    smooth: float
    fb: float
    occluded_fraction_f: float
    occluded_fraction_b: float
    node: Tensor4 | None = None
    warnings: tuple = field(default_factory=tuple)

    def line(self, step: int) -> str:
        return (
            f"step={step} total={self.total:.6f} data_f={self.data_f:.6f} "
            f"data_b={self.data_b:.6f} smooth={self.smooth:.6f} fb={self.fb:.6f} "
            f"occ_f={self.occluded_fraction_f:.4f} occ_b={self.occluded_fraction_b:.4f}"
        )


def charbonnier(g: Graph, x: Tensor4, params: CharbonnierParams = CharbonnierParams()) -> Tensor4:
    """(x^2 + eps^2)^alpha elementwise; smooth at x = 0."""
    return g.pow_scalar(g.add_scalar(g.mul(x, x), params.eps * params.eps), params.alpha)


def charbonnier_of_squared(g: Graph, x_sq: Tensor4, params: CharbonnierParams) -> Tensor4:
    """rho(sqrt(x_sq)) = (x_sq + eps^2)^alpha, for magnitudes held as squares."""
    return g.pow_scalar(g.add_scalar(x_sq, params.eps * params.eps), params.alpha)


def intensity(g: Graph, image: Tensor4) -> Tensor4:
    """RGB (N,3,H,W) to single-channel intensity; passes 1-channel input through."""
    n, c, h, w = image.shape
    if c == 1:
        return image
    if c != 3:
        raise ShapeError(f"intensity expects 1 or 3 channels, got shape {image.shape}")
    r, gc, b = RGB_TO_INTENSITY
    red = g.take_channel(image, 0)
    green = g.take_channel(image, 1)
    blue = g.take_channel(image, 2)
    return g.add(g.add(g.scale(red, r), g.scale(green, gc)), g.scale(blue, b))


def census_offsets(patch_radius: int):
    """Row-major neighbor offsets of the (2r+1)^2 patch, centre included."""
    r = patch_radius
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def census_descriptor(g: Graph, image: Tensor4, params: CensusParams = CensusParams()) -> Tensor4:
    """Soft census descriptor: one channel per patch neighbor.

    Input must be single-channel intensity; convert RGB with `intensity`
    first. Border reads clamp to the edge sample. Implemented as one fused
    tape node: the per-neighbor math is a single vectorized expression and
    the adjoint folds the shifted reads back with edge accumulation.
    """
    n, c, h, w = image.shape
    if c != 1:
        raise ShapeError(f"census_descriptor expects single-channel input, got {image.shape}")
    offsets = census_offsets(params.patch_radius)
    sig_sq = image.dtype.type(params.soft_sigma * params.soft_sigma)

    shifted = np.empty((n, len(offsets), h, w), dtype=image.dtype)
    plane = image.data[:, 0]
    for k, (dy, dx) in enumerate(offsets):
        iy = np.clip(np.arange(h) + dy, 0, h - 1)
        ix = np.clip(np.arange(w) + dx, 0, w - 1)
        shifted[:, k] = plane[:, iy[:, None], ix[None, :]]
    d = shifted - plane[:, None]
    inv_norm = 1.0 / np.sqrt(sig_sq + d * d)
    out = d * inv_norm

    def backward(gout: np.ndarray):
        if not image.requires_grad:
            return
        # de/dd = sigma^2 / (sigma^2 + d^2)^(3/2)
        dd = gout * (sig_sq * inv_norm * inv_norm * inv_norm)
        gimg = -dd.sum(axis=1, keepdims=True)
        from .tensor import _shift_adjoint_axis

        for k, (dy, dx) in enumerate(offsets):
            gk = dd[:, k : k + 1]
            gk = _shift_adjoint_axis(gk, dy, axis=2)
            gk = _shift_adjoint_axis(gk, dx, axis=3)
            gimg += gk
        image.accumulate_grad(gimg, own=True)

    return g._emit(out, (image,), backward)


def census_cost(g: Graph, desc1: Tensor4, desc2: Tensor4, params: CensusParams = CensusParams()) -> Tensor4:
    """Per-pixel descriptor distance: sum_k q^2 / (dist_eps + q^2)."""
    if desc1.shape != desc2.shape:
        raise ShapeError(f"census_cost descriptor shapes differ: {desc1.shape} vs {desc2.shape}")
    q = g.sub(desc1, desc2)
    q_sq = g.mul(q, q)
    per = g.div(q_sq, g.add_scalar(q_sq, params.dist_eps))
    return g.sum_channels(per)


def reconstruction_loss(
    g: Graph,
    frame: Tensor4,
    reconstructed: Tensor4,
    include_mask: Tensor4 | None,
    charb: CharbonnierParams = CharbonnierParams(),
    census: CensusParams = CensusParams(),
):
    """Masked mean of rho(census_cost(frame, reconstructed)).

    Returns (scalar node, warned). An all-zero include mask yields a zero
    constant and warned=True instead of failing.
    """
    if frame.shape != reconstructed.shape:
        raise ShapeError(
            f"reconstruction_loss frame shapes differ: {frame.shape} vs {reconstructed.shape}"
        )
    d1 = census_descriptor(g, intensity(g, frame), census)
    d2 = census_descriptor(g, intensity(g, reconstructed), census)
    cost = census_cost(g, d1, d2, census)
    rho = charbonnier(g, cost, charb)
    try:
        return g.reduce_mean(rho, include_mask), False
    except MaskEmptyError:
        zero = Tensor4(np.zeros((1, 1, 1, 1), dtype=frame.dtype))
        return zero, True


def occlusion_masks(flow_f, flow_b, params: OcclusionParams = OcclusionParams()) -> OcclusionMask:
    """Forward-backward consistency occlusion flags (Tensor4 or ndarray input).

    A pixel is flagged in the forward direction when
    |Mf + Mb(p+Mf)|^2 >= alpha1 * (|Mf|^2 + |Mb(p+Mf)|^2) + alpha2,
    and symmetrically for the backward direction. Flags are constants: no
    gradient flows through them or through the resampling used here.
    """
    mf = flow_f.data if isinstance(flow_f, Tensor4) else np.asarray(flow_f)
    mb = flow_b.data if isinstance(flow_b, Tensor4) else np.asarray(flow_b)
    if mf.shape != mb.shape or mf.ndim != 4 or mf.shape[1] != 2:
        raise ShapeError(f"occlusion_masks needs matching (N,2,H,W) flows, got {mf.shape} vs {mb.shape}")

    def one_direction(fa, fb):
        scratch = Graph()
        sampled, valid = sample_flow_at_flow(scratch, Tensor4(fb), Tensor4(fa))
        diff = fa + sampled.data
        lhs = (diff * diff).sum(axis=1, keepdims=True)
        mags = (fa * fa).sum(axis=1, keepdims=True) + (sampled.data * sampled.data).sum(
            axis=1, keepdims=True
        )
        rhs = params.alpha1 * mags + params.alpha2
        flag = (lhs >= rhs).astype(fa.dtype)
        return flag, valid.data

    o_f, valid_f = one_direction(mf, mb)
    o_b, valid_b = one_direction(mb, mf)
    return OcclusionMask(o_f, o_b, valid_f, valid_b)


def occlusion_aware_data_loss(
    g: Graph,
    frame1: Tensor4,
    frame2: Tensor4,
    flow_f: Tensor4,
    flow_b: Tensor4,
    masks: OcclusionMask,
    charb: CharbonnierParams = CharbonnierParams(),
    census: CensusParams = CensusParams(),
):
    """Bidirectional reconstruction losses over usable pixels.

    data_f reconstructs frame1 from frame2 via the forward flow, averaged
    where neither occluded nor out of bounds; data_b symmetrically.
    Returns (data_f, data_b, warnings).
    """
    warped1, valid_f = warp_image(g, frame2, flow_f)
    warped2, valid_b = warp_image(g, frame1, flow_b)
    include_f = Tensor4((1.0 - masks.o_f) * np.minimum(valid_f.data, masks.valid_f))
    include_b = Tensor4((1.0 - masks.o_b) * np.minimum(valid_b.data, masks.valid_b))
    data_f, warn_f = reconstruction_loss(g, frame1, warped1, include_f, charb, census)
    data_b, warn_b = reconstruction_loss(g, frame2, warped2, include_b, charb, census)
    warnings = tuple(
        name for name, w in (("data_f_empty_mask", warn_f), ("data_b_empty_mask", warn_b)) if w
    )
    return data_f, data_b, warnings


def smoothness_loss(g: Graph, flow: Tensor4, charb: CharbonnierParams = CharbonnierParams()) -> Tensor4:
    """Second-order smoothness: mean rho of 1-D second differences.

    One mean over every interior stencil response, both axes and both flow
    components together.
    """
    n, c, h, w = flow.shape
    if h < 3 or w < 3:
        raise ShapeError(f"smoothness_loss needs H, W >= 3, got {flow.shape}")

    def second_diff_x():
        a = g.crop(flow, 0, 0, h, w - 2)
        b = g.crop(flow, 0, 1, h, w - 2)
        cc = g.crop(flow, 0, 2, h, w - 2)
        return g.add(g.sub(a, g.scale(b, 2.0)), cc)

    def second_diff_y():
        a = g.crop(flow, 0, 0, h - 2, w)
        b = g.crop(flow, 1, 0, h - 2, w)
        cc = g.crop(flow, 2, 0, h - 2, w)
        return g.add(g.sub(a, g.scale(b, 2.0)), cc)

    rx = charbonnier(g, second_diff_x(), charb)
    ry = charbonnier(g, second_diff_y(), charb)
    n_x = n * c * h * (w - 2)
    n_y = n * c * (h - 2) * w
    mx = g.reduce_mean(rx)
    my = g.reduce_mean(ry)
    return g.add(g.scale(mx, n_x / (n_x + n_y)), g.scale(my, n_y / (n_x + n_y)))


def fb_consistency_loss(
    g: Graph,
    flow_f: Tensor4,
    flow_b: Tensor4,
    masks: OcclusionMask,
    charb: CharbonnierParams = CharbonnierParams(),
):
    """Penalize |Mf + Mb(p+Mf)| over non-occluded pixels, both directions.

    The two directional masked means are averaged. Gradients flow through
    the flow values (including the resampled field); the masks are
    constants. Returns (scalar node, warnings).
    """

    def one_direction(fa: Tensor4, fb: Tensor4, occluded: np.ndarray):
        sampled, _ = sample_flow_at_flow(g, fb, fa)
        s = g.add(fa, sampled)
        mag_sq = g.sum_channels(g.mul(s, s))
        rho = charbonnier_of_squared(g, mag_sq, charb)
        include = Tensor4((1.0 - occluded).astype(fa.dtype))
        try:
            return g.reduce_mean(rho, include), False
        except MaskEmptyError:
            return Tensor4(np.zeros((1, 1, 1, 1), dtype=fa.dtype)), True

    term_f, warn_f = one_direction(flow_f, flow_b, masks.occluded_f)
    term_b, warn_b = one_direction(flow_b, flow_f, masks.occluded_b)
    warnings = tuple(
        name for name, w in (("fb_f_empty_mask", warn_f), ("fb_b_empty_mask", warn_b)) if w
    )
    return g.scale(g.add(term_f, term_b), 0.5), warnings


def total_loss(
    g: Graph,
    frame1: Tensor4,
    frame2: Tensor4,
    flow_f: Tensor4,
    flow_b: Tensor4,
    weights: LossWeights = LossWeights(),
    charb: CharbonnierParams = CharbonnierParams(),
    census: CensusParams = CensusParams(),
    occ: OcclusionParams = OcclusionParams(),
    occlusion_enabled: bool = True,
) -> LossReport:
    """Weighted sum of all terms, with per-component scalars for logging.

    With occlusion_enabled=False (stage-1 training) the flags are forced to
    zero everywhere; warp validity still excludes out-of-bounds samples.
    """
    n, _, h, w = frame1.shape
    masks = occlusion_masks(flow_f, flow_b, occ)
    if not occlusion_enabled:
        masks = OcclusionMask(
            np.zeros_like(masks.o_f), np.zeros_like(masks.o_b), masks.valid_f, masks.valid_b
        )
    data_f, data_b, warn_data = occlusion_aware_data_loss(
        g, frame1, frame2, flow_f, flow_b, masks, charb, census
    )
    smooth = g.scale(
        g.add(smoothness_loss(g, flow_f, charb), smoothness_loss(g, flow_b, charb)), 0.5
    )
    fb, warn_fb = fb_consistency_loss(g, flow_f, flow_b, masks, charb)

    total = g.add(
        g.scale(g.add(data_f, data_b), weights.w_data),
        g.add(g.scale(smooth, weights.w_smooth), g.scale(fb, weights.w_fb)),
    )
    return LossReport(
        total=total.data.item(),
        data_f=data_f.data.item(),
        data_b=data_b.data.item(),
        smooth=smooth.data.item(),
        fb=fb.data.item(),
        occluded_fraction_f=float(masks.occluded_f.mean()),
        occluded_fraction_b=float(masks.occluded_b.mean()),
        node=total,
        warnings=warn_data + warn_fb,
    )
