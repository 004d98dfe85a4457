"""Geometric machinery: affine/TPS flows, backward warping, the layer probe.

Conventions used everywhere in this package:

* A flow field is an (H, W, 2) tensor of backward-sampling displacements in
  pixels at its own resolution: output(x) = input(x + flow(x)), channel 0
  is the x (column) displacement, channel 1 the y (row) displacement.
* Out-of-bounds samples read as 0.
* Affine parameters are a 2x3 matrix acting on normalized coordinates in
  [-1, 1] (pixel i of an n-pixel axis maps to 2*i/(n-1) - 1).
* TPS control points are in pixel coordinates of the target flow grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


class SpatialOpsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# warping


def _flatten_batch(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise SpatialOpsError(f"expected (C,H,W) or (B,C,H,W) tensor, got {tuple(x.shape)}")


def _flow_batch(flow, batch):
    if flow.dim() == 3:
        flow = flow.unsqueeze(0)
    if flow.dim() != 4 or flow.shape[-1] != 2:
        raise SpatialOpsError(f"expected (H,W,2) or (B,H,W,2) flow, got {tuple(flow.shape)}")
    if flow.shape[0] == 1 and batch > 1:
        flow = flow.expand(batch, -1, -1, -1)
    return flow


def base_grid(h, w, dtype=torch.float32, device=None):
    """Pixel-coordinate grid of shape (H, W, 2), channel order (x, y)."""
    ys = torch.arange(h, dtype=dtype, device=device)
    xs = torch.arange(w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def warp(x, flow, mode: str = "bilinear"):
    """Backward-warp an image or feature map by a pixel-displacement flow.

    Bilinear interpolation is computed directly from pixel coordinates
    (no normalized-coordinate round trip) so integer flows are exact
    shifts and the operation is linear in `x`. Differentiable w.r.t.
    both `x` and `flow`.
    """
    xb, squeeze = _flatten_batch(x)
    b, c, h, w = xb.shape
    flow = _flow_batch(flow, b).to(xb.dtype)
    if flow.shape[1] != h or flow.shape[2] != w:
        raise SpatialOpsError(
            f"flow resolution {tuple(flow.shape[1:3])} does not match input {(h, w)};"
            " call rescale_flow first"
        )

    if mode == "bicubic":
        # config-flag fallback; bilinear is the supported default
        grid = base_grid(h, w, xb.dtype, xb.device).unsqueeze(0) + flow
        gx = 2.0 * grid[..., 0] / (w - 1) - 1.0
        gy = 2.0 * grid[..., 1] / (h - 1) - 1.0
        out = F.grid_sample(
            xb, torch.stack([gx, gy], dim=-1),
            mode="bicubic", padding_mode="zeros", align_corners=True,
        )
        return out.squeeze(0) if squeeze else out
    if mode != "bilinear":
        raise SpatialOpsError(f"unknown interpolation mode {mode!r}")

    grid = base_grid(h, w, xb.dtype, xb.device).unsqueeze(0) + flow
    sx, sy = grid[..., 0], grid[..., 1]
    x0 = torch.floor(sx)
    y0 = torch.floor(sy)
    fx = sx - x0
    fy = sy - y0

    out = torch.zeros_like(xb)
    flat = xb.reshape(b, c, h * w)
    for dy in (0.0, 1.0):
        for dx in (0.0, 1.0):
            cx = x0 + dx
            cy = y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inside = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)
            ix = cx.clamp(0, w - 1).long()
            iy = cy.clamp(0, h - 1).long()
            idx = (iy * w + ix).reshape(b, 1, h * w).expand(b, c, h * w)
            vals = torch.gather(flat, 2, idx).reshape(b, c, h, w)
            out = out + vals * (wgt * inside.to(xb.dtype)).unsqueeze(1)
    return out.squeeze(0) if squeeze else out


def rescale_flow(flow, target_h: int, target_w: int):
    """Resize a flow grid and scale its displacement values accordingly."""
    if target_h <= 0 or target_w <= 0:
        raise SpatialOpsError("target resolution must be positive")
    single = flow.dim() == 3
    fb = flow.unsqueeze(0) if single else flow
    h, w = fb.shape[1], fb.shape[2]
    if (h, w) == (target_h, target_w):
        return flow
    resized = F.interpolate(
        fb.permute(0, 3, 1, 2), size=(target_h, target_w),
        mode="bilinear", align_corners=True,
    ).permute(0, 2, 3, 1)
    scale = torch.tensor(
        [target_w / w, target_h / h], dtype=resized.dtype, device=resized.device
    )
    resized = resized * scale
    return resized.squeeze(0) if single else resized


# ---------------------------------------------------------------------------
# affine transforms


def _norm_coords(points_px, h, w):
    scale = torch.tensor([2.0 / (w - 1), 2.0 / (h - 1)], dtype=points_px.dtype)
    return points_px * scale - 1.0


def _denorm_coords(points_norm, h, w):
    scale = torch.tensor([(w - 1) / 2.0, (h - 1) / 2.0], dtype=points_norm.dtype)
    return (points_norm + 1.0) * scale


def affine_to_flow(params, h: int, w: int, dtype=torch.float64):
    """Flow implementing the forward image transform given by a 2x3 matrix.

    `params` acts on normalized coordinates: y_norm = A @ x_norm + b. The
    backward flow therefore samples at A^{-1}(x - b).
    """
    params = torch.as_tensor(params, dtype=dtype)
    if params.shape != (2, 3):
        raise SpatialOpsError(f"affine params must be 2x3, got {tuple(params.shape)}")
    lin = params[:, :2]
    trans = params[:, 2]
    det = lin[0, 0] * lin[1, 1] - lin[0, 1] * lin[1, 0]
    if abs(float(det)) < 1e-12:
        raise SpatialOpsError("singular linear part in affine transform")
    inv = torch.linalg.inv(lin)

    grid = base_grid(h, w, dtype)
    gnorm = _norm_coords(grid.reshape(-1, 2), h, w)
    src_norm = (gnorm - trans) @ inv.T
    src_px = _denorm_coords(src_norm, h, w).reshape(h, w, 2)
    return src_px - grid


def make_affine(rotation: float = 0.0, scale=(1.0, 1.0), shear: float = 0.0,
                translation=(0.0, 0.0)):
    """Convenience 2x3 builder (rotation in radians, translation normalized)."""
    c, s = math.cos(rotation), math.sin(rotation)
    rot = torch.tensor([[c, -s], [s, c]], dtype=torch.float64)
    shr = torch.tensor([[1.0, shear], [0.0, 1.0]], dtype=torch.float64)
    scl = torch.diag(torch.tensor([scale[0], scale[1]], dtype=torch.float64))
    lin = rot @ shr @ scl
    t = torch.tensor(translation, dtype=torch.float64).reshape(2, 1)
    return torch.cat([lin, t], dim=1)


# ---------------------------------------------------------------------------
# thin-plate splines


@dataclass
class TPSParams:
    """Forward TPS map fitted from control pairs: f(src_i) = dst_i."""

    src: torch.Tensor            # (K, 2) control source points, pixels
    dst: torch.Tensor            # (K, 2) control target points, pixels
    affine: torch.Tensor         # (2, 3) affine part [A | b]
    radial_weights: torch.Tensor  # (K, 2)
    reg: float = 0.0


def _tps_kernel(r2):
    # U(r) = r^2 log r^2 with the r -> 0 limit defined as 0
    out = torch.zeros_like(r2)
    mask = r2 > 0
    out[mask] = r2[mask] * torch.log(r2[mask])
    return out


def _solve_tps(src, dst, reg):
    k = src.shape[0]
    d2 = torch.cdist(src, src).pow(2)
    kern = _tps_kernel(d2) + reg * torch.eye(k, dtype=src.dtype)
    p = torch.cat([torch.ones(k, 1, dtype=src.dtype), src], dim=1)
    upper = torch.cat([kern, p], dim=1)
    lower = torch.cat([p.T, torch.zeros(3, 3, dtype=src.dtype)], dim=1)
    lhs = torch.cat([upper, lower], dim=0)
    rhs = torch.cat([dst, torch.zeros(3, 2, dtype=src.dtype)], dim=0)
    try:
        sol = torch.linalg.solve(lhs, rhs)
    except RuntimeError as exc:
        raise SpatialOpsError(f"singular TPS system: {exc}") from exc
    if not torch.isfinite(sol).all():
        raise SpatialOpsError("singular TPS system (non-finite solution)")
    weights = sol[:k]
    aff = sol[k:]  # rows: [bias; x coeff; y coeff], columns per output dim
    affine = torch.stack([
        torch.tensor([aff[1, 0], aff[2, 0], aff[0, 0]], dtype=src.dtype),
        torch.tensor([aff[1, 1], aff[2, 1], aff[0, 1]], dtype=src.dtype),
    ])
    return weights, affine


def tps_solve(src, dst, reg: float = 0.0) -> TPSParams:
    """Fit the standard TPS interpolant from src to dst control points."""
    src = torch.as_tensor(src, dtype=torch.float64)
    dst = torch.as_tensor(dst, dtype=torch.float64)
    if src.shape != dst.shape or src.dim() != 2 or src.shape[1] != 2:
        raise SpatialOpsError("control points must be matching (K,2) arrays")
    if src.shape[0] < 3:
        raise SpatialOpsError("TPS needs at least 3 control points")
    if reg < 0:
        raise SpatialOpsError("regularization must be non-negative")
    weights, affine = _solve_tps(src, dst, reg)
    return TPSParams(src=src, dst=dst, affine=affine, radial_weights=weights, reg=reg)


def tps_map(params: TPSParams, points) -> torch.Tensor:
    """Evaluate the fitted forward map at (N, 2) pixel points."""
    pts = torch.as_tensor(points, dtype=torch.float64)
    d2 = torch.cdist(pts, params.src).pow(2)
    radial = _tps_kernel(d2) @ params.radial_weights
    lin = pts @ params.affine[:, :2].T + params.affine[:, 2]
    return lin + radial


def tps_to_flow(params: TPSParams, h: int, w: int) -> torch.Tensor:
    """Backward flow realizing the forward TPS map on an HxW grid.

    The inverse map is approximated by refitting a TPS on the swapped
    control pairs; it is exact at the control points.
    """
    inverse = tps_solve(params.dst, params.src, params.reg)
    grid = base_grid(h, w, torch.float64).reshape(-1, 2)
    src_px = tps_map(inverse, grid)
    return (src_px - grid).reshape(h, w, 2)


# ---------------------------------------------------------------------------
# occlusion


@dataclass
class OcclusionSpec:
    """Axis-aligned patches {x, y, w, h} in feature coordinates."""

    patches: list = field(default_factory=list)
    fill: float = 0.0


def occlude(x, spec: OcclusionSpec):
    xb, squeeze = _flatten_batch(x)
    _, _, h, w = xb.shape
    out = xb.clone()
    for px, py, pw, ph in spec.patches:
        if px < 0 or py < 0 or px + pw > w or py + ph > h or pw < 0 or ph < 0:
            raise SpatialOpsError(f"patch {(px, py, pw, ph)} out of bounds for {(h, w)}")
        out[:, :, py:py + ph, px:px + pw] = spec.fill
    return out.squeeze(0) if squeeze else out


# ---------------------------------------------------------------------------
# layer probe (which tap should carry the motion?)


PSNR_CAP = 99.0


def psnr(a, b, peak: float = 2.0, cap: float = PSNR_CAP) -> float:
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / mse))


def estimate_translation(moved, ref) -> tuple[float, float]:
    """(dx, dy) displacement of `moved` relative to `ref` via cross-correlation."""
    a = np.asarray(torch.as_tensor(moved).detach().mean(dim=0), dtype=np.float64)
    b = np.asarray(torch.as_tensor(ref).detach().mean(dim=0), dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    fa = np.fft.rfft2(a)
    fb = np.fft.rfft2(b)
    corr = np.fft.irfft2(fa * np.conj(fb), s=a.shape)
    corr = np.fft.fftshift(corr)
    peak = np.unravel_index(np.argmax(corr), corr.shape)
    h, w = a.shape
    dy = peak[0] - h // 2
    dx = peak[1] - w // 2

    def refine(c, i, j, axis):
        lo = (i - 1, j) if axis == 0 else (i, j - 1)
        hi = (i + 1, j) if axis == 0 else (i, j + 1)
        if lo[0] < 0 or lo[1] < 0 or hi[0] >= c.shape[0] or hi[1] >= c.shape[1]:
            return 0.0
        denom = c[lo] - 2 * c[i, j] + c[hi]
        if denom == 0:
            return 0.0
        return 0.5 * (c[lo] - c[hi]) / denom

    dy += refine(corr, peak[0], peak[1], 0)
    dx += refine(corr, peak[0], peak[1], 1)
    return float(dx), float(dy)


@dataclass
class ProbeRow:
    tap_index: int
    resolution: int
    pos_error_px: float
    interior_psnr_db: float


@dataclass
class ProbeReport:
    """Per-tap outcome of applying one normalized warp at each tap.

    Text format: a header line `tap resolution pos_error_px interior_psnr_db`
    followed by one whitespace-separated row per tap.
    """

    rows: list

    def to_text(self) -> str:
        lines = ["tap resolution pos_error_px interior_psnr_db"]
        for r in self.rows:
            lines.append(
                f"{r.tap_index} {r.resolution} {r.pos_error_px:.4f} {r.interior_psnr_db:.4f}"
            )
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    def row(self, tap_index: int) -> ProbeRow:
        for r in self.rows:
            if r.tap_index == tap_index:
                return r
        raise KeyError(tap_index)


def shift_flow(h, w, dx, dy, dtype=torch.float32):
    """Constant flow shifting content by (+dx, +dy) pixels."""
    flow = torch.zeros(h, w, 2, dtype=dtype)
    flow[..., 0] = -dx
    flow[..., 1] = -dy
    return flow


def probe_layers(gan, style, dx_norm: float = 0.125, dy_norm: float = 0.0,
                 images_out=None) -> ProbeReport:
    """Apply the same normalized translation at every tap and score the decode.

    Positional error is the cross-correlation displacement of the decoded
    image against the unwarped decode, compared with the requested shift.
    Interior PSNR is measured against the expected image-space shift with
    the moved-in border band excluded.
    """
    from . import generator as gen

    trace = gen.synthesize(style, gan)
    base = trace.image
    res_out = base.shape[-1]
    sx_img = dx_norm * res_out
    sy_img = dy_norm * res_out
    expected = warp(base, shift_flow(res_out, res_out, sx_img, sy_img))

    margin = int(math.ceil(max(abs(sx_img), abs(sy_img)))) + gan.decode_rf_margin() + 2
    sl = slice(margin, res_out - margin)

    rows = []
    grids = [base]
    for tap in trace.taps:
        res = tap.shape[-1]
        flow = shift_flow(res, res, dx_norm * res, dy_norm * res, dtype=tap.dtype)
        warped_tap = warp(tap, flow)
        img = gen.synthesize_from_feature(warped_tap, style, gan)
        dx_est, dy_est = estimate_translation(img, base)
        pos_err = math.hypot(dx_est - sx_img, dy_est - sy_img)
        score = psnr(img[:, sl, sl], expected[:, sl, sl])
        rows.append(ProbeRow(
            tap_index=int(round(math.log2(res / 4))),
            resolution=res,
            pos_error_px=pos_err,
            interior_psnr_db=score,
        ))
        grids.append(img)

    if images_out is not None:
        save_image_grid(grids, images_out)
    return ProbeReport(rows=rows)


def save_image_grid(images, path, pad: int = 2) -> None:
    """Write a horizontal strip of [-1,1] images as one PNG."""
    from PIL import Image

    arrays = []
    for img in images:
        arr = torch.as_tensor(img).detach().clamp(-1, 1)
        arr = ((arr + 1.0) * 127.5).round().to(torch.uint8).permute(1, 2, 0).numpy()
        arrays.append(arr)
    h = max(a.shape[0] for a in arrays)
    strip = np.zeros((h, sum(a.shape[1] + pad for a in arrays) - pad, 3), dtype=np.uint8)
    x = 0
    for a in arrays:
        strip[: a.shape[0], x:x + a.shape[1]] = a
        x += a.shape[1] + pad
    Image.fromarray(strip).save(path)
