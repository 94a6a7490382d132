"""Stitching objective over TPS control offsets, with analytic gradients.

total = lambda_H * align_H + lambda_T * align_T
        + w_s * (intra + inter) + w_r * reg

``align_*`` are masked L1 differences between the two views warped onto the
middle plane, averaged over every pixel of the output frame (pixels outside
the overlap contribute zero). The shape terms act on the warped control
mesh of each view and are summed over both views. Masks are treated as
constants when differentiating.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .amoe import FusionWeights, reg_loss
from .errors import ContractViolation
from .homography import apply_homography, sampling_flow
from .imaging import FlowField, bilinear_sample, bilinear_sample_grad, pixel_grid
from .tps_ffd import TpsWarpOperator, lattice

log = logging.getLogger(__name__)

INTRA_MODES = ("as-written", "prose")


@dataclass
class LossConfig:
    lambda_h: float = 1.0
    lambda_t: float = 3.0
    w_s: float = 10.0
    w_r: float = 0.01
    lambda_e: float = 0.1
    alpha: float = 0.5
    U: int = 12
    V: int = 12
    intra_mode: str = "as-written"

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "intra_mode" and v < 0:
                raise ContractViolation(f"{k} must be non-negative")
        if self.intra_mode not in INTRA_MODES:
            raise ContractViolation(f"intra_mode must be one of {INTRA_MODES}")


@dataclass
class LossBreakdown:
    align_H: float
    align_T: float
    shape_intra: float
    shape_inter: float
    reg: float
    total: float

    @classmethod
    def compose(cls, align_H, align_T, shape_intra, shape_inter, reg, cfg: LossConfig):
        total = (cfg.lambda_h * align_H + cfg.lambda_t * align_T
                 + cfg.w_s * (shape_intra + shape_inter) + cfg.w_r * reg)
        return cls(float(align_H), float(align_T), float(shape_intra), float(shape_inter),
                   float(reg), float(total))


# --------------------------------------------------------------- alignment

def _positions(flow: FlowField):
    xs, ys = pixel_grid(*flow.shape)
    return xs + flow.dx, ys + flow.dy


def masked_l1(i_ref, i_tgt, flow_ref: FlowField, flow_tgt: FlowField) -> float:
    """Mean over the frame of the channel-averaged |ref - tgt| on the overlap."""
    if flow_ref.shape != flow_tgt.shape:
        raise ContractViolation("flows must share dimensions")
    a, ma = bilinear_sample(i_ref, *_positions(flow_ref))
    b, mb = bilinear_sample(i_tgt, *_positions(flow_tgt))
    m = ma & mb
    diff = np.abs(a - b).mean(axis=2)
    return float(np.where(m, diff, 0.0).sum() / m.size)


def masked_l1_grad(i_ref, i_tgt, flow_ref: FlowField, flow_tgt: FlowField):
    """Value and gradients with respect to both sampling-position fields (H, W, 2)."""
    a, ax, ay, ma = bilinear_sample_grad(i_ref, *_positions(flow_ref))
    b, bx, by, mb = bilinear_sample_grad(i_tgt, *_positions(flow_tgt))
    m = (ma & mb).astype(np.float64)
    n = m.size
    c = a.shape[2]
    d = a - b
    value = float((m * np.abs(d).mean(axis=2)).sum() / n)
    s = np.sign(d) * (m[..., None] / (n * c))
    g_ref = np.stack([(s * ax).sum(axis=2), (s * ay).sum(axis=2)], axis=-1)
    g_tgt = -np.stack([(s * bx).sum(axis=2), (s * by).sum(axis=2)], axis=-1)
    return value, g_ref, g_tgt


def alignment_loss(i_ref, i_tgt, h_flows, t_flows):
    """``(align_H, align_T)`` from the homography and TPS flow pairs (ref, tgt)."""
    if np.shape(i_tgt)[:2] != np.shape(i_ref)[:2]:
        raise ContractViolation("reference and target images differ in size")
    return masked_l1(i_ref, i_tgt, *h_flows), masked_l1(i_ref, i_tgt, *t_flows)


# ------------------------------------------------------------------- shape

def _check_mesh(mesh, cfg: LossConfig):
    mesh = np.asarray(mesh, dtype=np.float64)
    if mesh.shape != (cfg.U + 1, cfg.V + 1, 2):
        raise ContractViolation(f"mesh must be {(cfg.U + 1, cfg.V + 1, 2)}, got {mesh.shape}")
    return mesh


def intra_grid_loss(mesh, cfg: LossConfig, frame_w: int, frame_h: int, grad: bool = False):
    """Edge-length hinge on horizontal and vertical mesh edges.

    ``as-written`` penalizes projected edge lengths above alpha*W/V (resp.
    alpha*H/U); ``prose`` penalizes lengths below them.
    """
    mesh = _check_mesh(mesh, cfg)
    U, V = cfg.U, cfg.V
    sign = 1.0 if cfg.intra_mode == "as-written" else -1.0
    ex = mesh[:, 1:, 0] - mesh[:, :-1, 0]
    ey = mesh[1:, :, 1] - mesh[:-1, :, 1]
    hx = sign * (np.abs(ex) - cfg.alpha * frame_w / V)
    hy = sign * (np.abs(ey) - cfg.alpha * frame_h / U)
    nh, nv = (U + 1) * V, U * (V + 1)
    value = np.maximum(hx, 0).sum() / nh + np.maximum(hy, 0).sum() / nv
    if not grad:
        return float(value)
    g = np.zeros_like(mesh)
    dex = np.where(hx > 0, sign * np.sign(ex), 0.0) / nh
    dey = np.where(hy > 0, sign * np.sign(ey), 0.0) / nv
    g[:, 1:, 0] += dex
    g[:, :-1, 0] -= dex
    g[1:, :, 1] += dey
    g[:-1, :, 1] -= dey
    return float(value), g


def _cos_terms(e1, e2):
    """1 - cos between edge arrays (..., 2) and gradients w.r.t. both edges."""
    n1 = np.linalg.norm(e1, axis=-1)
    n2 = np.linalg.norm(e2, axis=-1)
    ok = (n1 > 0) & (n2 > 0)
    if not ok.all():
        log.warning("inter-grid loss: %d zero-length edge pair(s) skipped", int((~ok).sum()))
    n1s = np.where(ok, n1, 1.0)
    n2s = np.where(ok, n2, 1.0)
    cos = np.where(ok, np.sum(e1 * e2, axis=-1) / (n1s * n2s), 1.0)
    d1 = e2 / (n1s * n2s)[..., None] - cos[..., None] * e1 / (n1s ** 2)[..., None]
    d2 = e1 / (n1s * n2s)[..., None] - cos[..., None] * e2 / (n2s ** 2)[..., None]
    mask = ok[..., None]
    return 1.0 - cos, -np.where(mask, d1, 0.0), -np.where(mask, d2, 0.0)


def inter_grid_loss(mesh, grad: bool = False):
    """Angular deviation between successive edges, aggregated per quad."""
    mesh = np.asarray(mesh, dtype=np.float64)
    rows, cols = mesh.shape[:2]
    if rows < 3 or cols < 3:
        raise ContractViolation("inter-grid loss needs at least a 3x3 vertex mesh")
    ew = mesh[:, 1:] - mesh[:, :-1]  # (rows, cols-1)
    eh = mesh[1:, :] - mesh[:-1, :]  # (rows-1, cols)
    eps_w, dw1, dw2 = _cos_terms(ew[:, :-1], ew[:, 1:])  # (rows, cols-2)
    eps_h, dh1, dh2 = _cos_terms(eh[:-1, :], eh[1:, :])  # (rows-2, cols)
    quad_w = eps_w[:-1] + eps_w[1:]  # (rows-1, cols-2)
    quad_h = eps_h[:, :-1] + eps_h[:, 1:]  # (rows-2, cols-1)
    value = quad_w.mean() + quad_h.mean()
    if not grad:
        return float(value)
    # each eps_w row i appears in quads i-1 and i; interior rows count twice
    cw = np.zeros(rows)
    cw[:-1] += 1
    cw[1:] += 1
    ch = np.zeros(cols)
    ch[:-1] += 1
    ch[1:] += 1
    kw = (cw / quad_w.size)[:, None, None]
    kh = (ch / quad_h.size)[None, :, None]
    g_ew = np.zeros_like(ew)
    g_ew[:, :-1] += kw * dw1
    g_ew[:, 1:] += kw * dw2
    g_eh = np.zeros_like(eh)
    g_eh[:-1, :] += kh * dh1
    g_eh[1:, :] += kh * dh2
    g = np.zeros_like(mesh)
    g[:, 1:] += g_ew
    g[:, :-1] -= g_ew
    g[1:, :] += g_eh
    g[:-1, :] -= g_eh
    return float(value), g


def shape_losses(mesh, cfg: LossConfig, frame_w: int, frame_h: int, grad: bool = False):
    if not grad:
        return intra_grid_loss(mesh, cfg, frame_w, frame_h), inter_grid_loss(mesh)
    vi, gi = intra_grid_loss(mesh, cfg, frame_w, frame_h, grad=True)
    ve, ge = inter_grid_loss(mesh, grad=True)
    return vi, ve, gi, ge


# --------------------------------------------------------------- objective

def control_source(cfg: LossConfig, frame_w: int, frame_h: int) -> np.ndarray:
    return lattice(cfg.U + 1, cfg.V + 1, frame_w, frame_h)


def homography_offsets(h: np.ndarray, cfg: LossConfig, frame_w: int, frame_h: int) -> np.ndarray:
    """Control offsets reproducing a middle-plane sampling homography on the lattice."""
    src = control_source(cfg, frame_w, frame_h)
    return apply_homography(h, src) - src


class StitchObjective:
    """Objective over both views' control offsets for a fixed image pair.

    ``H_ref``/``H_tgt`` map middle-plane pixels into each image. Offsets are
    (U+1, V+1, 2) arrays measured from the regular lattice on the output
    frame, so ``source + offsets`` are the sampling positions of the
    control points (the warped mesh). ``smoothing`` blurs both images with
    a Gaussian of that sigma before evaluation.
    """

    def __init__(self, i_ref, i_tgt, h_ref, h_tgt, weights: FusionWeights, cfg: LossConfig,
                 backend: str = "ffd", smoothing: float = 0.0):
        i_ref = np.asarray(i_ref, dtype=np.float64)
        i_tgt = np.asarray(i_tgt, dtype=np.float64)
        if i_ref.ndim == 2:
            i_ref = i_ref[:, :, None]
        if i_tgt.ndim == 2:
            i_tgt = i_tgt[:, :, None]
        if i_ref.shape != i_tgt.shape:
            raise ContractViolation(f"image shapes differ: {i_ref.shape} vs {i_tgt.shape}")
        if smoothing > 0:
            i_ref = gaussian_filter(i_ref, sigma=(smoothing, smoothing, 0))
            i_tgt = gaussian_filter(i_tgt, sigma=(smoothing, smoothing, 0))
        self.i_ref, self.i_tgt = i_ref, i_tgt
        self.frame_h, self.frame_w = i_ref.shape[:2]
        self.cfg = cfg
        self.source = control_source(cfg, self.frame_w, self.frame_h)
        self.op = TpsWarpOperator(cfg.U, cfg.V, self.frame_w, self.frame_h, backend=backend)
        self.h_flows = (sampling_flow(h_ref, self.frame_h, self.frame_w),
                        sampling_flow(h_tgt, self.frame_h, self.frame_w))
        self.align_H = masked_l1(i_ref, i_tgt, *self.h_flows)
        self.reg = reg_loss(weights, cfg.lambda_e)

    def _check(self, off):
        off = np.asarray(off, dtype=np.float64)
        if off.shape != self.source.shape:
            raise ContractViolation(f"offsets must be {self.source.shape}, got {off.shape}")
        return off

    def flows(self, off_ref, off_tgt):
        return (self.op.flow(self.source + self._check(off_ref)),
                self.op.flow(self.source + self._check(off_tgt)))

    def _shape(self, off, grad):
        return shape_losses(self.source + off, self.cfg, self.frame_w, self.frame_h, grad=grad)

    def evaluate(self, off_ref, off_tgt) -> LossBreakdown:
        off_ref, off_tgt = self._check(off_ref), self._check(off_tgt)
        align_T = masked_l1(self.i_ref, self.i_tgt, *self.flows(off_ref, off_tgt))
        intra = inter = 0.0
        for off in (off_ref, off_tgt):
            a, b = self._shape(off, grad=False)
            intra += a
            inter += b
        return LossBreakdown.compose(self.align_H, align_T, intra, inter, self.reg, self.cfg)

    def gradient(self, off_ref, off_tgt):
        """Returns ``(breakdown, grad_ref, grad_tgt)`` for the total objective."""
        off_ref, off_tgt = self._check(off_ref), self._check(off_tgt)
        cfg = self.cfg
        f_ref, f_tgt = self.flows(off_ref, off_tgt)
        align_T, g_pos_ref, g_pos_tgt = masked_l1_grad(self.i_ref, self.i_tgt, f_ref, f_tgt)
        grads = []
        intra = inter = 0.0
        for off, g_pos in ((off_ref, g_pos_ref), (off_tgt, g_pos_tgt)):
            vi, ve, gi, ge = self._shape(off, grad=True)
            intra += vi
            inter += ve
            g = cfg.lambda_t * self.op.adjoint(g_pos).reshape(off.shape)
            grads.append(g + cfg.w_s * (gi + ge))
        bd = LossBreakdown.compose(self.align_H, align_T, intra, inter, self.reg, cfg)
        return bd, grads[0], grads[1]


def total_objective(i_ref, i_tgt, off_ref, off_tgt, h_ref, h_tgt, weights: FusionWeights,
                    cfg: LossConfig, backend: str = "ffd") -> LossBreakdown:
    return StitchObjective(i_ref, i_tgt, h_ref, h_tgt, weights, cfg, backend).evaluate(off_ref, off_tgt)


def objective_grad(i_ref, i_tgt, off_ref, off_tgt, h_ref, h_tgt, weights: FusionWeights,
                   cfg: LossConfig, backend: str = "ffd"):
    """Gradient of the total objective w.r.t. both views' control offsets."""
    _, g_ref, g_tgt = StitchObjective(i_ref, i_tgt, h_ref, h_tgt, weights, cfg, backend).gradient(
        off_ref, off_tgt)
    return g_ref, g_tgt
