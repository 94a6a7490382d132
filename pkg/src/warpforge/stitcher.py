"""Two-view stitching by direct optimization of TPS control offsets.

Pipeline: robust homography from matches, middle-plane split, gradient
descent on the stitching objective over both views' control offsets, dense
warps onto a shared canvas, average fusion and overlap metrics.
"""
from __future__ import annotations

import base64
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .amoe import FusionWeights
from .errors import DivergenceError, InputError, SchemaError
from .evaluation import MetricReport, metric_report
from .homography import (Correspondences, apply_homography, decompose_middle_plane,
                         homography_to_offsets, offsets_to_homography, FourPtOffsets,
                         ransac_fit, sampling_flow)
from .imaging import FlowField, average_fuse, bilinear_sample, overlap_mask, warp_with_flow
from .npt import KeypointSet
from .objective import LossBreakdown, LossConfig, StitchObjective, homography_offsets
from .tps_ffd import ControlGrid, TpsWarpOperator, lattice, smooth_offsets, tps_fit

CONVENTIONS = {
    "corner_order": "TL,TR,BL,BR at pixel centres (0,0),(W-1,0),(0,H-1),(W-1,H-1)",
    "H_direction": "H maps reference pixels to target pixels",
    "middle_plane": "H_ref/H_tgt map middle-plane pixels to reference/target pixels; H @ H_ref = H_tgt",
    "flow": "backward: output pixel p samples the input at p + flow(p)",
    "align_normalization": "masked L1 averaged over all pixels of the output frame",
    "shape_loss": "each view's control mesh penalized independently, then summed",
    "reg_scale": "single fusion weight vector (1/16-scale reading)",
}


@dataclass
class StitchConfig:
    loss: LossConfig = field(default_factory=lambda: LossConfig(intra_mode="prose"))
    ransac_threshold: float = 2.0
    ransac_iterations: int = 1000
    step_size: float = 1.0
    max_iters: int = 500
    tol: float = 1e-6
    smoothing: tuple = (0.0,)  # coarse-to-fine Gaussian sigmas, optimized in order
    backend: str = "ffd"
    matches: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise InputError("step_size must be > 0")
        if self.max_iters < 1:
            raise InputError("max_iters must be >= 1")
        if self.backend not in ("ffd", "vanilla"):
            raise InputError(f"backend must be ffd or vanilla, got {self.backend!r}")
        self.smoothing = tuple(float(s) for s in self.smoothing) or (0.0,)

    def echo(self) -> dict:
        d = asdict(self)
        d["smoothing"] = list(self.smoothing)
        return d


# ------------------------------------------------------------------ matches

MATCH_KEYS = ("ref_points", "tgt_points", "ref_desc", "tgt_desc", "matches")


def parse_match_text(text: str) -> dict:
    """Parse ``key = <JSON value>`` records; ``#`` starts a comment line."""
    record = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SchemaError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in MATCH_KEYS:
            raise SchemaError(f"line {lineno}: unknown field {key!r}")
        if key in record:
            raise SchemaError(f"line {lineno}: duplicate field {key!r}")
        try:
            record[key] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"field {key!r}: invalid value ({exc.msg})") from exc
    return record


def _points(record, key) -> np.ndarray:
    if key not in record:
        raise SchemaError(f"missing field {key!r}")
    try:
        arr = np.asarray(record[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"field {key!r}: not a numeric array") from exc
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2 or not np.all(np.isfinite(arr)):
        raise SchemaError(f"field {key!r}: expected an array of finite [x, y] pairs")
    return arr


def _desc(record, key, n) -> np.ndarray:
    if key not in record:
        return np.zeros((n, 0))
    try:
        arr = np.asarray(record[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"field {key!r}: descriptors must be equal-length number arrays") from exc
    if arr.size == 0:
        return np.zeros((n, 0))
    if arr.ndim != 2 or len(arr) != n:
        raise SchemaError(f"field {key!r}: expected {n} descriptors, found {len(arr)}")
    return arr


def ingest_matches(path, ref_frame=None, tgt_frame=None):
    """Read a match file into (ref KeypointSet, tgt KeypointSet, Correspondences).

    ``ref_frame``/``tgt_frame`` are optional ``(width, height)`` tuples; when
    omitted the frame is the bounding box of the points.
    """
    with open(path, encoding="utf-8") as f:
        record = parse_match_text(f.read())
    ref = _points(record, "ref_points")
    tgt = _points(record, "tgt_points")
    ref_desc = _desc(record, "ref_desc", len(ref))
    tgt_desc = _desc(record, "tgt_desc", len(tgt))
    if "matches" in record:
        try:
            pairs = np.asarray(record["matches"], dtype=np.int64).reshape(-1, 2)
        except (TypeError, ValueError) as exc:
            raise SchemaError("field 'matches': expected [[i, j], ...] integer pairs") from exc
        if pairs.size and (pairs.min() < 0 or pairs[:, 0].max() >= len(ref)
                           or pairs[:, 1].max() >= len(tgt)):
            raise SchemaError("field 'matches': index out of range")
    else:
        if len(ref) != len(tgt):
            raise SchemaError("without 'matches', ref_points and tgt_points must have equal length")
        pairs = np.stack([np.arange(len(ref)), np.arange(len(ref))], axis=1)
    if len(pairs) < 4:
        raise InputError(f"need ≥ 4 correspondences, got {len(pairs)}")

    def kps(pts, desc, frame):
        if frame is None:
            frame = (int(math.floor(pts[:, 0].max())) + 1, int(math.floor(pts[:, 1].max())) + 1)
        return KeypointSet(pts, desc, int(frame[0]), int(frame[1]))

    corr = Correspondences(ref[pairs[:, 0]], tgt[pairs[:, 1]])
    return kps(ref, ref_desc, ref_frame), kps(tgt, tgt_desc, tgt_frame), corr


def write_matches(path, ref_points, tgt_points, matches=None) -> None:
    lines = [f"ref_points = {json.dumps(np.asarray(ref_points).tolist())}",
             f"tgt_points = {json.dumps(np.asarray(tgt_points).tolist())}"]
    if matches is not None:
        lines.append(f"matches = {json.dumps(np.asarray(matches).tolist())}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- synthesis

def make_texture(height: int, width: int, seed: int = 0, channels: int = 1) -> np.ndarray:
    """Smooth multi-scale random texture in [0.05, 0.95]."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    img = np.zeros((height, width, channels))
    for sigma, amp in ((12.0, 1.0), (6.0, 0.6), (3.0, 0.35)):
        noise = rng.standard_normal((height, width, channels))
        layer = gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="reflect")
        img += amp * layer / layer.std()
    img -= img.min()
    img /= img.max()
    return 0.05 + 0.9 * img


@dataclass
class SyntheticPair:
    i_ref: np.ndarray
    i_tgt: np.ndarray
    flow: FlowField  # tgt pixel t samples the reference at t + flow(t)
    ref_points: np.ndarray
    tgt_points: np.ndarray
    H: np.ndarray  # generator homography, reference -> target
    tps_offsets: np.ndarray


def generate_synthetic_pair(base, seed: int = 0, homography_magnitude: float = 0.05,
                            tps_magnitude: float = 0.0, margin: float = 0.125,
                            n_points: int = 200, grid: int = 12) -> SyntheticPair:
    """Reference/target pair related by a known homography composed with a TPS.

    The reference is the centre crop of ``base``; the target samples ``base``
    at ``inv(H)(T(t))`` where ``T`` is a smooth random TPS on the target
    frame. ``homography_magnitude`` bounds each corner displacement as a
    fraction of the frame size, ``tps_magnitude`` the largest control offset
    as a fraction of the frame diagonal.
    """
    base = np.asarray(base, dtype=np.float64)
    if base.ndim == 2:
        base = base[:, :, None]
    hb, wb = base.shape[:2]
    if hb <= 128 or wb <= 128:
        raise InputError("base image must be larger than 128x128")
    m = int(round(margin * min(hb, wb)))
    h, w = hb - 2 * m, wb - 2 * m
    rng = np.random.default_rng(seed)
    if homography_magnitude > 0:
        o = rng.uniform(-1, 1, (4, 2)) * homography_magnitude * np.array([w, h])
        H = offsets_to_homography(FourPtOffsets(o, w, h))
    else:
        H = np.eye(3)
    tps_off = np.zeros((grid + 1, grid + 1, 2))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    t_pts = np.stack([xs, ys], axis=-1)
    if tps_magnitude > 0:
        tps_off = smooth_offsets(rng, grid + 1, grid + 1, tps_magnitude * math.hypot(w, h))
        sol = tps_fit(ControlGrid(grid, grid, w, h, tps_off))
        moved = sol(t_pts)
    else:
        moved = t_pts
    g = apply_homography(np.linalg.inv(H), moved) if homography_magnitude > 0 else moved
    vals, _ = bilinear_sample(base, g[..., 0] + m, g[..., 1] + m)
    i_tgt = np.clip(vals, 0.0, 1.0)
    i_ref = base[m:m + h, m:m + w].copy()
    flow = FlowField(g[..., 0] - xs, g[..., 1] - ys)

    k = max(2, int(round(math.sqrt(n_points))))
    gy, gx = np.meshgrid(np.linspace(2, h - 3, k), np.linspace(2, w - 3, k), indexing="ij")
    tp = np.stack([gx.ravel(), gy.ravel()], axis=1) + rng.uniform(-1, 1, (k * k, 2))
    if tps_magnitude > 0:
        tp_moved = sol(tp)
    else:
        tp_moved = tp
    rp = apply_homography(np.linalg.inv(H), tp_moved) if homography_magnitude > 0 else tp_moved
    keep = (rp[:, 0] >= 0) & (rp[:, 0] <= w - 1) & (rp[:, 1] >= 0) & (rp[:, 1] <= h - 1)
    return SyntheticPair(i_ref, i_tgt, flow, rp[keep], tp[keep], H, tps_off)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizeResult:
    off_ref: np.ndarray
    off_tgt: np.ndarray
    trace: list
    iterations: int
    reason: str


def _step_norm(g_ref, g_tgt):
    return max(np.abs(g_ref).max(), np.abs(g_tgt).max())


def optimize(objective: StitchObjective, off_ref, off_tgt, cfg: StitchConfig, budget=None,
             gtol: float = 1e-12) -> OptimizeResult:
    """Gradient descent with backtracking on one objective.

    The step is measured in pixels of the largest control-offset update:
    a candidate moves by ``step * g / max|g|``. Steps that do not decrease
    the total are halved and retried; accepted steps double (up to 8 px).
    """
    budget = cfg.max_iters if budget is None else budget
    bd, g_ref, g_tgt = objective.gradient(off_ref, off_tgt)
    initial = bd.total
    trace = [bd]
    step = cfg.step_size
    reason = "iteration cap"
    it = 0
    while it < budget:
        gmax = _step_norm(g_ref, g_tgt)
        if gmax < gtol:
            reason = "zero gradient"
            break
        accepted = None
        while step >= 1e-4:
            c_ref = off_ref - step * g_ref / gmax
            c_tgt = off_tgt - step * g_tgt / gmax
            cand = objective.evaluate(c_ref, c_tgt)
            if cand.total < bd.total:
                accepted = (c_ref, c_tgt, cand)
                break
            if cand.total > 10 * abs(initial) + 1e-12 and not np.isfinite(cand.total):
                raise DivergenceError("objective became non-finite", trace)
            step /= 2
        if accepted is None:
            reason = "no descent step"
            break
        off_ref, off_tgt, new = accepted
        it += 1
        if new.total > 10 * abs(initial) and initial > 0:
            raise DivergenceError("objective exceeded 10x its initial value", trace)
        rel = abs(bd.total - new.total) / max(abs(bd.total), 1e-300)
        bd, g_ref, g_tgt = objective.gradient(off_ref, off_tgt)
        trace.append(bd)
        step = min(step * 2, 8.0)
        if rel < cfg.tol:
            reason = "relative change below tolerance"
            break
    return OptimizeResult(off_ref, off_tgt, trace, it, reason)


# ------------------------------------------------------------------ stitch

def _h_report(h) -> dict:
    h = np.asarray(h, dtype=np.float64)
    return {"values": h.ravel().tolist(),
            "f64le": base64.b64encode(h.astype("<f8").tobytes()).decode("ascii")}


def _invert_warp(fn, target, start, iters: int = 30):
    """Solve fn(m) = target by Newton iterations with a finite-difference Jacobian."""
    m = np.asarray(start, dtype=np.float64).copy()
    for _ in range(iters):
        r = fn(m) - target
        if np.abs(r).max() < 1e-6:
            break
        e = 1e-3
        jx = (fn(m + [e, 0]) - fn(m - [e, 0])) / (2 * e)
        jy = (fn(m + [0, e]) - fn(m - [0, e])) / (2 * e)
        J = np.stack([jx, jy], axis=1)
        m = m - np.linalg.solve(J, r)
    return m


def warped_corners(h_x, offsets, cfg: LossConfig, frame_w: int, frame_h: int) -> np.ndarray:
    """Middle-plane positions of one view's frame corners under its final TPS."""
    sol = tps_fit(ControlGrid(cfg.U, cfg.V, frame_w, frame_h, offsets))
    corners = np.array([[0.0, 0.0], [frame_w - 1, 0.0], [0.0, frame_h - 1], [frame_w - 1, frame_h - 1]])
    h_inv = np.linalg.inv(h_x)
    return np.array([_invert_warp(lambda p: sol(p[None])[0], c, apply_homography(h_inv, c))
                     for c in corners])


def canvas_layout(points: np.ndarray, pad: int = 0, snap: float = 1e-6):
    """Integer canvas ``(origin, width, height)`` covering every point."""
    lo = np.floor(points.min(axis=0) + snap) - pad
    hi = np.ceil(points.max(axis=0) - snap) + pad
    size = (hi - lo + 1).astype(int)
    return (float(lo[0]), float(lo[1])), int(size[0]), int(size[1])


def _compose(i_ref, i_tgt, f_ref, f_tgt):
    o_ref, m_ref = warp_with_flow(i_ref, f_ref, canvas=True)
    o_tgt, m_tgt = warp_with_flow(i_tgt, f_tgt, canvas=True)
    return o_ref, m_ref, o_tgt, m_tgt


def _metrics(o_ref, m_ref, o_tgt, m_tgt) -> MetricReport:
    return metric_report(o_ref, o_tgt, overlap_mask(m_ref, m_tgt))


def _metrics_dict(rep: MetricReport) -> dict:
    d = asdict(rep)
    if math.isinf(d["mpsnr"]):
        d["mpsnr"] = "inf"
    return d


@dataclass
class StitchOutput:
    panorama: np.ndarray
    report: dict
    flow_ref: FlowField  # canvas -> reference frame
    flow_tgt: FlowField  # canvas -> target frame


def stitch(cfg: StitchConfig, i_ref, i_tgt, corr: Correspondences):
    """Stitch a pair; returns ``(panorama, report)`` with ``report`` a JSON-ready dict."""
    out = stitch_full(cfg, i_ref, i_tgt, corr)
    return out.panorama, out.report


def stitch_full(cfg: StitchConfig, i_ref, i_tgt, corr: Correspondences) -> StitchOutput:
    timings = {}
    t0 = time.perf_counter()
    i_ref = np.asarray(i_ref, dtype=np.float64)
    i_tgt = np.asarray(i_tgt, dtype=np.float64)
    if i_ref.ndim == 2:
        i_ref = i_ref[:, :, None]
    if i_tgt.ndim == 2:
        i_tgt = i_tgt[:, :, None]
    if i_ref.shape != i_tgt.shape:
        raise InputError(f"images must share a shape: {i_ref.shape} vs {i_tgt.shape}")
    h, w = i_ref.shape[:2]
    lc = cfg.loss

    H, inliers = ransac_fit(corr, cfg.ransac_threshold, cfg.ransac_iterations, cfg.seed)
    four = homography_to_offsets(H, w, h)
    timings["homography"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    h_ref, h_tgt = decompose_middle_plane(four)
    off_ref = homography_offsets(h_ref, lc, w, h)
    off_tgt = homography_offsets(h_tgt, lc, w, h)
    weights = FusionWeights.uniform()
    trace = []
    stages = []
    for level, sigma in enumerate(cfg.smoothing):
        remaining = cfg.max_iters - sum(s["iterations"] for s in stages)
        if remaining <= 0:
            break
        obj = StitchObjective(i_ref, i_tgt, h_ref, h_tgt, weights, lc, cfg.backend, smoothing=sigma)
        res = optimize(obj, off_ref, off_tgt, cfg, budget=remaining)
        off_ref, off_tgt = res.off_ref, res.off_tgt
        stages.append({"smoothing": sigma, "iterations": res.iterations, "reason": res.reason})
        trace.extend(dict(asdict(b), stage=level) for b in res.trace)
    timings["optimize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pts = [apply_homography(np.linalg.inv(hx), np.array(
        [[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])) for hx in (h_ref, h_tgt)]
    pts.append(warped_corners(h_ref, off_ref, lc, w, h))
    pts.append(warped_corners(h_tgt, off_tgt, lc, w, h))
    origin, cw, ch = canvas_layout(np.concatenate(pts))

    op = TpsWarpOperator(lc.U, lc.V, w, h, out_w=cw, out_h=ch, backend=cfg.backend, origin=origin)
    src = lattice(lc.U + 1, lc.V + 1, w, h)
    f_ref = op.flow(src + off_ref)
    f_tgt = op.flow(src + off_tgt)
    o_ref, m_ref, o_tgt, m_tgt = _compose(i_ref, i_tgt, f_ref, f_tgt)
    final = _metrics(o_ref, m_ref, o_tgt, m_tgt)
    pano = average_fuse(o_ref, m_ref, o_tgt, m_tgt)

    hh = _compose(i_ref, i_tgt, sampling_flow(h_ref, ch, cw, origin), sampling_flow(h_tgt, ch, cw, origin))
    homography_stage = _metrics(*hh)
    timings["warp_and_metrics"] = time.perf_counter() - t0

    report = {
        "H": _h_report(H),
        "H_ref": _h_report(h_ref),
        "H_tgt": _h_report(h_tgt),
        "four_pt_offsets": four.offsets.tolist(),
        "ransac_inliers": int(len(inliers)),
        "correspondences": int(len(corr)),
        "stages": stages,
        "trace": trace,
        "final_loss": trace[-1] if trace else None,
        "metrics": _metrics_dict(final),
        "homography_stage_metrics": _metrics_dict(homography_stage),
        "canvas": {"origin": list(origin), "width": cw, "height": ch},
        "config": cfg.echo(),
        "conventions": CONVENTIONS,
        "timings": timings,
    }
    return StitchOutput(pano, report, f_ref, f_tgt)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


LOSS_FIELDS = tuple(f.name for f in fields(LossConfig))
RUN_FIELDS = tuple(f.name for f in fields(StitchConfig) if f.name != "loss")


def _coerce(name: str, value, default):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if name == "smoothing":
        return tuple(float(v) for v in text.split(",") if v.strip())
    if name == "matches":
        return text or None
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def build_config(values: dict) -> StitchConfig:
    """StitchConfig from flat ``field -> value`` pairs (strings are coerced).

    Keys may use snake_case or kebab-case; loss fields sit beside run fields.
    """
    base = StitchConfig()
    loss_kw, run_kw = {}, {}
    for key, value in values.items():
        name = key.replace("-", "_")
        if name.lower() in ("u", "v"):
            name = name.upper()
        try:
            if name in LOSS_FIELDS:
                loss_kw[name] = _coerce(name, value, getattr(base.loss, name))
            elif name in RUN_FIELDS:
                run_kw[name] = _coerce(name, value, getattr(base, name))
            else:
                raise InputError(f"unknown configuration key {key!r}")
        except ValueError as exc:
            raise InputError(f"bad value for {key!r}: {value!r}") from exc
    loss = asdict(base.loss)
    loss.update(loss_kw)
    return StitchConfig(loss=LossConfig(**loss), **run_kw)


def read_config_file(path) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key] = value
    return out
