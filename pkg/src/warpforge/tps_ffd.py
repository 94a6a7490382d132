"""Thin-plate-spline warps and their B-spline (FFD) accelerated evaluation.

A TPS is fitted on a regular ``(U+1) x (V+1)`` lattice of control points
spanning the frame; ``U`` counts cell rows and ``V`` cell columns. The
vanilla evaluator materializes the full ``N_pixels x N_ctrl`` kernel
matrix. The FFD evaluator computes the TPS only on a coarse lattice of
``2(U+1) x 2(V+1)`` points and restores the dense field by cubic B-spline
blending of each pixel's 4x4 lattice neighbourhood.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._parallel import ROW_BLOCK, run_blocks
from .errors import ContractViolation, SingularSystemError
from .imaging import FlowField

# Rows hold the coefficients of [1, t, t^2, t^3] for N_0 .. N_3, scaled by 1/6.
BSPLINE_MATRIX = np.array([
    [1.0, -3.0, 3.0, -1.0],
    [4.0, 0.0, -6.0, 3.0],
    [1.0, 3.0, 3.0, -3.0],
    [0.0, 0.0, 0.0, 1.0],
]) / 6.0


class BufferLog:
    """Records the largest explicitly allocated intermediate buffer."""

    def __init__(self):
        self.max_bytes = 0
        self.max_name = None

    def note(self, name: str, arr: np.ndarray):
        if arr.nbytes > self.max_bytes:
            self.max_bytes = arr.nbytes
            self.max_name = name


def _note(log, name, arr):
    if log is not None:
        log.note(name, arr)


def lattice(rows: int, cols: int, frame_w: float, frame_h: float, origin=(0.0, 0.0)) -> np.ndarray:
    """(rows, cols, 2) corner-aligned uniform lattice over the frame."""
    xs = origin[0] + np.linspace(0.0, frame_w - 1.0, cols)
    ys = origin[1] + np.linspace(0.0, frame_h - 1.0, rows)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


@dataclass
class ControlGrid:
    U: int
    V: int
    frame_w: int
    frame_h: int
    offsets: np.ndarray = None  # (U+1, V+1, 2)

    def __post_init__(self):
        if self.U < 1 or self.V < 1:
            raise ContractViolation("U and V must be >= 1")
        if self.offsets is None:
            self.offsets = np.zeros((self.U + 1, self.V + 1, 2))
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(self.U + 1, self.V + 1, 2)
        if not np.all(np.isfinite(self.offsets)):
            raise ContractViolation("control offsets must be finite")

    @property
    def source(self) -> np.ndarray:
        return lattice(self.U + 1, self.V + 1, self.frame_w, self.frame_h)

    @property
    def targets(self) -> np.ndarray:
        return self.source + self.offsets


@dataclass
class TpsSolution:
    kernel_weights: np.ndarray  # (n, 2)
    affine: np.ndarray  # (3, 2): rows for 1, x, y
    source: np.ndarray  # (n, 2)
    grid_shape: tuple = field(default=None)

    def __call__(self, pts) -> np.ndarray:
        """Mapped positions of ``pts`` (..., 2)."""
        pts = np.asarray(pts, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        k = tps_kernel(_sqdist(flat, self.source))
        out = k @ self.kernel_weights + self.affine[0] + flat @ self.affine[1:]
        return out.reshape(pts.shape)


@dataclass
class Meshgrid:
    rows: int
    cols: int
    coords: np.ndarray  # (rows, cols, 2)

    @classmethod
    def full(cls, frame_w: int, frame_h: int, origin=(0.0, 0.0)) -> "Meshgrid":
        return cls(frame_h, frame_w, lattice(frame_h, frame_w, frame_w, frame_h, origin))


def tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r^2, with U(0) = 0; takes squared distances."""
    r2 = np.asarray(r2, dtype=np.float64)
    # r2 == 0 gives 0 * log(tiny) == 0 without a branch
    return r2 * np.log(np.maximum(r2, 1e-300))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    return dx * dx + dy * dy


def _system(source: np.ndarray) -> np.ndarray:
    n = len(source)
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = tps_kernel(_sqdist(source, source))
    L[:n, n] = 1.0
    L[:n, n + 1:] = source
    L[n, :n] = 1.0
    L[n + 1:, :n] = source.T
    return L


def _solve_matrix(source: np.ndarray) -> np.ndarray:
    """inv(L)[:, :n]: maps control targets (n, 2) to [weights; affine]."""
    n = len(source)
    d2 = _sqdist(source, source)
    if np.any(d2[~np.eye(n, dtype=bool)] == 0):
        raise SingularSystemError("coincident TPS control points")
    L = _system(source)
    rhs = np.zeros((n + 3, n))
    rhs[:n] = np.eye(n)
    try:
        return np.linalg.solve(L, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"singular TPS system: {exc}") from exc


def tps_fit(grid: ControlGrid) -> TpsSolution:
    """Exact interpolating TPS taking each source point to source + offset."""
    src = grid.source.reshape(-1, 2)
    coef = _solve_matrix(src) @ grid.targets.reshape(-1, 2)
    n = len(src)
    return TpsSolution(coef[:n], coef[n:], src, (grid.U + 1, grid.V + 1))


def _kernel_matrix(points: np.ndarray, source: np.ndarray, log=None) -> np.ndarray:
    """Full (N, n) kernel matrix, built one control point at a time."""
    n = len(source)
    k = np.empty((len(points), n), order="F")
    _note(log, "kernel_matrix", k)
    px, py = points[:, 0], points[:, 1]
    dx = np.empty(len(points))
    dy = np.empty(len(points))
    for j in range(n):
        np.subtract(px, source[j, 0], out=dx)
        np.subtract(py, source[j, 1], out=dy)
        dx *= dx
        dy *= dy
        dx += dy
        k[:, j] = tps_kernel(dx)
    return k


def tps_eval_flow(sol: TpsSolution, mesh: Meshgrid, threads: int = 1, log=None) -> FlowField:
    """Vanilla evaluation: flow(m) = TPS(m) - m at every mesh coordinate."""
    pts = mesh.coords.reshape(-1, 2)
    k = _kernel_matrix(pts, sol.source, log)

    def block(s, e):
        return (k[s:e] @ sol.kernel_weights + sol.affine[0] + pts[s:e] @ sol.affine[1:]) - pts[s:e]

    mapped = np.concatenate(run_blocks(block, len(pts), threads), axis=0)
    mapped = mapped.reshape(mesh.rows, mesh.cols, 2)
    return FlowField(mapped[..., 0], mapped[..., 1])


# ------------------------------------------------------------------- B-splines

def _basis(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    powers = np.stack([np.ones_like(t), t, t * t, t * t * t], axis=-1)
    return powers @ BSPLINE_MATRIX.T


def bspline_basis(t) -> np.ndarray:
    """Cubic B-spline weights [N0, N1, N2, N3] at local parameter t in [0, 1)."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr >= 1)) or not np.all(np.isfinite(t_arr)):
        raise ContractViolation("local parameter must lie in [0, 1)")
    return _basis(t_arr)


def compress_mesh(frame_w: int, frame_h: int, U: int, V: int, origin=(0.0, 0.0)) -> Meshgrid:
    """Corner-aligned coarse mesh of 2(U+1) x 2(V+1) points."""
    if U < 1 or V < 1:
        raise ContractViolation("U and V must be >= 1")
    rows, cols = 2 * (U + 1), 2 * (V + 1)
    return Meshgrid(rows, cols, lattice(rows, cols, frame_w, frame_h, origin))


def local_parameters(size: int, knots: int):
    """Cell index and local parameter for each of ``size`` pixels on ``knots`` knots.

    Pixels on the last knot belong to the previous cell with t = 1.
    """
    g = np.arange(size, dtype=np.float64) * (knots - 1) / max(size - 1, 1)
    cell = np.minimum(np.floor(g).astype(np.intp), knots - 2)
    return cell, g - cell


def _padding(knots: int) -> np.ndarray:
    """(knots + 2, knots) linear-extrapolation padding operator."""
    e = np.zeros((knots + 2, knots))
    e[1:-1] = np.eye(knots)
    e[0, 0], e[0, 1] = 2.0, -1.0
    e[-1, -1], e[-1, -2] = 2.0, -1.0
    return e


def blend_matrix(size: int, knots: int) -> np.ndarray:
    """(size, knots) operator restoring ``size`` samples from ``knots`` lattice values."""
    cell, t = local_parameters(size, knots)
    w = _basis(t)
    b = np.zeros((size, knots + 2))
    rows = np.arange(size)
    for a in range(4):
        # padded index of lattice entry cell + a - 1 is cell + a
        b[rows, cell + a] += w[:, a]
    return b @ _padding(knots)


def ffd_upsample(sparse_flow: FlowField, frame_w: int, frame_h: int, threads: int = 1, log=None) -> FlowField:
    """Restore a dense flow from a lattice flow by cubic B-spline blending.

    Each output pixel combines its 4x4 lattice neighbourhood; lattice
    borders are padded by linear extrapolation, so constant and linear
    fields are reproduced exactly.
    """
    rows, cols = sparse_flow.shape
    if rows < 4 or cols < 4:
        raise ContractViolation(f"lattice must be at least 4x4, got {rows}x{cols}")
    by = blend_matrix(frame_h, rows)
    bx = blend_matrix(frame_w, cols)
    out = []
    for comp in (sparse_flow.dx, sparse_flow.dy):
        tmp = comp @ bx.T  # (rows, frame_w)
        _note(log, "row_blend", tmp)
        parts = run_blocks(lambda s, e: by[s:e] @ tmp, frame_h, threads, block=max(1, ROW_BLOCK // 16))
        out.append(np.concatenate(parts, axis=0))
    return FlowField(out[0], out[1])


def ffd_tps_eval(sol: TpsSolution, frame_w: int, frame_h: int, threads: int = 1, log=None,
                 origin=(0.0, 0.0)) -> FlowField:
    """TPS flow on the compressed mesh, restored to full resolution by FFD."""
    rows, cols = sol.grid_shape
    mesh = compress_mesh(frame_w, frame_h, rows - 1, cols - 1, origin)
    sparse = tps_eval_flow(sol, mesh, log=log)
    return ffd_upsample(sparse, frame_w, frame_h, threads=threads, log=log)


def vanilla_tps_eval(sol: TpsSolution, frame_w: int, frame_h: int, threads: int = 1, log=None,
                     origin=(0.0, 0.0)) -> FlowField:
    return tps_eval_flow(sol, Meshgrid.full(frame_w, frame_h, origin), threads=threads, log=log)


def evaluate(sol: TpsSolution, frame_w: int, frame_h: int, backend: str = "ffd", **kw) -> FlowField:
    if backend == "ffd":
        return ffd_tps_eval(sol, frame_w, frame_h, **kw)
    if backend == "vanilla":
        return vanilla_tps_eval(sol, frame_w, frame_h, **kw)
    raise ContractViolation(f"unknown warp backend {backend!r}")


class TpsWarpOperator:
    """Linear map from control-point targets to dense mapped positions.

    For a fixed source lattice and output frame, ``positions(targets)``
    returns TPS(p) for every output pixel p (shape (H, W, 2)) and
    ``adjoint(g)`` pulls a per-pixel gradient back onto the targets. Both
    backends share this interface; ``origin`` offsets the output frame in
    the lattice's coordinate system.
    """

    def __init__(self, U: int, V: int, frame_w: int, frame_h: int, out_w: int = None,
                 out_h: int = None, backend: str = "ffd", origin=(0.0, 0.0)):
        self.out_w = out_w or frame_w
        self.out_h = out_h or frame_h
        self.backend = backend
        self.origin = np.asarray(origin, dtype=np.float64)
        self.source = lattice(U + 1, V + 1, frame_w, frame_h).reshape(-1, 2)
        solve = _solve_matrix(self.source)
        n = len(self.source)

        def rows_for(pts):
            k = tps_kernel(_sqdist(pts, self.source))
            return k @ solve[:n] + solve[n] + pts[:, :1] * solve[n + 1] + pts[:, 1:] * solve[n + 2]

        if backend == "vanilla":
            mesh = Meshgrid.full(self.out_w, self.out_h, origin)
            self._pts = mesh.coords.reshape(-1, 2)
            self._a = rows_for(self._pts)
        elif backend == "ffd":
            mesh = compress_mesh(self.out_w, self.out_h, U, V, origin)
            self._shape = (mesh.rows, mesh.cols)
            self._pts = mesh.coords.reshape(-1, 2)
            self._a = rows_for(self._pts)
            self._by = blend_matrix(self.out_h, mesh.rows)
            self._bx = blend_matrix(self.out_w, mesh.cols)
            ys, xs = np.mgrid[0:self.out_h, 0:self.out_w].astype(np.float64)
            self._grid = np.stack([xs + origin[0], ys + origin[1]], axis=-1)
        else:
            raise ContractViolation(f"unknown warp backend {backend!r}")

    def positions(self, targets: np.ndarray) -> np.ndarray:
        t = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
        coarse = self._a @ t
        if self.backend == "vanilla":
            return coarse.reshape(self.out_h, self.out_w, 2)
        flow = (coarse - self._pts).reshape(*self._shape, 2)
        dense = np.stack([self._by @ flow[..., c] @ self._bx.T for c in range(2)], axis=-1)
        return dense + self._grid

    def flow(self, targets: np.ndarray) -> FlowField:
        """Backward flow on the output frame: pixel q samples at TPS(q + origin)."""
        pos = self.positions(targets)
        ys, xs = np.mgrid[0:self.out_h, 0:self.out_w].astype(np.float64)
        return FlowField(pos[..., 0] - xs, pos[..., 1] - ys)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if self.backend == "vanilla":
            return self._a.T @ g.reshape(-1, 2)
        coarse = np.stack([self._by.T @ g[..., c] @ self._bx for c in range(2)], axis=-1)
        return self._a.T @ coarse.reshape(-1, 2)


def smooth_offsets(rng, rows: int, cols: int, magnitude: float, max_freq: int = 3) -> np.ndarray:
    """Random low-frequency (rows, cols, 2) field whose largest vector has norm ``magnitude``."""
    v, u = np.meshgrid(np.linspace(0, 1, rows), np.linspace(0, 1, cols), indexing="ij")
    out = np.zeros((rows, cols, 2))
    for comp in range(2):
        for kx in range(max_freq + 1):
            for ky in range(max_freq + 1):
                amp = rng.standard_normal() / (1 + kx * kx + ky * ky)
                phase = rng.uniform(0, 2 * np.pi)
                out[..., comp] += amp * np.cos(np.pi * (kx * u + ky * v) + phase)
    peak = np.linalg.norm(out, axis=-1).max()
    return out * (magnitude / peak) if peak > 0 and magnitude > 0 else np.zeros_like(out)


# ------------------------------------------------------------------ benchmark

BENCH_HEADER = "resolution,method,median_ms,max_intermediate_bytes,mean_flow_dev_px"


@dataclass
class BenchRow:
    resolution: str
    method: str
    median_ms: float
    max_intermediate_bytes: int
    mean_flow_dev_px: float

    def csv(self) -> str:
        return (f"{self.resolution},{self.method},{self.median_ms:.3f},"
                f"{self.max_intermediate_bytes},{self.mean_flow_dev_px:.6f}")


def parse_resolutions(text: str):
    """``"566x800,1329x2000"`` -> [(566, 800), (1329, 2000)] as (height, width)."""
    out = []
    for item in text.split(","):
        try:
            h, w = (int(v) for v in item.lower().strip().split("x"))
        except ValueError as exc:
            raise ContractViolation(f"bad resolution {item!r}; expected HxW") from exc
        if h <= 0 or w <= 0:
            raise ContractViolation(f"resolution must be positive, got {item!r}")
        out.append((h, w))
    return out


def bench_tps(resolutions, U: int = 12, V: int = 12, repeats: int = 3, threads=(1,),
              seed: int = 0, magnitude: float = 0.05):
    """Time vanilla and FFD evaluation of one smooth random TPS per resolution.

    ``threads`` lists the worker counts to run; counts above 1 add ``-mt``
    rows. A failed allocation is reported in its row (NaN timing) instead of
    aborting the run. Returns a list of BenchRow.
    """
    import time

    rows = []
    for h, w in resolutions:
        if h <= 0 or w <= 0:
            raise ContractViolation("resolutions must be positive")
        rng = np.random.default_rng(seed)
        off = smooth_offsets(rng, U + 1, V + 1, magnitude * np.hypot(w, h))
        sol = tps_fit(ControlGrid(U, V, w, h, off))
        ref_flow = None
        for t in threads:
            for method in ("vanilla", "ffd"):
                name = method if t <= 1 else f"{method}-mt"
                log = BufferLog()
                times = []
                flow = None
                try:
                    for _ in range(max(1, repeats)):
                        log = BufferLog()
                        t0 = time.perf_counter()
                        flow = evaluate(sol, w, h, backend=method, threads=t, log=log)
                        times.append((time.perf_counter() - t0) * 1e3)
                except MemoryError:
                    planned = h * w * (U + 1) * (V + 1) * 8 if method == "vanilla" else log.max_bytes
                    rows.append(BenchRow(f"{h}x{w}", name, float("nan"), planned, float("nan")))
                    continue
                if method == "vanilla" and ref_flow is None:
                    ref_flow = flow
                if ref_flow is None:
                    dev = float("nan")
                elif flow is ref_flow:
                    dev = 0.0
                else:
                    dev = float(np.hypot(flow.dx - ref_flow.dx, flow.dy - ref_flow.dy).mean())
                rows.append(BenchRow(f"{h}x{w}", name, float(np.median(times)), log.max_bytes, dev))
                del flow
        del ref_flow
    return rows


def bench_csv(rows) -> str:
    return "\n".join([BENCH_HEADER] + [r.csv() for r in rows]) + "\n"
