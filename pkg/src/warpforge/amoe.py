"""Adaptive mixture-of-experts fusion of semantic and geometric feature maps.

Feature maps are arrays of shape (c, h, w). A linear router reads the
global-average-pooled summary of ``F_s``, ``F_g`` and their channel
concatenation and produces three softmax weights; three residual experts
transform ``F_s``, ``F_g`` and ``F_s (+) F_g`` and the output is their
weighted sum. Each expert is ``E(x) = skip(x) + tanh(W x + b)`` applied per
pixel, where ``skip`` is the identity for the unimodal experts and the mean
of the two halves for the heterogeneous one.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, SchemaError

EXPERTS = ("s", "g", "h")
BLOB_MAGIC = b"AMOE"
BLOB_VERSION = 1


@dataclass
class RouterParams:
    weight: np.ndarray  # (3, 4c)
    bias: np.ndarray  # (3,)

    @classmethod
    def zeros(cls, channels: int) -> "RouterParams":
        return cls(np.zeros((3, 4 * channels)), np.zeros(3))


@dataclass
class Expert:
    weight: np.ndarray  # (c, c_in)
    bias: np.ndarray  # (c,)


@dataclass
class ExpertParams:
    s: Expert
    g: Expert
    h: Expert

    @classmethod
    def identity(cls, channels: int) -> "ExpertParams":
        c = channels
        return cls(Expert(np.zeros((c, c)), np.zeros(c)),
                   Expert(np.zeros((c, c)), np.zeros(c)),
                   Expert(np.zeros((c, 2 * c)), np.zeros(c)))

    @classmethod
    def random(cls, channels: int, rng, scale: float = 0.5) -> "ExpertParams":
        c = channels
        return cls(Expert(rng.normal(0, scale, (c, c)), rng.normal(0, scale, c)),
                   Expert(rng.normal(0, scale, (c, c)), rng.normal(0, scale, c)),
                   Expert(rng.normal(0, scale, (c, 2 * c)), rng.normal(0, scale, c)))

    def __getitem__(self, name: str) -> Expert:
        return getattr(self, name)


@dataclass
class FusionWeights:
    w_s: float
    w_g: float
    w_h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w_s, self.w_g, self.w_h])

    @classmethod
    def uniform(cls) -> "FusionWeights":
        return cls(1 / 3, 1 / 3, 1 / 3)


@dataclass
class PerturbConfig:
    p_drop: float = 0.25
    p_noise: float = 0.25
    sigma: float | None = None  # None: 0.1 x RMS of the map being perturbed
    seed: int = 0

    def __post_init__(self):
        for name in ("p_drop", "p_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1], got {p}")
        if self.sigma is not None and self.sigma < 0:
            raise ContractViolation("sigma must be non-negative")


def _check_pair(f_s, f_g):
    f_s = np.asarray(f_s, dtype=np.float64)
    f_g = np.asarray(f_g, dtype=np.float64)
    if f_s.ndim != 3 or f_s.shape != f_g.shape:
        raise ContractViolation(f"feature maps must share a (c, h, w) shape: {f_s.shape} vs {f_g.shape}")
    return f_s, f_g


def router_input(f_s, f_g) -> np.ndarray:
    f_s, f_g = _check_pair(f_s, f_g)
    ps = f_s.mean(axis=(1, 2))
    pg = f_g.mean(axis=(1, 2))
    return np.concatenate([ps, pg, ps, pg])


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def route(router: RouterParams, f_s, f_g) -> FusionWeights:
    z = router_input(f_s, f_g)
    if router.weight.shape != (3, len(z)):
        raise ContractViolation(f"router expects {router.weight.shape[1]} inputs, got {len(z)}")
    return FusionWeights(*softmax(router.weight @ z + router.bias))


def _skip(name: str, x: np.ndarray) -> np.ndarray:
    if name == "h":
        c = x.shape[0] // 2
        return 0.5 * (x[:c] + x[c:])
    return x


def apply_expert(name: str, expert: Expert, x: np.ndarray) -> np.ndarray:
    pre = np.einsum("oi,ihw->ohw", expert.weight, x) + expert.bias[:, None, None]
    return _skip(name, x) + np.tanh(pre)


def expert_inputs(f_s, f_g):
    return {"s": f_s, "g": f_g, "h": np.concatenate([f_s, f_g], axis=0)}


def fuse(experts: ExpertParams, w: FusionWeights, f_s, f_g) -> np.ndarray:
    f_s, f_g = _check_pair(f_s, f_g)
    ins = expert_inputs(f_s, f_g)
    weights = dict(zip(EXPERTS, w.as_array()))
    out = np.zeros_like(f_s)
    for name in EXPERTS:
        out = out + weights[name] * apply_expert(name, experts[name], ins[name])
    return out


def _xlogx(w: np.ndarray) -> np.ndarray:
    return np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)


def reg_loss(w: FusionWeights, lambda_e: float = 0.1) -> float:
    """Variance of the expert weights plus lambda_e times their negative entropy."""
    v = w.as_array()
    return float(np.sum((v - v.mean()) ** 2) + lambda_e * np.sum(_xlogx(v)))


def reg_loss_grad(w: FusionWeights, lambda_e: float = 0.1) -> np.ndarray:
    """d reg_loss / d w; the entropy derivative at w_r = 0 is taken as 0."""
    v = w.as_array()
    # variance term: sum (v - mean)^2 has gradient 2 (v - mean) since the
    # deviations sum to zero
    dvar = 2 * (v - v.mean())
    dent = np.where(v > 0, np.log(np.where(v > 0, v, 1.0)) + 1.0, 0.0)
    return dvar + lambda_e * dent


def perturb(maps: dict, cfg: PerturbConfig, rng=None):
    """Independently drop, noise or keep each expert branch.

    One uniform draw per branch selects drop (u < p_drop), noise
    (p_drop <= u < p_drop + p_noise) or keep, so both actions keep their
    marginal probabilities. Returns ``(perturbed maps, events)``.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    out, events = {}, {}
    for name in sorted(maps):
        m = np.asarray(maps[name], dtype=np.float64)
        u = rng.random()
        if u < cfg.p_drop:
            out[name], events[name] = np.zeros_like(m), "drop"
        elif u < cfg.p_drop + cfg.p_noise:
            sigma = cfg.sigma if cfg.sigma is not None else 0.1 * float(np.sqrt(np.mean(m * m)))
            out[name], events[name] = m + rng.normal(0.0, 1.0, m.shape) * sigma, "noise"
        else:
            out[name], events[name] = m.copy(), "keep"
    return out, events


@dataclass
class FusionGrads:
    router_weight: np.ndarray
    router_bias: np.ndarray
    experts: dict = field(default_factory=dict)  # name -> (d weight, d bias)
    f_s: np.ndarray = None
    f_g: np.ndarray = None
    weights: np.ndarray = None  # d loss / d (w_s, w_g, w_h)


def fusion_grads(experts: ExpertParams, router: RouterParams, f_s, f_g, upstream_grad,
                 reg_scale: float = 0.0, lambda_e: float = 0.1) -> FusionGrads:
    """Gradients of ``<upstream, fuse(route(...))> + reg_scale * reg_loss(route(...))``."""
    f_s, f_g = _check_pair(f_s, f_g)
    g_out = np.asarray(upstream_grad, dtype=np.float64)
    if g_out.shape != f_s.shape:
        raise ContractViolation("upstream gradient must match the fused map shape")
    c, h, w_ = f_s.shape
    z = router_input(f_s, f_g)
    wts = softmax(router.weight @ z + router.bias)
    ins = expert_inputs(f_s, f_g)

    d_in = {}
    d_experts = {}
    d_w = np.zeros(3)
    for k, name in enumerate(EXPERTS):
        ex = experts[name]
        x = ins[name]
        pre = np.einsum("oi,ihw->ohw", ex.weight, x) + ex.bias[:, None, None]
        act = np.tanh(pre)
        out = _skip(name, x) + act
        d_w[k] = np.sum(g_out * out)
        g = wts[k] * g_out
        g_pre = g * (1 - act * act)
        d_experts[name] = (np.einsum("ohw,ihw->oi", g_pre, x), g_pre.sum(axis=(1, 2)))
        dx = np.einsum("oi,ohw->ihw", ex.weight, g_pre)
        if name == "h":
            dx[:c] += 0.5 * g
            dx[c:] += 0.5 * g
        else:
            dx = dx + g
        d_in[name] = dx

    if reg_scale:
        d_w = d_w + reg_scale * reg_loss_grad(FusionWeights(*wts), lambda_e)
    # softmax Jacobian: d w_i / d z_j = w_i (delta_ij - w_j)
    d_logits = wts * (d_w - np.dot(wts, d_w))
    d_router_w = np.outer(d_logits, z)
    d_z = router.weight.T @ d_logits
    # z = [mean F_s, mean F_g, mean F_s, mean F_g]
    d_ps = d_z[:c] + d_z[2 * c:3 * c]
    d_pg = d_z[c:2 * c] + d_z[3 * c:]
    d_fs = d_in["s"] + d_in["h"][:c] + d_ps[:, None, None] / (h * w_)
    d_fg = d_in["g"] + d_in["h"][c:] + d_pg[:, None, None] / (h * w_)
    return FusionGrads(d_router_w, d_logits.copy(), d_experts, d_fs, d_fg, d_w)


# ------------------------------------------------------------ serialization

def _flatten(router: RouterParams, experts: ExpertParams) -> np.ndarray:
    parts = [router.weight.ravel(), router.bias.ravel()]
    for name in EXPERTS:
        parts += [experts[name].weight.ravel(), experts[name].bias.ravel()]
    return np.concatenate(parts)


def param_count(channels: int) -> int:
    c = channels
    return 3 * 4 * c + 3 + 2 * (c * c + c) + (2 * c * c + c)


def save_blob(path, router: RouterParams, experts: ExpertParams) -> None:
    c = experts.s.weight.shape[0]
    params = _flatten(router, experts)
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(struct.pack("<II", BLOB_VERSION, c))
        f.write(params.astype("<f8").tobytes())


def load_blob(path):
    raw = open(path, "rb").read()
    if raw[:4] != BLOB_MAGIC:
        raise SchemaError(f"{path}: bad magic {raw[:4]!r}")
    version, c = struct.unpack("<II", raw[4:12])
    if version != BLOB_VERSION:
        raise SchemaError(f"{path}: unsupported version {version}")
    n = param_count(c)
    if len(raw) != 12 + 8 * n:
        raise SchemaError(f"{path}: expected {n} parameters for c={c}")
    p = np.frombuffer(raw, dtype="<f8", offset=12).astype(np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = p[pos:pos + size].reshape(shape)
        pos += size
        return out

    router = RouterParams(take((3, 4 * c)), take((3,)))
    ex = {}
    for name, cin in (("s", c), ("g", c), ("h", 2 * c)):
        ex[name] = Expert(take((c, cin)), take((c,)))
    return router, ExpertParams(**ex)
