"""Neural Codebook: a per-scene residual network that refines an upsampled grid.

Per occupied voxel the network reads the restored density and SH features,
is modulated by a Fourier embedding of the voxel position through adaptive
layer norm, and predicts corrections that are added back to its inputs.
A shared trunk feeds a density branch and a deeper, wider color branch.

Gradients are written out by hand (the network is small and fixed), and
training runs Adam with decoupled weight decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _backend, _kernels_py
from .errors import DimensionMismatch, InvalidConfig, NonFiniteInput, NonFiniteLoss
from .grid import Precision, VoxelGrid

LEAKY_SLOPE = 0.01
LN_EPS = 1e-5
APPLY_CHUNK = 65536


@dataclass
class PositionalEncoder:
    """Random Fourier features over coordinates normalized to [0, 1]^3."""

    basis: np.ndarray

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=np.float32)
        if basis.ndim != 2 or basis.shape[1] != 3 or not np.all(np.isfinite(basis)):
            raise InvalidConfig("encoder basis must be a finite (L, 3) matrix")
        self.basis = basis

    @classmethod
    def sample(cls, l_count: int, rng: np.random.Generator, bandwidth: float = 1.0):
        return cls(rng.standard_normal((l_count, 3)) * bandwidth)

    @property
    def l_count(self) -> int:
        return self.basis.shape[0]

    @property
    def out_dim(self) -> int:
        return 2 * self.l_count

    def __call__(self, coords, shape, dtype=np.float32) -> np.ndarray:
        v = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        v = v / (np.asarray(shape, dtype=np.float64) - 1.0)
        phase = 2.0 * np.pi * (v @ self.basis.astype(np.float64).T)
        out = np.empty((v.shape[0], self.out_dim), dtype=np.float64)
        out[:, 0::2] = np.cos(phase)
        out[:, 1::2] = np.sin(phase)
        return out.astype(dtype)


def encode_position(enc: PositionalEncoder, v, shape) -> np.ndarray:
    return enc(np.asarray(v).reshape(1, 3), shape, np.float64)[0]


def leaky_relu(z, slope=LEAKY_SLOPE):
    return np.where(z > 0, z, slope * z)


def _elementwise(dtype):
    # the compiled kernels are float32 only; float64 (gradient checks) uses numpy
    return _backend.net_kernels if dtype == np.float32 else _kernels_py


def adaln_forward(x, P, W, b, Wm, bm, eps=LN_EPS, slope=LEAKY_SLOPE, cache=None):
    """FC -> standardize across channels -> per-channel scale/shift from P -> LeakyReLU.

    Works on a single vector or a batch (rows).  ``cache`` (a dict) receives the
    intermediates needed by :func:`adaln_backward`.
    """
    x = np.atleast_2d(x)
    P = np.atleast_2d(P)
    if x.shape[1] != W.shape[0] or P.shape[1] != Wm.shape[0] or Wm.shape[1] != 2 * W.shape[1]:
        raise DimensionMismatch("AdaLN layer shapes are inconsistent")
    u = x @ W
    y = P @ Wm
    dt = u.dtype
    out = np.empty_like(u)
    nrm = np.empty_like(u)
    inv = np.empty(u.shape[0], dtype=dt)
    _elementwise(dt).adaln_fwd(u, y, np.ascontiguousarray(b, dtype=dt), np.ascontiguousarray(bm, dtype=dt),
                               float(eps), float(slope), out, nrm, inv)
    if cache is not None:
        cache.update(x=x, P=P, nrm=nrm, inv=inv, y=y, a=out)
    return out


def adaln_backward(da, cache, W, slope=LEAKY_SLOPE):
    """Returns (dx, dW, db, dWm, dbm)."""
    nrm, y = cache["nrm"], cache["y"]
    da = np.ascontiguousarray(da, dtype=nrm.dtype)
    dy = np.empty_like(y)
    du = np.empty_like(nrm)
    _elementwise(nrm.dtype).adaln_bwd(da, cache["a"], nrm, cache["inv"], y, float(slope), dy, du)
    return du @ W.T, cache["x"].T @ du, du.sum(axis=0), cache["P"].T @ dy, dy.sum(axis=0)


@dataclass
class NcbNetwork:
    encoder: PositionalEncoder
    channels: int
    trunk: Tuple[int, ...]
    density_branch: Tuple[int, ...]
    color_branch: Tuple[int, ...]
    params: Dict[str, np.ndarray]
    precision: Precision = Precision.F32
    slope: float = LEAKY_SLOPE
    eps: float = LN_EPS

    def __post_init__(self):
        self.trunk = tuple(int(w) for w in self.trunk)
        self.density_branch = tuple(int(w) for w in self.density_branch)
        self.color_branch = tuple(int(w) for w in self.color_branch)
        if len(self.color_branch) != len(self.density_branch) + 2:
            raise InvalidConfig("color branch must have exactly two more layers than the density branch")
        if min(self.color_branch) < max(self.density_branch):
            raise InvalidConfig("color branch must be at least as wide as the density branch")
        expected = self.param_shapes()
        if list(self.params) != list(expected):
            raise InvalidConfig("parameter names/order do not match the architecture")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionMismatch(f"{name}: expected {shape}, got {self.params[name].shape}")

    # -- structure -----------------------------------------------------------------

    @staticmethod
    def layer_names(trunk, density_branch, color_branch):
        names = [f"trunk.{i}" for i in range(len(trunk))]
        names += [f"density.{i}" for i in range(len(density_branch))]
        names += [f"color.{i}" for i in range(len(color_branch))]
        return names

    def param_shapes(self) -> Dict[str, tuple]:
        return _param_shapes(self.channels, self.encoder.out_dim, self.trunk,
                             self.density_branch, self.color_branch)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        return self.compute_dtype()

    def compute_dtype(self):
        dt = next(iter(self.params.values())).dtype
        return np.float32 if dt == np.float16 else dt

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator, l_count: int = 16,
               bandwidth: float = 1.0, trunk=(128, 128), density_branch=(64, 64),
               color_branch=(128, 128, 128, 128), dtype=np.float32,
               head_std: float = 0.0, mod_std: float = 0.0) -> "NcbNetwork":
        """Fresh network.  With the default zero heads it is the identity map."""
        encoder = PositionalEncoder.sample(l_count, rng, bandwidth)
        shapes = _param_shapes(channels, encoder.out_dim, trunk, density_branch, color_branch)
        params = {}
        for name, shape in shapes.items():
            if name.endswith(".Wm"):
                arr = rng.standard_normal(shape) * mod_std
            elif name.endswith(".bm"):
                width = shape[0] // 2
                arr = np.concatenate([np.ones(width), np.zeros(width)])
                if mod_std:
                    arr = arr + rng.standard_normal(shape) * mod_std
            elif name.startswith("head."):
                arr = rng.standard_normal(shape) * head_std
            else:
                fan_in = shapes[name[:-1] + "W"][0]
                bound = 1.0 / math.sqrt(fan_in)
                arr = rng.uniform(-bound, bound, shape)
            params[name] = arr.astype(dtype)
        return cls(encoder, channels, trunk, density_branch, color_branch, params)

    def astype(self, dtype) -> "NcbNetwork":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        prec = Precision.F16 if np.dtype(dtype) == np.float16 else Precision.F32
        return replace(self, params=params, precision=prec)

    def cast(self, precision: Precision) -> "NcbNetwork":
        return self.astype(Precision.parse(precision).dtype)

    def copy(self) -> "NcbNetwork":
        return replace(self, params={k: v.copy() for k, v in self.params.items()},
                       encoder=PositionalEncoder(self.encoder.basis.copy()))

    # -- evaluation -----------------------------------------------------------------

    def _layer(self, name, x, P, caches):
        p = self.params
        cache = {} if caches is not None else None
        dt = self.compute_dtype()
        out = adaln_forward(x, P, p[name + ".W"].astype(dt, copy=False), p[name + ".b"].astype(dt, copy=False),
                            p[name + ".Wm"].astype(dt, copy=False), p[name + ".bm"].astype(dt, copy=False),
                            self.eps, self.slope, cache)
        if caches is not None:
            caches[name] = cache
        return out

    def forward(self, sigma_in, color_in, P, caches=None):
        """Batched refinement.  ``sigma_in`` (N,), ``color_in`` (N, C), ``P`` (N, 2L)."""
        dt = self.compute_dtype()
        p = {k: v.astype(dt, copy=False) for k, v in self.params.items() if k.startswith("head.")}
        sigma_in = np.asarray(sigma_in, dtype=dt).reshape(-1)
        color_in = np.asarray(color_in, dtype=dt).reshape(sigma_in.shape[0], self.channels)
        P = np.asarray(P, dtype=dt)
        h = np.concatenate([sigma_in[:, None], color_in], axis=1)
        for i in range(len(self.trunk)):
            h = self._layer(f"trunk.{i}", h, P, caches)
        hd = h
        for i in range(len(self.density_branch)):
            hd = self._layer(f"density.{i}", hd, P, caches)
        hc = h
        for i in range(len(self.color_branch)):
            hc = self._layer(f"color.{i}", hc, P, caches)
        if caches is not None:
            caches["head.density"] = hd
            caches["head.color"] = hc
        sigma_out = sigma_in + (hd @ p["head.density.W"] + p["head.density.b"])[:, 0]
        color_out = color_in + hc @ p["head.color.W"] + p["head.color.b"]
        return sigma_out, color_out

    def backward(self, caches, g_sigma, g_color) -> Dict[str, np.ndarray]:
        """Parameter gradients given dL/dsigma_out (N,) and dL/dcolor_out (N, C)."""
        dt = self.compute_dtype()
        p = {k: v.astype(dt, copy=False) for k, v in self.params.items()}
        grads: Dict[str, np.ndarray] = {}
        g_sigma = g_sigma.reshape(-1, 1)
        hd, hc = caches["head.density"], caches["head.color"]
        grads["head.density.W"] = hd.T @ g_sigma
        grads["head.density.b"] = g_sigma.sum(axis=0)
        grads["head.color.W"] = hc.T @ g_color
        grads["head.color.b"] = g_color.sum(axis=0)
        dhd = g_sigma @ p["head.density.W"].T
        dhc = g_color @ p["head.color.W"].T
        for branch, d in (("density", dhd), ("color", dhc)):
            n_layers = len(self.density_branch if branch == "density" else self.color_branch)
            for i in reversed(range(n_layers)):
                d = self._layer_backward(f"{branch}.{i}", d, caches, p, grads)
            if branch == "density":
                dh = d
            else:
                dh = dh + d
        for i in reversed(range(len(self.trunk))):
            dh = self._layer_backward(f"trunk.{i}", dh, caches, p, grads)
        return {name: grads[name] for name in self.params}

    def _layer_backward(self, name, d, caches, p, grads):
        dx, dW, db, dWm, dbm = adaln_backward(d, caches[name], p[name + ".W"], self.slope)
        grads[name + ".W"], grads[name + ".b"] = dW, db
        grads[name + ".Wm"], grads[name + ".bm"] = dWm, dbm
        return dx


def _param_shapes(channels, p_dim, trunk, density_branch, color_branch):
    shapes = {}
    width = 1 + channels
    for i, w in enumerate(trunk):
        _add_layer(shapes, f"trunk.{i}", width, w, p_dim)
        width = w
    trunk_out = width
    for prefix, widths in (("density", density_branch), ("color", color_branch)):
        width = trunk_out
        for i, w in enumerate(widths):
            _add_layer(shapes, f"{prefix}.{i}", width, w, p_dim)
            width = w
    shapes["head.density.W"] = (density_branch[-1] if density_branch else trunk_out, 1)
    shapes["head.density.b"] = (1,)
    shapes["head.color.W"] = (color_branch[-1], channels)
    shapes["head.color.b"] = (channels,)
    return shapes


def _add_layer(shapes, name, fan_in, width, p_dim):
    shapes[name + ".W"] = (fan_in, width)
    shapes[name + ".b"] = (width,)
    shapes[name + ".Wm"] = (p_dim, 2 * width)
    shapes[name + ".bm"] = (2 * width,)


def l1_loss(sigma_out, color_out, sigma_tgt, color_tgt, lambda_c=1.0, lambda_sigma=1.0):
    """Mean over voxels of lambda_c * |dc|_1 + lambda_sigma * |dsigma|; returns (loss, g_sigma, g_color).

    The subgradient at an exact zero residual is 0.
    """
    n = sigma_out.shape[0]
    ds = sigma_out - sigma_tgt
    dc = color_out - color_tgt
    loss = (lambda_c * np.abs(dc).sum() + lambda_sigma * np.abs(ds).sum()) / n
    g_sigma = (lambda_sigma / n) * np.sign(ds)
    g_color = (lambda_c / n) * np.sign(dc)
    return float(loss), g_sigma.astype(sigma_out.dtype), g_color.astype(color_out.dtype)


def ncb_apply(net: NcbNetwork, sigma_in: float, color_in, v, shape) -> Tuple[float, np.ndarray]:
    color_in = np.asarray(color_in, dtype=np.float64).reshape(1, -1)
    if not (math.isfinite(float(sigma_in)) and np.all(np.isfinite(color_in))):
        raise NonFiniteInput("NCB input contains non-finite values")
    P = net.encoder(np.asarray(v).reshape(1, 3), shape, net.compute_dtype())
    s, c = net.forward(np.array([sigma_in]), color_in, P)
    return float(s[0]), c[0]


def ncb_backward(net: NcbNetwork, sigma_in, color_in, coords, shape, sigma_tgt, color_tgt,
                 lambda_c: float = 1.0, lambda_sigma: float = 1.0):
    """Loss and exact parameter gradients for one batch."""
    if np.asarray(sigma_in).size == 0:
        raise InvalidConfig("empty batch")
    dt = net.compute_dtype()
    P = net.encoder(coords, shape, dt)
    caches: dict = {}
    s_out, c_out = net.forward(sigma_in, color_in, P, caches)
    loss, g_s, g_c = l1_loss(s_out, c_out, np.asarray(sigma_tgt, dt), np.asarray(color_tgt, dt),
                             lambda_c, lambda_sigma)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss}")
    return loss, net.backward(caches, g_s, g_c)


def voxel_coords(grid: VoxelGrid) -> np.ndarray:
    """(n, 3) integer coordinates of occupied voxels in storage-slot order."""
    return np.argwhere(grid.mask.bits).astype(np.int64)


def ncb_refine_grid(net: NcbNetwork, restored: VoxelGrid) -> VoxelGrid:
    if restored.dims.c != net.channels:
        raise DimensionMismatch(f"network expects {net.channels} channels, grid has {restored.dims.c}")
    coords = voxel_coords(restored)
    n = coords.shape[0]
    sigma = np.empty(n, dtype=np.float32)
    color = np.empty((n, net.channels), dtype=np.float32)
    dt = net.compute_dtype()
    for a in range(0, n, APPLY_CHUNK):
        b = min(a + APPLY_CHUNK, n)
        P = net.encoder(coords[a:b], restored.dims.spatial, dt)
        s, c = net.forward(restored.density[a:b], restored.color[a:b], P)
        sigma[a:b] = s
        color[a:b] = c
    return VoxelGrid(restored.dims, restored.mask, sigma, color)


@dataclass
class TrainConfig:
    lr: float = 5e-3
    lr_decay: float = 0.3
    decay_every: int = 5000
    total_iters: int = 20000
    batch_voxels: int = 100000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    decoupled_weight_decay: bool = True
    lambda_c: float = 1.0
    lambda_sigma: float = 1.0
    seed: int = 0
    precision: Precision = Precision.F16
    l_count: int = 16
    bandwidth: float = 8.0
    trunk: Tuple[int, ...] = (128, 128)
    density_branch: Tuple[int, ...] = (64, 64)
    color_branch: Tuple[int, ...] = (128, 128, 128, 128)
    log_every: int = 100

    def __post_init__(self):
        self.precision = Precision.parse(self.precision)
        for name in ("lr", "lr_decay", "decay_every", "batch_voxels", "beta1", "beta2", "l_count"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.total_iters < 0 or self.weight_decay < 0:
            raise InvalidConfig("total_iters and weight_decay must be non-negative")
        if self.lambda_c < 0 or self.lambda_sigma < 0:
            raise InvalidConfig("loss weights must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidConfig("Adam betas must be in (0, 1)")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Scaled-down schedule: 2000 iterations, 8192-voxel batches, decay every 500."""
        base = dict(total_iters=2000, batch_voxels=8192, decay_every=500)
        base.update(overrides)
        return cls(**base)

    def lr_at(self, it: int) -> float:
        return self.lr * self.lr_decay ** (it // self.decay_every)


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if not c.decoupled_weight_decay and c.weight_decay:
                g = g + c.weight_decay * p
            m = self.m[k]
            v = self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            if c.decoupled_weight_decay and c.weight_decay:
                update = update + c.weight_decay * p
            p -= (lr * update).astype(p.dtype)


def holdout_split(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic (train, held-out) split of slot indices."""
    rng = np.random.default_rng([seed, 7919])
    perm = rng.permutation(n)
    n_hold = int(round(fraction * n))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def train_ncb(source: VoxelGrid, restored: VoxelGrid, cfg: TrainConfig,
              train_slots: Optional[np.ndarray] = None,
              history: Optional[List[Tuple[int, float]]] = None,
              progress=None) -> NcbNetwork:
    """Fit a network mapping ``restored`` voxels to ``source`` voxels.

    ``history`` receives ``(iteration, batch_loss)`` for the first batch, every
    ``cfg.log_every`` iterations and the last batch.  ``progress`` is an
    optional callable with the same arguments.
    """
    if source.mask != restored.mask or source.dims != restored.dims:
        raise DimensionMismatch("source and restored grids must share dims and mask")
    rng = np.random.default_rng(cfg.seed)
    net = NcbNetwork.create(source.dims.c, rng, cfg.l_count, cfg.bandwidth, cfg.trunk,
                            cfg.density_branch, cfg.color_branch, np.float32)
    coords = voxel_coords(source)
    slots = np.arange(coords.shape[0]) if train_slots is None else np.asarray(train_slots, np.int64)
    if cfg.total_iters and slots.size:
        shape = source.dims.spatial
        P_all = net.encoder(coords[slots], shape, np.float32)
        s_in = restored.density[slots].astype(np.float32)
        c_in = restored.color[slots].astype(np.float32)
        s_tgt = source.density[slots].astype(np.float32)
        c_tgt = source.color[slots].astype(np.float32)
        opt = Adam(net.params, cfg)
        batch = min(cfg.batch_voxels, slots.size)
        perm = rng.permutation(slots.size)
        pos = 0
        for it in range(cfg.total_iters):
            if pos + batch > perm.size:
                perm = rng.permutation(slots.size)
                pos = 0
            idx = perm[pos:pos + batch]
            pos += batch
            caches: dict = {}
            so, co = net.forward(s_in[idx], c_in[idx], P_all[idx], caches)
            loss, g_s, g_c = l1_loss(so, co, s_tgt[idx], c_tgt[idx], cfg.lambda_c, cfg.lambda_sigma)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at iteration {it}")
            grads = net.backward(caches, g_s, g_c)
            opt.step(net.params, grads, cfg.lr_at(it))
            if it == 0 or it == cfg.total_iters - 1 or (it + 1) % cfg.log_every == 0:
                if history is not None:
                    history.append((it, loss))
                if progress is not None:
                    progress(it, loss)
    return net.cast(cfg.precision)
