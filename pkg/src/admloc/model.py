"""Attention-based spatio-temporal graph-convolution encoder and FC head.

Each block: spatial attention over joints, temporal attention over the
window axis (applied multiplicatively on time), attention-modulated
Chebyshev graph convolution, a kernel-3 same-padded temporal convolution
shared across joints, ReLU, and a residual add through a 1x1 channel
projection. The stack output (pre-head embedding) feeds both the FC
reconstruction head and the downstream dynamics metric.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .skeleton import SkeletonGraph, WindowBatch
from .tensor import (Tensor, add_bias, block_tail, cheb_mix, depthwise_tconv,
                     lowrank_row_attention, time_mix)

CHECKPOINT_MAGIC = b"ADMLOC-CKPT"
CHECKPOINT_VERSION = 1
TCONV_TAPS = 3


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 3
    embed_dim: int = 64
    cheb_k: int = 7
    window_size: int = 7
    num_joints: int = 16
    in_channels: int = 2
    seed: int = 0
    attn_rank: int = 8

    def __post_init__(self):
        if self.num_blocks < 1 or self.embed_dim < 1 or self.cheb_k < 1:
            raise ModelError("num_blocks, embed_dim, cheb_k must be >= 1")
        if self.window_size < 3:
            raise ModelError("window_size must be >= 3 (curvature needs 3 points)")
        if self.num_joints < 2 or self.in_channels < 1:
            raise ModelError("num_joints >= 2 and in_channels >= 1 required")
        if self.attn_rank < 1:
            raise ModelError("attn_rank must be >= 1")

    def block_in_channels(self, i: int) -> int:
        return self.in_channels if i == 0 else self.embed_dim


def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init kind) for every learnable parameter."""
    specs: list[tuple[str, tuple[int, ...], str]] = []
    W, J, D, K = cfg.window_size, cfg.num_joints, cfg.embed_dim, cfg.cheb_k
    R = cfg.attn_rank
    for i in range(cfg.num_blocks):
        c_in = cfg.block_in_channels(i)
        # query factors start at zero so first-forward attention is uniform
        specs.append((f"block{i}.spatial_query", (W * c_in, R), "zeros"))
        specs.append((f"block{i}.spatial_key", (W * c_in, R), "glorot"))
        specs.append((f"block{i}.temporal_query", (J * c_in, R), "zeros"))
        specs.append((f"block{i}.temporal_key", (J * c_in, R), "glorot"))
        specs.append((f"block{i}.theta", (K, c_in, D), "glorot"))
        specs.append((f"block{i}.cheb_bias", (D,), "zeros"))
        specs.append((f"block{i}.tconv", (TCONV_TAPS, D), "glorot"))
        specs.append((f"block{i}.residual", (c_in, D), "glorot"))
    specs.append(("head.weight", (D, cfg.in_channels), "glorot"))
    specs.append(("head.bias", (cfg.in_channels,), "zeros"))
    return specs


@dataclass
class ModelParams:
    """All learnable tensors keyed by name, in a fixed documented order."""
    config: ModelConfig
    tensors: dict[str, Tensor]
    format_version: int = CHECKPOINT_VERSION

    def names(self) -> list[str]:
        return [name for name, _, _ in _param_specs(self.config)]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def init_params(config: ModelConfig) -> ModelParams:
    """Glorot-uniform weights, zero biases and zero attention scores."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    tensors: dict[str, Tensor] = {}
    for name, shape, kind in _param_specs(config):
        if kind == "zeros":
            data = np.zeros(shape)
        else:
            fan_in, fan_out = shape[-2], shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config=config, tensors=tensors)


def scaled_laplacian(graph: SkeletonGraph, tol: float = 1e-10,
                     max_iter: int = 10_000) -> np.ndarray:
    """2L/lambda_max - I for the symmetrically normalized Laplacian L.

    lambda_max comes from power iteration so the Chebyshev recurrence stays
    on [-1, 1] exactly rather than via the lambda_max ~ 2 shortcut.
    """
    a = graph.adjacency
    deg = graph.degrees()
    if (deg == 0).any():
        raise ModelError("graph has an isolated joint (zero degree)")
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(graph.num_joints) - (d_inv_sqrt[:, None] * a * d_inv_sqrt[None, :])
    lam = _power_iteration(lap, tol, max_iter)
    return 2.0 * lap / lam - np.eye(graph.num_joints)


def _power_iteration(m: np.ndarray, tol: float, max_iter: int) -> float:
    n = m.shape[0]
    v = np.ones(n) + 1e-3 * np.arange(n)  # deterministic, not an eigenvector
    v /= np.linalg.norm(v)
    lam_prev = 0.0
    for _ in range(max_iter):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        lam = float(v @ (m @ v))
        if abs(lam - lam_prev) < tol:
            return lam
        lam_prev = lam
    return lam_prev


def chebyshev_basis(scaled_lap: np.ndarray, k: int) -> list[np.ndarray]:
    """T_0..T_{k-1} of the scaled Laplacian via the standard recurrence."""
    terms = [np.eye(scaled_lap.shape[0])]
    if k > 1:
        terms.append(scaled_lap.copy())
    for _ in range(2, k):
        terms.append(2.0 * scaled_lap @ terms[-1] - terms[-2])
    return terms


def _bilinear_attention(feats: Tensor, query_w: Tensor, key_w: Tensor) -> Tensor:
    return lowrank_row_attention(feats, query_w, key_w)


def spatial_attention(x: Tensor, query_w: Tensor, key_w: Tensor) -> Tensor:
    """Row-normalized joint-to-joint attention, shape (B, J, J).

    x is joint-major (B, J, W, C). Low-rank bilinear score over per-joint
    (time x channel) features, sigmoid-squashed and softmaxed per row. A
    zero query factor gives uniform rows.
    """
    B, J, W, C = x.shape
    feats = x.reshape(B, J, W * C)
    return _bilinear_attention(feats, query_w, key_w)


def temporal_attention(x: Tensor, query_w: Tensor, key_w: Tensor) -> Tensor:
    """Row-normalized frame-to-frame attention, shape (B, W, W)."""
    B, J, W, C = x.shape
    feats = x.transpose((0, 2, 1, 3)).reshape(B, W, J * C)
    return _bilinear_attention(feats, query_w, key_w)


def cheb_conv(x: Tensor, cheb_terms: list[np.ndarray], theta: Tensor,
              attention: Tensor | None = None) -> Tensor:
    """Spectral graph convolution sum_k T_k(L) x Theta_k over the joint axis.

    With attention, each T_k is modulated element-wise by the per-batch
    spatial attention matrix before mixing.
    """
    k = theta.shape[0]
    if len(cheb_terms) != k:
        raise ModelError(f"cheb_conv: {len(cheb_terms)} basis terms vs K={k}")
    return cheb_mix(np.stack(cheb_terms), x, theta, attention=attention)


def temporal_conv(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise kernel-3 same-padded convolution over the window axis.

    Shared across joints; channel mixing is the graph convolution's job.
    """
    return depthwise_tconv(x, kernel)


def block_forward(x: Tensor, params: ModelParams, i: int,
                  cheb_terms: list[np.ndarray], use_attention: bool = True) -> Tensor:
    t = params.tensors
    h = x
    sp_att = None
    if use_attention:
        sp_att = spatial_attention(h, t[f"block{i}.spatial_query"],
                                   t[f"block{i}.spatial_key"])
        tm_att = temporal_attention(h, t[f"block{i}.temporal_query"],
                                    t[f"block{i}.temporal_key"])
        h = time_mix(tm_att, h)
    h = cheb_conv(h, cheb_terms, t[f"block{i}.theta"], attention=sp_att)
    return block_tail(h, t[f"block{i}.cheb_bias"], t[f"block{i}.tconv"],
                      x, t[f"block{i}.residual"])


def forward(params: ModelParams, batch: WindowBatch, graph: SkeletonGraph,
            use_attention: bool = True,
            scaled_lap: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Run the block stack and FC head.

    Returns (embedding (B, W, J, D), reconstruction (B, W, J, C)).
    """
    cfg = params.config
    if batch.window_size != cfg.window_size:
        raise ModelError(f"window size {batch.window_size} != config {cfg.window_size}")
    if batch.windows.shape[2] != cfg.num_joints or batch.windows.shape[3] != cfg.in_channels:
        raise ModelError(f"batch shape {batch.windows.shape} does not match "
                         f"(J={cfg.num_joints}, C={cfg.in_channels})")
    if scaled_lap is None:
        scaled_lap = scaled_laplacian(graph)
    cheb_terms = chebyshev_basis(scaled_lap, cfg.cheb_k)
    # joint-major layout internally; transposed back to (B, W, J, .) on exit
    h = Tensor(np.ascontiguousarray(batch.windows.transpose(0, 2, 1, 3)))
    for i in range(cfg.num_blocks):
        h = block_forward(h, params, i, cheb_terms, use_attention=use_attention)
    recon = add_bias(h @ params.tensors["head.weight"], params.tensors["head.bias"])
    return h.transpose((0, 2, 1, 3)), recon.transpose((0, 2, 1, 3))


# -- checkpoint persistence ---------------------------------------------------

def save_params(params: ModelParams, path) -> None:
    """Binary checkpoint: magic, version, JSON config, ordered raw tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", params.format_version))
    cfg_json = json.dumps(asdict(params.config), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    for name, shape, _ in _param_specs(params.config):
        t = params.tensors[name]
        if t.shape != shape:
            raise CheckpointError(f"{name}: shape {t.shape} != expected {shape}")
        name_b = name.encode()
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}q", *shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(buf: io.BytesIO, n: int, path, what: str) -> bytes:
    blob = buf.read(n)
    if len(blob) < n:
        raise CheckpointError(f"{path}: truncated checkpoint at {what}")
    return blob


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, path, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", _read_exact(buf, 4, path, "config length"))
    config = ModelConfig(**json.loads(_read_exact(buf, cfg_len, path, "config").decode()))
    tensors: dict[str, Tensor] = {}
    for name, shape, _ in _param_specs(config):
        (name_len,) = struct.unpack("<I", _read_exact(buf, 4, path, name))
        stored = _read_exact(buf, name_len, path, name).decode()
        if stored != name:
            raise CheckpointError(f"{path}: expected tensor {name}, found {stored}")
        (ndim,) = struct.unpack("<I", _read_exact(buf, 4, path, name))
        stored_shape = struct.unpack(f"<{ndim}q", _read_exact(buf, 8 * ndim, path, name))
        if tuple(stored_shape) != shape:
            raise CheckpointError(
                f"{path}: {name} shape {stored_shape} disagrees with config {shape}")
        n = int(np.prod(shape))
        data_b = buf.read(8 * n)
        if len(data_b) < 8 * n:
            raise CheckpointError(f"{path}: truncated tensor data for {name}")
        data = np.frombuffer(data_b, dtype="<f8").reshape(shape)
        if not np.isfinite(data).all():
            raise CheckpointError(f"{path}: non-finite values in {name}")
        tensors[name] = Tensor(data, requires_grad=True)
    if buf.read(1):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return ModelParams(config=config, tensors=tensors, format_version=version)
