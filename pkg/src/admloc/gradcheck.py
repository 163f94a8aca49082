"""Finite-difference verification of the full model's analytic gradients."""
from __future__ import annotations

import numpy as np

from .model import ModelConfig, forward, init_params, scaled_laplacian
from .skeleton import SkeletonGraph, WindowBatch
from .tensor import Tensor
from .train import mse_loss


def small_line_graph(num_joints: int) -> SkeletonGraph:
    a = np.zeros((num_joints, num_joints))
    edges = [(i, i + 1) for i in range(num_joints - 1)]
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    return SkeletonGraph(num_joints, a, tuple(edges))


def full_model_gradcheck(config: ModelConfig | None = None, batch_size: int = 2,
                         seed: int = 0, h: float = 1e-5,
                         use_attention: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients
    of the denoising MSE loss, over every model parameter."""
    if config is None:
        config = ModelConfig(num_blocks=2, embed_dim=4, cheb_k=2,
                             window_size=3, num_joints=4, in_channels=2,
                             seed=seed)
    graph = small_line_graph(config.num_joints)
    scaled_lap = scaled_laplacian(graph)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    shape = (batch_size, config.window_size, config.num_joints,
             config.in_channels)
    clean = rng.normal(0.0, 1.0, size=shape)
    noisy = clean + rng.normal(0.0, 0.1, size=shape)
    batch = WindowBatch(noisy, [("gc", i) for i in range(batch_size)],
                        config.window_size)
    params = init_params(config)
    target = Tensor(clean)

    def loss_value() -> float:
        _, recon = forward(params, batch, graph, use_attention=use_attention,
                           scaled_lap=scaled_lap)
        return mse_loss(recon, target).item()

    params.zero_grads()
    _, recon = forward(params, batch, graph, use_attention=use_attention,
                       scaled_lap=scaled_lap)
    mse_loss(recon, target).backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.tensors.items()}

    max_rel = 0.0
    for name, p in params.tensors.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            rel = abs(ga[i] - fd) / (abs(ga[i]) + abs(fd) + 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
