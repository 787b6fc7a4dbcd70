"""Deformable transient field: per-view embeddings drive an MLP that offsets a
shared seed set, and a colour MLP that tints it per view."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .splat import Camera, Projection, TransientSeeds, covariance3d, normalize_quat, project

FLOAT_BYTES = 4
# mu(3) + log_scale(3) + rot(4) + opacity(1)
GAUSSIAN_FLOATS = 11
# seeds additionally carry a 3-float colour bias
SEED_FLOATS = GAUSSIAN_FLOATS + 3


def positional_encode(x: Tensor, n_freqs: int) -> Tensor:
    """[sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)] per coordinate.

    Works on (..., D) inputs; the output has 2 * L * D trailing features.
    """
    if n_freqs < 0:
        raise ValueError("frequency count must be >= 0")
    lead = x.shape[:-1]
    if n_freqs == 0:
        return Tensor(np.zeros(lead + (0,), dtype=x.dtype))
    freqs = Tensor((np.pi * 2.0 ** np.arange(n_freqs)).astype(x.dtype))
    scaled = x.reshape(lead + (x.shape[-1], 1)) * freqs
    enc = dc.stack([dc.sin(scaled), dc.cos(scaled)], axis=-1)
    return enc.reshape(lead + (x.shape[-1] * n_freqs * 2,))


class MLP:
    """ReLU multilayer perceptron with optional zero-initialised output layer."""

    def __init__(self, sizes, rng, dtype=np.float32, zero_last=False, name="mlp"):
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
            self.weights.append(Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.w{i}"))
            self.biases.append(Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True, name=f"{name}.b{i}"))

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < n - 1:
                x = dc.relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


class DeformNetworks:
    """The deformation MLP (position offset, log-scale offset, rotation offset)
    and the colour MLP, both conditioned on a per-view embedding."""

    def __init__(self, rng, embed_dim=16, mu_freqs=6, t_freqs=4, hidden=64, depth=4,
                 color_hidden=64, dtype=np.float32, color_from_position=True):
        self.embed_dim, self.mu_freqs, self.t_freqs = embed_dim, mu_freqs, t_freqs
        self.color_from_position = color_from_position
        t_dim = embed_dim * 2 * t_freqs
        in_dim = 3 * 2 * mu_freqs + t_dim
        self.f_d = MLP([in_dim] + [hidden] * depth + [10], rng, dtype, zero_last=True, name="f_d")
        c_dim = in_dim if color_from_position else t_dim
        self.f_c = MLP([c_dim, color_hidden, color_hidden, 3], rng, dtype, zero_last=True, name="f_c")

    def parameters(self) -> list[Tensor]:
        return self.f_d.parameters() + self.f_c.parameters()

    def n_params(self) -> int:
        return self.f_d.n_params() + self.f_c.n_params()


def deform(seeds: TransientSeeds, nets: DeformNetworks, embedding: Tensor):
    """Per-view transient Gaussians from the shared seeds.

    Returns (mu, log_scale, rot, color, opacity) tensors.  Seed positions enter
    the deformation network through a stop-gradient, so they only receive
    gradient through the additive residual.
    """
    n = len(seeds)
    enc_mu = positional_encode(dc.stop_gradient(seeds.mu), nets.mu_freqs)
    enc_t = positional_encode(embedding.reshape(1, -1), nets.t_freqs)
    feats = dc.concat([enc_mu, dc.broadcast_to(enc_t, (n, enc_t.shape[1]))], axis=1)
    out = nets.f_d(feats)
    mu = seeds.mu + out[:, 0:3]
    log_scale = seeds.log_scale + out[:, 3:6]
    rot = normalize_quat(seeds.rot + out[:, 6:10])
    base = nets.f_c(feats if nets.color_from_position else enc_t)
    color = dc.sigmoid(base + seeds.color_bias)
    return mu, log_scale, rot, color, dc.sigmoid(seeds.opacity_logit)


def project_transient(seeds: TransientSeeds, nets: DeformNetworks, embedding: Tensor, cam: Camera) -> Projection:
    mu, log_scale, rot, color, opacity = deform(seeds, nets, embedding)
    return project(mu, covariance3d(log_scale, rot), color, opacity, cam)


def transient_memory_bytes(n_seeds: int, n_views: int, embed_dim: int, network_params: int = 0,
                           seed_floats: int = SEED_FLOATS) -> int:
    """Bytes held by the deformable transient field at 32-bit precision."""
    return FLOAT_BYTES * (n_seeds * seed_floats + n_views * embed_dim + network_params)


def per_view_baseline_bytes(n_seeds: int, n_views: int, gaussian_floats: int = GAUSSIAN_FLOATS) -> int:
    """Bytes for a transient field that stores its own Gaussian set per view."""
    return FLOAT_BYTES * n_views * n_seeds * gaussian_floats
