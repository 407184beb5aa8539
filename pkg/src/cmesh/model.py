"""Model assembly: mesh encoder, shared mesh decoder, image encoder.

The mesh pair operates on one sample at a time (an n x 6 feature matrix
on the template topology); the image encoder is batched.  All forward
passes have matching hand-derived backward passes keyed by parameter
name, so a single optimizer can own any subset of the model.

``decode_fast`` is the low-latency inference path: float32 end to end,
preallocated workspace, and Clenshaw evaluation of each filter so the
per-level sparse work is K-1 fused kernel calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .layers import (BatchNormState, ChebLayer, Conv2DLayer, DenseLayer,
                     LayerError, batchnorm_backward, batchnorm_forward,
                     cheb_backward, cheb_forward, conv2d_backward,
                     conv2d_forward, dense_backward, dense_forward,
                     relu_backward, relu_forward)
from .mesh import MeshError


@dataclass
class ModelConfig:
    embedding_dim: int = 256
    cheb_order: int = 6
    mesh_widths: list = field(default_factory=lambda: [16, 16, 16, 32])
    decoder_widths: list | None = None   # derived from mesh_widths if None
    image_size: int = 112
    image_channels: list = field(default_factory=lambda: [
        32, 32, 64, 64, 128, 128, 256, 256, 256, 256])
    image_strides: list = field(default_factory=lambda: [
        1, 2, 1, 2, 1, 2, 1, 2, 1, 1])
    render_param_dim: int = 22

    def resolved_decoder_widths(self):
        if self.decoder_widths is not None:
            return list(self.decoder_widths)
        rev = list(reversed(self.mesh_widths))
        return rev[1:] + [self.mesh_widths[0]]

    def to_dict(self):
        return {
            "embedding_dim": self.embedding_dim,
            "cheb_order": self.cheb_order,
            "mesh_widths": list(self.mesh_widths),
            "decoder_widths": self.decoder_widths,
            "image_size": self.image_size,
            "image_channels": list(self.image_channels),
            "image_strides": list(self.image_strides),
            "render_param_dim": self.render_param_dim,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ------------------------------------------------------------ mesh pair --

class MeshEncoder:
    """Per-level Chebyshev filters with pooling, then a dense head."""

    def __init__(self, hierarchy, config: ModelConfig, rng, dtype=np.float32):
        widths = config.mesh_widths
        if len(widths) != hierarchy.levels:
            raise LayerError(
                f"need one width per level: {len(widths)} widths for "
                f"{hierarchy.levels} levels")
        self.hierarchy = hierarchy
        self.scaled = [lap.scaled(dtype) for lap in hierarchy.laplacians]
        self.chebs = []
        f_in = 6
        for w in widths:
            self.chebs.append(ChebLayer(config.cheb_order, f_in, w, rng=rng,
                                        dtype=dtype))
            f_in = w
        n_last = hierarchy.sizes[-1]
        self.dense = DenseLayer(n_last * f_in, config.embedding_dim, rng=rng,
                                dtype=dtype)
        self.embedding_dim = config.embedding_dim

    def params(self, prefix="enc"):
        out = {}
        for i, cheb in enumerate(self.chebs):
            for k, v in cheb.params().items():
                out[f"{prefix}.cheb{i}.{k}"] = v
        for k, v in self.dense.params().items():
            out[f"{prefix}.dense.{k}"] = v
        return out

    def forward(self, feats, want_cache=False):
        h = self.hierarchy
        if feats.shape != (h.sizes[0], 6):
            raise MeshError(
                f"mesh features must be ({h.sizes[0]}, 6), got {feats.shape}")
        x = feats
        caches = []
        for i, cheb in enumerate(self.chebs):
            y, c1 = cheb_forward(self.scaled[i], x, cheb, want_cache=True)
            a, c2 = relu_forward(y, want_cache=True)
            x = h.down(i, a)
            caches.append((c1, c2))
        flat = x.reshape(-1)
        z, c3 = dense_forward(flat[None, :], self.dense, want_cache=True)
        z = z[0]
        if want_cache:
            return z, (caches, c3, x.shape)
        return z

    def backward(self, cache, dz, prefix="enc"):
        caches, c3, pooled_shape = cache
        grads = {}
        dflat, dg = dense_backward(c3, dz[None, :])
        for k, v in dg.items():
            grads[f"{prefix}.dense.{k}"] = v
        dx = dflat[0].reshape(pooled_shape)
        for i in range(len(self.chebs) - 1, -1, -1):
            c1, c2 = caches[i]
            # gradient through pooling: scatter into retained fine rows
            dmap = self.hierarchy.maps[i][0]
            da = np.zeros((self.hierarchy.sizes[i], dx.shape[1]),
                          dtype=dx.dtype)
            da[dmap.retained] = dx
            dy = relu_backward(c2, da)
            dx, dg = cheb_backward(c1, dy)
            for k, v in dg.items():
                grads[f"{prefix}.cheb{i}.{k}"] = v
        return dx, grads


class MeshDecoder:
    """Dense seed at the coarsest level, then up-sample + filter blocks."""

    def __init__(self, hierarchy, config: ModelConfig, rng, dtype=np.float32):
        self.hierarchy = hierarchy
        self.scaled = [lap.scaled(dtype) for lap in hierarchy.laplacians]
        widths = config.resolved_decoder_widths()
        if len(widths) != hierarchy.levels:
            raise LayerError(
                f"need one decoder width per level: {len(widths)} widths "
                f"for {hierarchy.levels} levels")
        self.seed_width = config.mesh_widths[-1]
        n_last = hierarchy.sizes[-1]
        self.dense = DenseLayer(config.embedding_dim, n_last * self.seed_width,
                                rng=rng, dtype=dtype)
        self.chebs = []
        f_in = self.seed_width
        for w in widths:
            self.chebs.append(ChebLayer(config.cheb_order, f_in, w, rng=rng,
                                        dtype=dtype))
            f_in = w
        self.final = ChebLayer(config.cheb_order, f_in, 6, rng=rng,
                               dtype=dtype)
        self.embedding_dim = config.embedding_dim
        self._workspace = None

    def params(self, prefix="dec"):
        out = {}
        for k, v in self.dense.params().items():
            out[f"{prefix}.dense.{k}"] = v
        for i, cheb in enumerate(self.chebs):
            for k, v in cheb.params().items():
                out[f"{prefix}.cheb{i}.{k}"] = v
        for k, v in self.final.params().items():
            out[f"{prefix}.final.{k}"] = v
        return out

    def forward(self, z, want_cache=False, clamp_colours=False):
        h = self.hierarchy
        if z.shape != (self.embedding_dim,):
            raise MeshError(
                f"embedding must be ({self.embedding_dim},), got {z.shape}")
        seed, c0 = dense_forward(z[None, :], self.dense, want_cache=True)
        x = seed[0].reshape(h.sizes[-1], self.seed_width)
        caches = []
        level = h.levels
        for i, cheb in enumerate(self.chebs):
            level -= 1
            xu = h.up(level, x)
            y, c1 = cheb_forward(self.scaled[level], xu, cheb, want_cache=True)
            x, c2 = relu_forward(y, want_cache=True)
            caches.append((level, c1, c2))
        out, c3 = cheb_forward(self.scaled[0], x, self.final, want_cache=True)
        if clamp_colours:
            out = out.copy()
            out[:, 3:] = np.clip(out[:, 3:], 0.0, 1.0)
        if want_cache:
            return out, (c0, caches, c3)
        return out

    def backward(self, cache, dout, prefix="dec"):
        c0, caches, c3 = cache
        grads = {}
        dx, dg = cheb_backward(c3, dout)
        for k, v in dg.items():
            grads[f"{prefix}.final.{k}"] = v
        for i in range(len(self.chebs) - 1, -1, -1):
            level, c1, c2 = caches[i]
            dy = relu_backward(c2, dx)
            dxu, dg = cheb_backward(c1, dy)
            for k, v in dg.items():
                grads[f"{prefix}.cheb{i}.{k}"] = v
            dx = self.hierarchy.maps[level][1].matrix().T @ dxu
        dseed = dx.reshape(1, -1)
        dz, dg = dense_backward(c0, dseed)
        for k, v in dg.items():
            grads[f"{prefix}.dense.{k}"] = v
        return dz[0], grads

    # ------------------------------------------------------- fast path --

    def _build_workspace(self):
        h = self.hierarchy
        ws = {"ups": [], "laps": [], "laps2": []}
        for level in range(len(h.meshes)):
            lap = self.scaled[level].astype(np.float32).tocsr()
            lap.sort_indices()
            ws["laps"].append(lap)
        for dmap, umap in h.maps:
            u = umap.matrix().astype(np.float32).tocsr()
            u.sort_indices()
            ws["ups"].append(u)
        layers = list(self.chebs) + [self.final]
        ws["theta_flat"] = []
        ws["bias"] = []
        ws["buffers"] = []
        level = h.levels
        for i, cheb in enumerate(layers):
            lvl = max(level - 1 - i, 0)
            n = h.sizes[lvl]
            k, fo = cheb.k, cheb.f_out
            # (Fin, K*Fout) so one GEMM emits every Clenshaw coefficient
            tf = np.ascontiguousarray(
                cheb.theta.astype(np.float32).transpose(1, 0, 2)
                .reshape(cheb.f_in, k * fo))
            ws["theta_flat"].append(tf)
            ws["bias"].append(None if cheb.bias is None
                              else cheb.bias.astype(np.float32))
            ws["buffers"].append((np.empty((n, fo), np.float32),
                                  np.empty((n, fo), np.float32),
                                  np.empty((n, fo), np.float32)))
        ws["dense_w"] = self.dense.weight.astype(np.float32)
        ws["dense_b"] = self.dense.bias.astype(np.float32)
        self._workspace = ws
        return ws

    def refresh_workspace(self):
        """Re-snapshot parameters after training steps."""
        self._workspace = None

    def decode_fast(self, z, clamp_colours=True):
        """Float32 decode tuned for latency; equals forward() within fp32.

        Each filter is evaluated as sum_k T_k(L~)(x theta_k) by Clenshaw's
        recurrence: one GEMM for all coefficient blocks, then K-1 fused
        sparse steps at the output width.
        """
        ws = self._workspace or self._build_workspace()
        h = self.hierarchy
        x = (np.asarray(z, np.float32) @ ws["dense_w"] + ws["dense_b"])
        x = x.reshape(h.sizes[-1], self.seed_width)
        n_layers = len(ws["theta_flat"])
        level = h.levels
        for i in range(n_layers):
            last = i == n_layers - 1
            if not last:
                level -= 1
                x = ws["ups"][level] @ x
            lap = ws["laps"][level]
            theta = ws["theta_flat"][i]
            k = theta.shape[1] // ws["buffers"][i][0].shape[1]
            fo = ws["buffers"][i][0].shape[1]
            coeff = x @ theta                     # (n, K*Fout)
            b1, b2, b3 = (buf[:coeff.shape[0]] for buf in ws["buffers"][i])
            if k == 1:
                x = coeff.copy()
            else:
                np.copyto(b1, coeff[:, (k - 1) * fo:])
                b2[:] = 0.0
                for j in range(k - 2, 0, -1):
                    _kernels.clenshaw_step(lap, b1, b2,
                                           coeff[:, j * fo:(j + 1) * fo], b3)
                    b1, b2, b3 = b3, b1, b2
                _kernels.clenshaw_final(lap, b1, b2, coeff[:, :fo], b3)
                x = b3
            if ws["bias"][i] is not None:
                x += ws["bias"][i]
            if not last:
                np.maximum(x, 0.0, out=x)
        out = x.copy()
        if clamp_colours:
            out[:, 3:] = np.clip(out[:, 3:], 0.0, 1.0)
        return out


# ---------------------------------------------------------- image side --

class ImageEncoder:
    """Strided 3x3 conv stack with batchnorm, then a split dense head.

    The head emits the mesh embedding and the raw (unsquashed) render
    parameter vector side by side.
    """

    def __init__(self, config: ModelConfig, rng, dtype=np.float32):
        if len(config.image_channels) != len(config.image_strides):
            raise LayerError("image channel and stride plans differ in length")
        self.config = config
        self.convs = []
        self.bns = []
        c_in = 3
        size = config.image_size
        for c_out, stride in zip(config.image_channels, config.image_strides):
            self.convs.append(Conv2DLayer(c_in, c_out, stride=stride, rng=rng,
                                          dtype=dtype))
            self.bns.append(BatchNormState(c_out, dtype=dtype))
            size = (size + 2 - 3) // stride + 1
            c_in = c_out
        self.feat_shape = (size, size, c_in)
        head_in = size * size * c_in
        self.head = DenseLayer(head_in, config.embedding_dim
                               + config.render_param_dim, rng=rng, dtype=dtype)

    def params(self, prefix="img"):
        out = {}
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            for k, v in conv.params().items():
                out[f"{prefix}.conv{i}.{k}"] = v
            for k, v in bn.params().items():
                out[f"{prefix}.bn{i}.{k}"] = v
        for k, v in self.head.params().items():
            out[f"{prefix}.head.{k}"] = v
        return out

    def forward(self, images, training=False, want_cache=False):
        images = np.asarray(images)
        size = self.config.image_size
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (size, size, 3):
            raise LayerError(
                f"images must be (B, {size}, {size}, 3), got {images.shape}")
        x = images
        caches = []
        for conv, bn in zip(self.convs, self.bns):
            y, c1 = conv2d_forward(x, conv, want_cache=True)
            yb, c2 = batchnorm_forward(y, bn, training=training,
                                       want_cache=True)
            x, c3 = relu_forward(yb, want_cache=True)
            caches.append((c1, c2, c3))
        flat = x.reshape(x.shape[0], -1)
        out, c4 = dense_forward(flat, self.head, want_cache=True)
        emb = out[:, :self.config.embedding_dim]
        raw_params = out[:, self.config.embedding_dim:]
        if want_cache:
            return emb, raw_params, (caches, c4, x.shape)
        return emb, raw_params

    def backward(self, cache, demb, draw_params, prefix="img"):
        caches, c4, feat_shape = cache
        grads = {}
        dout = np.concatenate([demb, draw_params], axis=1)
        dflat, dg = dense_backward(c4, dout)
        for k, v in dg.items():
            grads[f"{prefix}.head.{k}"] = v
        dx = dflat.reshape(feat_shape)
        for i in range(len(self.convs) - 1, -1, -1):
            c1, c2, c3 = caches[i]
            dyb = relu_backward(c3, dx)
            dy, dg = batchnorm_backward(c2, dyb)
            for k, v in dg.items():
                grads[f"{prefix}.bn{i}.{k}"] = v
            dx, dg = conv2d_backward(c1, dy)
            for k, v in dg.items():
                grads[f"{prefix}.conv{i}.{k}"] = v
        return dx, grads


# ------------------------------------------------------------ full model --

class CmdModel:
    """Mesh auto-encoder plus image encoder sharing one mesh decoder."""

    def __init__(self, hierarchy, config: ModelConfig, seed=0,
                 dtype=np.float32, with_image_encoder=True):
        rng = np.random.default_rng(seed)
        self.config = config
        self.hierarchy = hierarchy
        self.mesh_encoder = MeshEncoder(hierarchy, config, rng, dtype)
        self.mesh_decoder = MeshDecoder(hierarchy, config, rng, dtype)
        self.image_encoder = (ImageEncoder(config, rng, dtype)
                              if with_image_encoder else None)

    def params(self):
        out = {}
        out.update(self.mesh_encoder.params())
        out.update(self.mesh_decoder.params())
        if self.image_encoder is not None:
            out.update(self.image_encoder.params())
        return out

    def load_params(self, tensors):
        own = self.params()
        missing = set(own) - set(tensors)
        if missing:
            raise MeshError(f"checkpoint lacks parameters: {sorted(missing)[:4]}")
        for name, arr in own.items():
            src = tensors[name]
            if src.shape != arr.shape:
                raise MeshError(
                    f"parameter {name} shape {src.shape} != {arr.shape}")
            arr[...] = src.astype(arr.dtype)
        self.mesh_decoder.refresh_workspace()


def mesh_encode(feats, encoder: MeshEncoder):
    return encoder.forward(np.asarray(feats))


def mesh_decode(z, decoder: MeshDecoder, clamp_colours=True):
    return decoder.forward(np.asarray(z), clamp_colours=clamp_colours)


# ------------------------------------------------------------------ PCA --

class PcaError(ValueError):
    pass


class PcaModel:
    """Linear basis baseline: mean plus orthonormal components."""

    __slots__ = ("mean", "components")

    def __init__(self, mean, components):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.components = np.asarray(components, dtype=np.float64)
        gram = self.components.T @ self.components
        if not np.allclose(gram, np.eye(self.components.shape[1]), atol=1e-6):
            raise PcaError("components are not orthonormal")

    @property
    def dim(self):
        return self.components.shape[1]


def pca_fit(data, d) -> PcaModel:
    """Top-d principal components of row-sample data via thin SVD."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        data = data.reshape(len(data), -1)
    n = data.shape[0]
    if n < 2:
        raise PcaError("need at least two samples")
    mean = data.mean(axis=0)
    centred = data - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    rank = int((s > s[0] * 1e-12).sum()) if s.size else 0
    if d > rank:
        raise PcaError(f"requested {d} components but data rank is {rank}")
    return PcaModel(mean, vt[:d].T)


def pca_project(model: PcaModel, x):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != model.mean.shape:
        raise PcaError(f"sample size {x.shape} != model size {model.mean.shape}")
    return model.components.T @ (x - model.mean)


def pca_reconstruct(model: PcaModel, coeffs):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (model.dim,):
        raise PcaError(f"need {model.dim} coefficients, got {coeffs.shape}")
    return model.mean + model.components @ coeffs


def attribute_embedding(embeddings, q=None):
    """Mean and principal directions of an embedding cloud.

    Returns ``(mean, directions, stddevs)`` where traversing
    ``mean + a * stddevs[j] * directions[:, j]`` sweeps the j-th dominant
    mode of the cloud.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise PcaError("need a non-empty (N, dim) embedding array")
    n, dim = emb.shape
    mean = emb.mean(axis=0)
    if q is None:
        q = min(8, max(n - 1, 1), dim)
    centred = emb - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    take = min(q, len(s))
    dirs = vt[:take].T
    stddevs = s[:take] / np.sqrt(max(n - 1, 1))
    if take < q:
        pad = np.zeros((dim, q - take))
        dirs = np.hstack([dirs, pad])
        stddevs = np.concatenate([stddevs, np.zeros(q - take)])
    return mean, dirs, stddevs
