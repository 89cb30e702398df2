"""Geometry and radiance MLPs over the multi-scale encoding.

GeometryNet maps an encoding (3 + L*N) to (sdf, theta): 8 softplus(beta=100)
hidden layers of width 256 by default, the input re-concatenated (and the
pair divided by sqrt(2)) at a middle layer, every linear layer weight-normed.
Initialization makes the net approximate f(x) ~ |x| - radius at the start:
hidden weights are zero on feature columns so only the raw position drives
the initial SDF, and the last layer starts near its analytic sphere values.

ColorNet maps (theta, x, view dir, sdf gradient) through relu hidden layers
to a sigmoid RGB.

forward_jvp variants push a 3-vector-per-sample tangent through the same
tape nodes, which is how the renderer gets spatial SDF gradients that are
themselves differentiable (needed for the eikonal penalty and shading).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def inverse_softplus(y):
    """x with softplus(x) = y for y > 0."""
    y = float(y)
    return y + np.log(-np.expm1(-y))


class Linear:
    """Weight-normalized affine layer: W_eff = g * V / |V row|."""

    def __init__(self, V, g, b):
        self.V = V  # (out, in)
        self.g = g  # (out,)
        self.b = b  # (out,)

    @property
    def in_dim(self):
        return self.V.shape[1]

    @property
    def out_dim(self):
        return self.V.shape[0]

    def parameters(self):
        return [self.V, self.g, self.b]

    def weight(self):
        """Effective (in, out) weight on the tape."""
        nrm = ad.norm_last(self.V)                   # (out,)
        scale = ad.div(self.g, nrm)
        W = ad.mul(self.V, ad.reshape(scale, (self.out_dim, 1)))
        return ad.transpose(W, (1, 0))

    @staticmethod
    def from_arrays(V, g, b):
        return Linear(ad.tensor(V, requires_grad=True),
                      ad.tensor(g, requires_grad=True),
                      ad.tensor(b, requires_grad=True))


def _he_linear(rng, in_dim, out_dim):
    V = rng.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / in_dim)
    g = np.linalg.norm(V, axis=1)
    return Linear.from_arrays(V, g, np.zeros(out_dim))


class GeometryNet:
    def __init__(self, layers, skip_at, beta=100.0):
        self.layers = layers          # hidden layers + final
        self.skip_at = skip_at        # hidden index whose input gets the concat
        self.beta = beta

    @property
    def n_hidden(self):
        return len(self.layers) - 1

    def parameters(self):
        return [p for lin in self.layers for p in lin.parameters()]

    @staticmethod
    def build(in_dim, width, n_hidden, skip_at, theta_dim, seed, radius=0.5,
              beta=100.0):
        """Geometric init: start close to the SDF of a sphere of `radius`.

        The first layer projects the raw position onto an antithetic
        direction bank (each direction paired with its negation, features
        zeroed), so after the near-relu softplus exactly one of each pair is
        active and the squared norm of the activations tracks ||x||^2. All
        other hidden layers start as exact identities (the skip layer as
        sqrt(2) * I on the carried half, cancelling the concat's 1/sqrt(2)),
        and the final SDF row is flat at sqrt(pi/width) with bias -radius,
        the analytic value turning the mean activation back into a distance.
        Theta rows get a tiny spread for symmetry breaking. Weight-norm
        magnitudes start at the row norms so effective weights equal the
        built ones. calibrate_geometry() then removes the residual affine
        error against the realized encoding statistics.
        """
        if width % 2 != 0:
            raise ValueError(f"geometric init needs an even width, got {width}")
        rng = np.random.default_rng(seed)
        layers = []
        for i in range(n_hidden):
            if i == 0:
                half = width // 2
                V = np.zeros((width, in_dim))
                bank = rng.standard_normal((half, 3)) * np.sqrt(2.0 / width)
                V[:half, :3] = bank
                V[half:, :3] = -bank
            elif i == skip_at:
                V = np.zeros((width, width + in_dim))
                V[:, :width] = np.sqrt(2.0) * np.eye(width)
            else:
                V = np.eye(width)
            g = np.linalg.norm(V, axis=1)
            layers.append(Linear.from_arrays(V, g, np.zeros(width)))
        out_dim = 1 + theta_dim
        V = np.full((out_dim, width), np.sqrt(np.pi / width))
        V[1:] += rng.standard_normal((theta_dim, width)) * 1e-4
        g = np.linalg.norm(V, axis=1)
        b = np.full(out_dim, -radius)
        layers.append(Linear.from_arrays(V, g, b))
        return GeometryNet(layers, skip_at, beta=beta)

    def _weights(self):
        return [lin.weight() for lin in self.layers]

    def forward(self, z):
        """z (K, in) -> (sdf (K, 1), theta (K, theta_dim))."""
        ws = self._weights()
        inv_sqrt2 = ad.constant(1.0 / np.sqrt(2.0))
        h = z
        for i in range(self.n_hidden):
            if i == self.skip_at:
                h = ad.mul(ad.concat([h, z], axis=-1), inv_sqrt2)
            pre = ad.add(ad.matmul(h, ws[i]), self.layers[i].b)
            h = ad.softplus(pre, beta=self.beta)
        out = ad.add(ad.matmul(h, ws[-1]), self.layers[-1].b)
        f = ad.narrow(out, out.ndim - 1, 0, 1)
        theta = ad.narrow(out, out.ndim - 1, 1, out.shape[-1] - 1)
        return f, theta

    def forward_jvp(self, z, zt):
        """Forward plus tangent push: z (K, in), zt (K, 3, in).

        Returns (sdf (K, 1), theta, sdf tangent (K, 3)); the tangent shares
        the weight tensors, so parameter gradients flow from both streams.
        """
        ws = self._weights()
        inv_sqrt2 = ad.constant(1.0 / np.sqrt(2.0))
        h, ht = z, zt
        for i in range(self.n_hidden):
            if i == self.skip_at:
                h = ad.mul(ad.concat([h, z], axis=-1), inv_sqrt2)
                ht = ad.mul(ad.concat([ht, zt], axis=-1), inv_sqrt2)
            pre = ad.add(ad.matmul(h, ws[i]), self.layers[i].b)
            pre_t = ad.matmul(ht, ws[i])
            K = pre.shape[0]
            act = ad.sigmoid(ad.mul(pre, ad.constant(self.beta)))
            h = ad.softplus(pre, beta=self.beta)
            ht = ad.mul(pre_t, ad.reshape(act, (K, 1, act.shape[-1])))
        out = ad.add(ad.matmul(h, ws[-1]), self.layers[-1].b)
        out_t = ad.matmul(ht, ws[-1])
        f = ad.narrow(out, 1, 0, 1)
        theta = ad.narrow(out, 1, 1, out.shape[-1] - 1)
        ft = ad.reshape(ad.narrow(out_t, 2, 0, 1), (z.shape[0], 3))
        return f, theta, ft


class ColorNet:
    def __init__(self, layers):
        self.layers = layers

    def parameters(self):
        return [p for lin in self.layers for p in lin.parameters()]

    @staticmethod
    def build(theta_dim, width, n_hidden, seed):
        rng = np.random.default_rng(seed)
        in_dim = theta_dim + 9  # theta, position, view dir, sdf gradient
        dims = [in_dim] + [width] * n_hidden + [3]
        layers = [_he_linear(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        return ColorNet(layers)

    def forward(self, theta, x, d, n):
        """All inputs (K, *); x, d are constants, n is the tape SDF gradient."""
        h = ad.concat([theta, ad.constant(x), ad.constant(d), n], axis=-1)
        for lin in self.layers[:-1]:
            h = ad.relu(ad.add(ad.matmul(h, lin.weight()), lin.b))
        out = ad.add(ad.matmul(h, self.layers[-1].weight()), self.layers[-1].b)
        return ad.sigmoid(out)


class FieldModel:
    """The full trainable bundle: planes, the two MLPs, and the scalars.

    s (opacity sharpness) and k (blend decay) live as softplus
    reparameterizations so they stay positive under unconstrained updates.
    mcfg (a ModelConfig) defines the field semantics: encoder mode, blend
    normalization, smoothing windows.
    """

    def __init__(self, volume, geometry, color, s_raw, k_raw, mcfg):
        self.volume = volume
        self.geometry = geometry
        self.color = color
        self.s_raw = s_raw
        self.k_raw = k_raw
        self.mcfg = mcfg

    def s(self):
        return ad.softplus(self.s_raw)

    def k(self):
        return ad.softplus(self.k_raw)

    def parameters(self):
        return (self.volume.parameters() + self.geometry.parameters()
                + self.color.parameters() + [self.s_raw, self.k_raw])

    def scalar_parameters(self):
        return [self.s_raw, self.k_raw]

    def n_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def with_mcfg(self, mcfg):
        """Same parameters under different field semantics (for ablations)."""
        return FieldModel(self.volume, self.geometry, self.color,
                          self.s_raw, self.k_raw, mcfg)


def calibrate_geometry(volume, geometry, seed, radius=0.5, n_points=2048):
    """Fold the affine error of the fresh geometry net into its final layer.

    The built net satisfies f ~ a * ||x|| + c for some draw-dependent a, c
    (activation offsets and the realized encoding norm shift both). Fitting
    the two scalars over probe points in the unit ball and rescaling the SDF
    row turns it into f ~ ||x|| - radius. Deterministic given `seed`.
    """
    from . import triplane

    rng = np.random.default_rng([seed, 271828])
    v = rng.standard_normal((n_points, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    x = v * rng.uniform(0.0, 1.0, (n_points, 1)) ** (1.0 / 3.0)
    enc = triplane.encode(volume, x)
    f, _ = geometry.forward(enc)
    nrm = np.linalg.norm(x, axis=1)
    design = np.stack([nrm, np.ones_like(nrm)], axis=1)
    coef, *_ = np.linalg.lstsq(design, f.data[:, 0], rcond=None)
    a, c = float(coef[0]), float(coef[1])
    if not np.isfinite(a) or a <= 0.1:
        return  # degenerate fit: leave the analytic init untouched
    final = geometry.layers[-1]
    b_old = float(final.b.data[0])
    final.g.data[0] /= a
    final.b.data[0] = -radius - (c - b_old) / a


def build_model(mcfg, seed):
    """Construct a freshly initialized FieldModel from a ModelConfig."""
    from . import triplane

    mcfg.validate()
    volume = triplane.geometric_init(mcfg.resolutions, mcfg.n_features,
                                     seed, blur_sigma=mcfg.blur_sigma)
    geometry = GeometryNet.build(mcfg.encode_dim, mcfg.geom_width,
                                 mcfg.geom_hidden, mcfg.geom_skip_at,
                                 mcfg.theta_dim, seed + 1,
                                 radius=mcfg.init_radius, beta=mcfg.geom_beta)
    calibrate_geometry(volume, geometry, seed + 1, radius=mcfg.init_radius)
    color = ColorNet.build(mcfg.theta_dim, mcfg.color_width,
                           mcfg.color_hidden, seed + 2)
    s_raw = ad.tensor(inverse_softplus(mcfg.s_init), requires_grad=True)
    k_raw = ad.tensor(inverse_softplus(mcfg.k_init), requires_grad=True)
    return FieldModel(volume, geometry, color, s_raw, k_raw, mcfg)
