"""Hyper-modal diffusion imputation and baseline imputers.

The hyper-modal matrix concatenates structural, visual and textual entity
embeddings ``[S | V | D]``; its mask marks which coordinates are observed.
A reconstruction network predicts the clean matrix from a noised one, is
trained only on observed coordinates, and the reverse chain output fills
the unobserved slots.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numcore as nc
from .numcore import DimensionError, Param, Tensor

STEP_EMBED_DIM = 16


class ImputerKind(str, Enum):
    HIDE = "hide"
    AE = "ae"
    CRA = "cra"
    MMIN = "mmin"
    NONE = "none"


class ReconKind(str, Enum):
    CRA = "cra"
    AE = "ae"
    MLP = "mlp"
    MHA = "mha"


# schedule ------------------------------------------------------------------


@dataclass
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or len(self.betas) == 0:
            raise ValueError("need at least one diffusion step")
        if np.any(self.betas < 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        self.alphas = 1.0 - self.betas
        log_cum = np.cumsum(np.log1p(-self.betas))
        self.alpha_bars = np.exp(log_cum)
        self.one_minus_alpha_bars = -np.expm1(log_cum)
        prev = np.concatenate([[0.0], self.one_minus_alpha_bars[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            tilde = np.where(self.one_minus_alpha_bars > 0, prev / self.one_minus_alpha_bars * self.betas, 0.0)
        tilde[0] = self.betas[0]
        self.posterior_variance = tilde

    @classmethod
    def linear(cls, steps: int = 10, beta_low: float = 5e-4, beta_up: float = 5e-2, scale: float | None = 1e-4):
        """Linear betas from ``beta_low`` to ``beta_up``, optionally multiplied by ``scale``."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        betas = np.linspace(beta_low, beta_up, steps) if steps > 1 else np.array([beta_low])
        if scale is not None:
            betas = betas * scale
        return cls(betas)

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        """``alpha_bar_t`` for 1-based steps (``t = 0`` gives 1)."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bars[np.maximum(t, 1) - 1], 1.0)

    def posterior_coefs(self, t: int) -> tuple[float, float]:
        """Weights of ``x_t`` and of the predicted ``x_0`` in the reverse-step mean."""
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside 1..{self.T}")
        oma_t = self.one_minus_alpha_bars[t - 1]
        if oma_t <= 0:
            return 0.0, 1.0
        oma_prev = self.one_minus_alpha_bars[t - 2] if t > 1 else 0.0
        ab_prev = self.alpha_bars[t - 2] if t > 1 else 1.0
        c_xt = np.sqrt(self.alphas[t - 1]) * oma_prev / oma_t
        c_x0 = np.sqrt(ab_prev) * self.betas[t - 1] / oma_t
        return float(c_xt), float(c_x0)


def q_sample(x0, t, eps, schedule: DiffusionSchedule):
    """Closed-form forward noising; ``t`` is an int or one step per row."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"step outside 1..{schedule.T}")
    ab = schedule.alpha_bars[t_arr - 1]
    oma = schedule.one_minus_alpha_bars[t_arr - 1]
    if t_arr.ndim == 1:
        ab, oma = ab[:, None], oma[:, None]
    a, b = np.sqrt(ab), np.sqrt(oma)
    if isinstance(x0, Tensor):
        return x0 * a + nc.as_tensor(eps) * b
    return a * np.asarray(x0) + b * np.asarray(eps)


def step_embedding(t, width: int = STEP_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of diffusion steps, one row per step."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# hyper-modal ---------------------------------------------------------------


@dataclass
class HyperModal:
    x0: Tensor
    mask: np.ndarray
    dim: int

    def views(self, x: Tensor | None = None) -> list[Tensor]:
        return nc.split(self.x0 if x is None else x, 3, axis=1)


def build_hypermodal(S: Tensor, V: Tensor, D: Tensor, avail_v: np.ndarray, avail_d: np.ndarray) -> HyperModal:
    """``[S | V | D]`` with a mask whose structural block is all ones."""
    S, V, D = nc.as_tensor(S), nc.as_tensor(V), nc.as_tensor(D)
    if not (S.shape == V.shape == D.shape):
        raise DimensionError(f"hyper-modal blocks differ in shape: {S.shape}, {V.shape}, {D.shape}")
    n, d = S.shape
    avail_v = np.asarray(avail_v, dtype=np.float64).reshape(n, -1)[:, :1]
    avail_d = np.asarray(avail_d, dtype=np.float64).reshape(n, -1)[:, :1]
    mask = np.concatenate([np.ones((n, d)), np.repeat(avail_v, d, axis=1), np.repeat(avail_d, d, axis=1)], axis=1)
    return HyperModal(nc.concat([S, V, D], axis=1), mask, d)


def impute(x0, x_hat, mask: np.ndarray):
    """Keep observed coordinates of ``x0``; take ``x_hat`` elsewhere."""
    if np.shape(x0) != np.shape(x_hat) or np.shape(x0) != np.shape(mask):
        raise DimensionError("impute inputs must share a shape")
    mask = np.asarray(mask, dtype=np.float64)
    if isinstance(x0, Tensor) or isinstance(x_hat, Tensor):
        return nc.as_tensor(x0) * mask + nc.as_tensor(x_hat) * (1.0 - mask)
    return np.where(mask > 0.5, x0, x_hat)


def impute_table(hm: HyperModal, imputer, rng: np.random.Generator, rows=None) -> Tensor:
    """Imputed hyper-modal table.

    Only rows with a missing block (restricted to ``rows`` when given) pass
    through the imputer; the networks act row by row, so the rest equal ``x0``.
    """
    todo = np.flatnonzero(hm.mask.min(axis=1) < 0.5)
    if rows is not None:
        todo = np.intersect1d(todo, rows)
    if len(todo) == 0:
        return hm.x0
    x0 = nc.gather_rows(hm.x0, todo)
    m = hm.mask[todo]
    return nc.put_rows(hm.x0, todo, impute(x0, imputer.generate(x0, m, rng), m))


def masked_mse(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """Squared error on observed coordinates, averaged over their count."""
    count = float(mask.sum())
    if count == 0:
        return nc.Tensor(0.0)
    diff = (pred - nc.as_tensor(target)) * mask
    return (diff * diff).sum() * (1.0 / count)


# networks -------------------------------------------------------------------


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str, zero: bool = False):
        scale = 0.0 if zero else np.sqrt(2.0 / (n_in + n_out))
        self.W = Param(rng.normal(scale=scale, size=(n_in, n_out)) if not zero else np.zeros((n_in, n_out)), f"{name}.W")
        # a small positive bias keeps ReLU inputs off the kink when a whole row is inactive
        self.b = Param(np.zeros(n_out) if zero else np.full(n_out, 0.01), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b

    def parameters(self) -> list[Param]:
        return [self.W, self.b]


class Module:
    def parameters(self) -> list[Param]:
        out = []
        for layer in self.layers():
            out.extend(layer.parameters())
        return out

    def layers(self):
        return []

    def named_parameters(self) -> dict[str, Param]:
        return {p.name: p for p in self.parameters()}


def _widths(width: int) -> tuple[int, int]:
    return int(np.ceil(width / 2)), int(np.ceil(width / 4))


class AutoEncoder(Module):
    """ReLU MLP encoder ``in -> w/2 -> w/4`` and mirrored decoder ``-> w/2 -> out``."""

    def __init__(self, n_in: int, width: int, rng: np.random.Generator, name: str, zero_last: bool = False):
        h1, h2 = _widths(width)
        self.enc1 = Linear(n_in, h1, rng, f"{name}.enc1")
        self.enc2 = Linear(h1, h2, rng, f"{name}.enc2")
        self.dec1 = Linear(h2, h1, rng, f"{name}.dec1")
        self.dec2 = Linear(h1, width, rng, f"{name}.dec2", zero=zero_last)

    def layers(self):
        return [self.enc1, self.enc2, self.dec1, self.dec2]

    def __call__(self, x: Tensor) -> Tensor:
        h = nc.relu(self.enc1(x))
        h = nc.relu(self.enc2(h))
        h = nc.relu(self.dec1(h))
        return self.dec2(h)


class CascadeResidualAE(Module):
    """Three cascaded autoencoders, each adding a residual correction.

    Each block's last layer starts at zero, so the network is the identity
    at initialisation.
    """

    blocks_count = 3

    def __init__(self, width: int, rng: np.random.Generator, name: str = "cra", cond_dim: int = 0):
        self.cond_dim = cond_dim
        self.blocks = [AutoEncoder(width + cond_dim, width, rng, f"{name}.block{k}", zero_last=True) for k in range(self.blocks_count)]

    def layers(self):
        return self.blocks

    def __call__(self, x: Tensor, cond: np.ndarray | None = None) -> Tensor:
        for block in self.blocks:
            inp = x if cond is None else nc.concat([x, nc.Tensor(cond)], axis=1)
            x = x + block(inp)
        return x


class ReconNet(Module):
    """Step-conditioned reconstruction network ``x_hat(x_t, t)``."""

    def __init__(self, kind, dim: int, rng: np.random.Generator, name: str = "recon"):
        self.kind = ReconKind(kind)
        self.dim = dim
        width = 3 * dim
        cond = STEP_EMBED_DIM
        if self.kind is ReconKind.CRA:
            self.net = CascadeResidualAE(width, rng, name, cond_dim=cond)
            self._layers = [self.net]
        elif self.kind is ReconKind.AE:
            self.net = AutoEncoder(width + cond, width, rng, name)
            self._layers = [self.net]
        elif self.kind is ReconKind.MLP:
            self.l1 = Linear(width + cond, 2 * width, rng, f"{name}.l1")
            self.l2 = Linear(2 * width, width, rng, f"{name}.l2")
            self._layers = [self.l1, self.l2]
        else:
            self.heads = 2 if dim % 2 == 0 else 1
            self.step_proj = Linear(cond, dim, rng, f"{name}.step")
            self.q = Linear(dim, dim, rng, f"{name}.q")
            self.k = Linear(dim, dim, rng, f"{name}.k")
            self.v = Linear(dim, dim, rng, f"{name}.v")
            self.o = Linear(dim, dim, rng, f"{name}.o", zero=True)
            self._layers = [self.step_proj, self.q, self.k, self.v, self.o]

    def layers(self):
        return self._layers

    def __call__(self, x: Tensor, t) -> Tensor:
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        emb = step_embedding(t)
        if self.kind is ReconKind.CRA:
            return self.net(x, emb)
        if self.kind is ReconKind.AE:
            return self.net(nc.concat([x, nc.Tensor(emb)], axis=1))
        if self.kind is ReconKind.MLP:
            return self.l2(nc.relu(self.l1(nc.concat([x, nc.Tensor(emb)], axis=1))))
        return self._attend(x, emb)

    def _attend(self, x: Tensor, emb: np.ndarray) -> Tensor:
        # three modality tokens per entity; residual self-attention
        n, d, h = x.shape[0], self.dim, self.heads
        dh = d // h
        tokens = x.reshape(n, 3, d) + self.step_proj(nc.Tensor(emb)).reshape(n, 1, d)

        def heads(z: Tensor) -> Tensor:
            return z.reshape(n, 3, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(tokens)), heads(self.k(tokens)), heads(self.v(tokens))
        att = nc.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
        mixed = (att @ v).transpose(0, 2, 1, 3).reshape(n, 3, d)
        return x + self.o(mixed).reshape(n, 3 * d)


# diffusion processes ----------------------------------------------------------


def masked_diffusion_loss(x0: Tensor, mask: np.ndarray, net: ReconNet, schedule: DiffusionSchedule,
                          rng: np.random.Generator) -> Tensor:
    """One-sample estimate of the masked denoising objective (step ~ U{1..T} per row)."""
    if float(mask.sum()) == 0:
        return nc.Tensor(0.0)
    x0 = nc.as_tensor(x0)
    n = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    xt = q_sample(x0, t, eps, schedule)
    return masked_mse(net(xt, t), x0, mask)


def reverse_generate(x0: Tensor, net: ReconNet, schedule: DiffusionSchedule, rng: np.random.Generator,
                     start: int | None = None) -> Tensor:
    """Mean-only reverse chain from a noised copy of ``x0`` down to a clean estimate."""
    x0 = nc.as_tensor(x0)
    start = schedule.T if start is None else start
    eps = rng.standard_normal(x0.shape)
    x = q_sample(x0, start, eps, schedule)
    for t in range(start, 1, -1):
        x_hat = net(x, t)
        c_xt, c_x0 = schedule.posterior_coefs(t)
        x = x * c_xt + x_hat * c_x0
    return net(x, 1)


# imputers ---------------------------------------------------------------------


class Imputer:
    """Common surface: a training loss and a reconstruction of ``x0``."""

    kind: ImputerKind

    def parameters(self) -> list[Param]:
        raise NotImplementedError

    def loss(self, x0: Tensor, mask: np.ndarray, rng: np.random.Generator) -> Tensor:
        raise NotImplementedError

    def generate(self, x0: Tensor, mask: np.ndarray, rng: np.random.Generator) -> Tensor:
        raise NotImplementedError

    def named_parameters(self) -> dict[str, Param]:
        return {p.name: p for p in self.parameters()}


class DiffusionImputer(Imputer):
    kind = ImputerKind.HIDE

    def __init__(self, dim: int, schedule: DiffusionSchedule, recon="cra", rng=None, start: int | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.net = ReconNet(recon, dim, rng, "hide")
        self.schedule = schedule
        self.start = start

    def parameters(self):
        return self.net.parameters()

    def loss(self, x0, mask, rng):
        return masked_diffusion_loss(x0, mask, self.net, self.schedule, rng)

    def generate(self, x0, mask, rng):
        return reverse_generate(x0, self.net, self.schedule, rng, self.start)


class AEImputer(Imputer):
    """Single-pass masked autoencoder (plain AE or cascaded residual AE)."""

    def __init__(self, dim: int, kind="ae", rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = ImputerKind(kind)
        width = 3 * dim
        if self.kind is ImputerKind.AE:
            self.net = AutoEncoder(width, width, rng, "ae")
        else:
            self.net = CascadeResidualAE(width, rng, "cra")

    def parameters(self):
        return self.net.parameters()

    def loss(self, x0, mask, rng):
        return masked_mse(self.net(nc.as_tensor(x0)), x0, mask)

    def generate(self, x0, mask, rng):
        return self.net(nc.as_tensor(x0))


class MMINImputer(Imputer):
    """CRA encoder then CRA decoder, both outputs held to the observed coordinates."""

    kind = ImputerKind.MMIN

    def __init__(self, dim: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.encoder = CascadeResidualAE(3 * dim, rng, "mmin.enc")
        self.decoder = CascadeResidualAE(3 * dim, rng, "mmin.dec")

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def forward(self, x0):
        fwd = self.encoder(nc.as_tensor(x0))
        return fwd, self.decoder(fwd)

    def loss(self, x0, mask, rng):
        fwd, bwd = self.forward(x0)
        return masked_mse(fwd, x0, mask) + masked_mse(bwd, x0, mask)

    def generate(self, x0, mask, rng):
        return self.forward(x0)[1]


def make_imputer(kind, dim: int, rng: np.random.Generator, schedule: DiffusionSchedule | None = None,
                 recon="cra", start: int | None = None) -> Imputer | None:
    kind = ImputerKind(kind)
    if kind is ImputerKind.NONE:
        return None
    if kind is ImputerKind.HIDE:
        return DiffusionImputer(dim, schedule or DiffusionSchedule.linear(), recon, rng, start)
    if kind is ImputerKind.MMIN:
        return MMINImputer(dim, rng)
    return AEImputer(dim, kind, rng)
