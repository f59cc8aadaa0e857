"""Behavior-conditioned diffusion denoising of item modality features."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .substrate import ag
from .substrate.autograd import Tensor
from .substrate.optim import Parameter, TrainingAborted, xavier_init

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_prev(self, t):
        """ᾱ_{t-1} with ᾱ_0 = 1; ``t`` is 1-based."""
        t = np.asarray(t)
        return np.where(t > 1, self.alpha_bar[np.maximum(t - 2, 0)], 1.0)


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if not 1 <= T <= 1000:
        raise ConfigError(f"T must lie in [1, 1000], got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _check_t(t, schedule):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise IndexError(f"diffusion step out of range 1..{schedule.T}")
    return t


def q_sample(x0, t, schedule: DiffusionSchedule, rng, noise=None):
    """Jump straight from x_0 to x_t. Returns ``(x_t, noise)``; ``t`` may be per-row."""
    x0 = np.asarray(x0)
    t = _check_t(t, schedule)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t - 1]
    if ab.ndim == 1:
        ab = ab[:, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    return xt.astype(x0.dtype, copy=False), noise


class Denoiser:
    """x̂_0 = out( MLP([in(x_t), e_t]) ⊙ e_c ) for one modality.

    The MLP is two tanh layers (2h -> 2h -> h) so the gated width matches the
    collaborative embedding width h.
    """

    def __init__(self, feat_dim: int, hidden: int, T: int, rng, prefix: str = "denoiser"):
        h = hidden
        self.feat_dim, self.hidden, self.T = feat_dim, h, T
        self.in_w = Parameter(xavier_init(feat_dim, h, rng), f"{prefix}.in_w")
        self.in_b = Parameter(np.zeros((1, h), np.float32), f"{prefix}.in_b")
        self.time_emb = Parameter(xavier_init(T, h, rng), f"{prefix}.time_emb")
        self.w1 = Parameter(xavier_init(2 * h, 2 * h, rng), f"{prefix}.w1")
        self.b1 = Parameter(np.zeros((1, 2 * h), np.float32), f"{prefix}.b1")
        self.w2 = Parameter(xavier_init(2 * h, h, rng), f"{prefix}.w2")
        self.b2 = Parameter(np.zeros((1, h), np.float32), f"{prefix}.b2")
        self.out_w = Parameter(xavier_init(h, feat_dim, rng), f"{prefix}.out_w")
        self.out_b = Parameter(np.zeros((1, feat_dim), np.float32), f"{prefix}.out_b")

    def parameters(self) -> list[Parameter]:
        return [self.in_w, self.in_b, self.time_emb, self.w1, self.b1,
                self.w2, self.b2, self.out_w, self.out_b]

    def hidden_state(self, x_t, t, e_c) -> Tensor:
        """Gated representation MLP([in(x_t), e_t]) ⊙ e_c, before the output projection."""
        x_t = ag.as_tensor(x_t)
        e_c = ag.as_tensor(e_c)
        if x_t.shape[0] != e_c.shape[0]:
            raise ValueError(f"x_t has {x_t.shape[0]} rows but e_c has {e_c.shape[0]}")
        if x_t.shape[1] != self.feat_dim or e_c.shape[1] != self.hidden:
            raise ValueError(
                f"expected x_t width {self.feat_dim} and e_c width {self.hidden}, "
                f"got {x_t.shape[1]} and {e_c.shape[1]}"
            )
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"diffusion step out of range 1..{self.T}")
        proj = x_t @ self.in_w + self.in_b
        temb = ag.take_rows(self.time_emb, t - 1)
        h1 = ag.tanh(ag.concat_cols([proj, temb]) @ self.w1 + self.b1)
        h2 = ag.tanh(h1 @ self.w2 + self.b2)
        return h2 * e_c

    def __call__(self, x_t, t, e_c) -> Tensor:
        return self.hidden_state(x_t, t, e_c) @ self.out_w + self.out_b

    def check_finite(self):
        for p in self.parameters():
            if not np.all(np.isfinite(p.data)):
                raise TrainingAborted(f"non-finite denoiser parameter {p.name!r}")


def sample_steps(n: int, schedule: DiffusionSchedule, rng) -> np.ndarray:
    return rng.integers(1, schedule.T + 1, size=n)


def diffusion_loss(x0, schedule, e_c, denoiser, rng, return_prediction=False):
    """Mean squared error between x_0 and the denoiser's x̂_0, t uniform per row."""
    x0 = np.asarray(x0)
    if x0.shape[0] == 0:
        raise ValueError("diffusion_loss needs a nonempty batch")
    t = sample_steps(x0.shape[0], schedule, rng)
    xt, _ = q_sample(x0, t, schedule, rng)
    pred = denoiser(xt, t, e_c)
    loss = ag.mean(ag.square(ag.sub(pred, x0)))
    return (loss, pred) if return_prediction else loss


def posterior_mean(x_t, x0_hat, t: int, schedule, parameterization="x0"):
    """Reverse-step mean.

    ``"eps"`` is the textbook form 1/√α_t (x_t − β_t/√(1−ᾱ_t) f); ``"x0"``
    is the q(x_{t-1}|x_t, x_0) mean with x_0 replaced by the prediction, the
    form consistent with a network trained to regress x_0.
    """
    beta, alpha, ab = schedule.beta[t - 1], schedule.alpha[t - 1], schedule.alpha_bar[t - 1]
    if parameterization == "eps":
        return (x_t - beta / np.sqrt(1.0 - ab) * x0_hat) / np.sqrt(alpha)
    if parameterization == "x0":
        ab_prev = float(schedule.alpha_bar_prev(t))
        c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
        ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
        return c0 * x0_hat + ct * x_t
    raise ConfigError(f"unknown parameterization {parameterization!r}")


def posterior_variance(t: int, schedule) -> float:
    ab_prev = float(schedule.alpha_bar_prev(t))
    return (1.0 - ab_prev) / (1.0 - schedule.alpha_bar[t - 1]) * schedule.beta[t - 1]


def reverse_denoise(x0, schedule, e_c, denoiser, mode="deterministic", rng=None,
                    parameterization="x0", noise=None, batch_size=8192):
    """Noise x_0 up to x_T, then run the T-step conditional reverse chain."""
    if mode not in ("deterministic", "stochastic"):
        raise ConfigError(f"unknown mode {mode!r}")
    denoiser.check_finite()
    x0 = np.asarray(x0)
    e_c = np.asarray(e_c)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    x, _ = q_sample(x0, schedule.T, schedule, rng, noise=noise)
    x = x.astype(np.float64)
    for t in range(schedule.T, 0, -1):
        pred = np.empty_like(x)
        for s in range(0, len(x), batch_size):
            sl = slice(s, s + batch_size)
            pred[sl] = denoiser(x[sl], t, e_c[sl]).data
        x = posterior_mean(x, pred, t, schedule, parameterization)
        if mode == "stochastic" and t > 1:
            x = x + np.sqrt(posterior_variance(t, schedule)) * rng.standard_normal(x.shape)
    if not np.all(np.isfinite(x)):
        raise TrainingAborted("reverse diffusion produced non-finite features")
    return x.astype(x0.dtype)


@dataclass
class DenoisedFeatures:
    features: dict  # modality -> |I| x d_m
    omega: float


def blend(x0, x0_hat, omega: float):
    if not 0.0 <= omega <= 1.0:
        raise ConfigError(f"blend weight must lie in [0, 1], got {omega}")
    if omega == 0.0:
        return x0
    if isinstance(x0, Tensor) or isinstance(x0_hat, Tensor):
        return ag.add(ag.scale(x0, 1.0 - omega), ag.scale(x0_hat, omega))
    return (1.0 - omega) * np.asarray(x0) + omega * np.asarray(x0_hat)


def modality_align_loss(e_text, e_visual, tau=0.2, proj_text=None, proj_visual=None,
                        normalize=True):
    """In-batch InfoNCE: text row i against all visual rows, positive on the diagonal."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    e_text, e_visual = ag.as_tensor(e_text), ag.as_tensor(e_visual)
    if e_text.shape[0] != e_visual.shape[0]:
        raise ValueError("modality batches must cover the same items")
    if e_text.shape[0] < 2:
        log.warning("alignment batch of size %d has no negatives; returning 0", e_text.shape[0])
        return Tensor(np.zeros((), dtype=e_text.data.dtype))
    zt = e_text @ proj_text if proj_text is not None else e_text
    zv = e_visual @ proj_visual if proj_visual is not None else e_visual
    if normalize:
        zt, zv = ag.row_normalize(zt), ag.row_normalize(zv)
    logits = ag.scale(zt @ ag.transpose(zv), 1.0 / tau)
    return ag.cross_entropy_diag(logits)

