"""Local alignment: next-state beta-VAE, inverse dynamics and the action prior.

Also holds the ablation baselines (action-predicting VAE behaviour cloning and
a plain MLP next-state predictor) and the goal-space projection used when the
imitator's state space is larger than the demonstrator's.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .envs import DemoSet, Trajectory
from .errors import ContractError, DimensionError
from .nn import Adam, DiagGaussian, Tensor, make_mlp

log = logging.getLogger(__name__)

DEFAULT_BETA = 0.05
DEFAULT_SIGMA = 0.1


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, floor: float = 1e-6) -> Standardizer:
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), floor))

    @classmethod
    def identity(cls, dim: int) -> Standardizer:
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, y):
        return np.asarray(y) * self.std + self.mean


def _minibatches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch):
        yield order[lo:lo + batch]


# --------------------------------------------------------------------------- #
# Goal-space projection
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class GoalProjector:
    """Fixed selection of state coordinates that make up the goal space."""

    state_dim: int
    indices: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        if not self.indices or max(self.indices) >= self.state_dim or min(self.indices) < 0:
            raise ContractError(f"indices {self.indices} out of range for state_dim {self.state_dim}")

    @classmethod
    def identity(cls, state_dim: int) -> GoalProjector:
        return cls(state_dim, tuple(range(state_dim)))

    @property
    def goal_dim(self) -> int:
        return len(self.indices)

    @property
    def is_identity(self) -> bool:
        return self.indices == tuple(range(self.state_dim))

    def project(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] != self.state_dim:
            raise ContractError(f"projector expects state_dim {self.state_dim}, got shape {s.shape}")
        return s[..., list(self.indices)]

    def pad(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if g.shape[-1] != self.goal_dim:
            raise ContractError(f"goal vector has {g.shape[-1]} entries, projector has {self.goal_dim}")
        out = np.zeros(g.shape[:-1] + (self.state_dim,))
        out[..., list(self.indices)] = g
        return out


# --------------------------------------------------------------------------- #
# State-predictive beta-VAE
# --------------------------------------------------------------------------- #


class StateVAE:
    """Encoder q(z | s_t), decoder p(s_{t+1} | z).

    Both ends work in standardized coordinates fitted on the training states.
    The decoder likelihood is Gaussian with a fixed per-dimension std
    ``obs_scale`` (in standardized units); :func:`train_vae` sets it to the
    typical one-step displacement, i.e. unit variance in step-scaled units.
    """

    def __init__(self, state_dim: int, latent_dim: int | None = None, beta: float = DEFAULT_BETA,
                 hidden: int = 64, depth: int = 3, rng: np.random.Generator | None = None):
        if beta < 0:
            raise ContractError(f"beta must be >= 0, got {beta}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.latent_dim = latent_dim or max(2, state_dim // 2)
        self.beta = float(beta)
        self.encoder = make_mlp(state_dim, 2 * self.latent_dim, hidden, depth, rng)
        self.decoder = make_mlp(self.latent_dim, state_dim, hidden, depth, rng)
        self.norm = Standardizer.identity(state_dim)
        self.obs_scale = np.ones(state_dim)
        self.history: list[float] = []

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def fit_normalization(self, s_t: np.ndarray, s_next: np.ndarray) -> None:
        self.norm = Standardizer.fit(np.vstack([s_t, s_next]))
        step = np.maximum(np.sqrt(np.mean((s_next - s_t) ** 2, axis=0)), 1e-3 * self.norm.std)
        self.obs_scale = step / self.norm.std

    def encode(self, s) -> tuple[Tensor, Tensor]:
        h = self.encoder(self.norm(s))
        d = self.latent_dim
        return h[..., :d], nn.clip(h[..., d:], nn.LOG_STD_MIN, nn.LOG_STD_MAX)

    def loss_terms(self, s_t, s_next, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        """(reconstruction, KL) as batch means, on the tape."""
        s_t = np.atleast_2d(s_t)
        target = self.norm(np.atleast_2d(s_next))
        mu, log_std = self.encode(s_t)
        eps = rng.standard_normal(mu.shape)
        z = mu + nn.texp(log_std) * eps
        diff = (self.decoder(z) - target) * (1.0 / self.obs_scale)
        recon = (diff * diff).sum(axis=-1).mean() * 0.5
        kl = nn.kl_tensor(mu, log_std, np.zeros(mu.shape), np.zeros(mu.shape)).mean()
        return recon, kl

    def predict_next(self, s, mode: str = "mean_latent", rng: np.random.Generator | None = None) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        h = self.encoder.predict(self.norm(s))
        mu, log_std = h[..., :self.latent_dim], np.clip(h[..., self.latent_dim:], nn.LOG_STD_MIN, nn.LOG_STD_MAX)
        if mode == "mean_latent":
            z = mu
        elif mode == "sampled":
            rng = rng if rng is not None else np.random.default_rng()
            z = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        else:
            raise ContractError(f"unknown prediction mode {mode!r}")
        return self.norm.inverse(self.decoder.predict(z))

    def reconstruction_error(self, s_t, s_next) -> float:
        """Mean squared error of the mean-latent prediction, in raw state units."""
        return float(np.mean((self.predict_next(s_t) - s_next) ** 2))


def vae_loss_terms(vae: StateVAE, s_t, s_next, rng: np.random.Generator) -> tuple[float, float]:
    recon, kl = vae.loss_terms(s_t, s_next, rng)
    return recon.item(), kl.item()


def vae_loss(vae: StateVAE, s_t, s_next, rng: np.random.Generator) -> float:
    recon, kl = vae_loss_terms(vae, s_t, s_next, rng)
    return recon + vae.beta * kl


def _fit_vae(vae: StateVAE, s_t: np.ndarray, s_next: np.ndarray, epochs: int, batch: int, lr: float,
             rng: np.random.Generator) -> StateVAE:
    opt = Adam(vae.parameters(), lr=lr)
    for _ in range(epochs):
        total, count = 0.0, 0
        for idx in _minibatches(len(s_t), batch, rng):
            recon, kl = vae.loss_terms(s_t[idx], s_next[idx], rng)
            loss = recon + kl * vae.beta
            opt.zero_grad()
            nn.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        vae.history.append(total / count)
    return vae


def demo_pairs(demos: DemoSet) -> tuple[np.ndarray, np.ndarray]:
    short = [t for t in demos.trajectories if len(t) < 2]
    if short:
        warnings.warn(f"skipping {len(short)} demo trajectories with fewer than 2 transitions", stacklevel=3)
    return demos.pairs(min_len=2)


def train_vae(demos: DemoSet, beta: float = DEFAULT_BETA, epochs: int = 500, seed: int = 0,
              batch: int = 64, lr: float = 1e-3, hidden: int = 64, depth: int = 3,
              latent_dim: int | None = None, projector: GoalProjector | None = None) -> StateVAE:
    """Fit a next-state VAE on the (s_t, s_{t+1}) pairs of ``demos``.

    With ``projector`` the VAE lives in goal space: both ends see projected states.
    """
    s_t, s_next = demo_pairs(demos)
    if projector is not None:
        s_t, s_next = projector.project(s_t), projector.project(s_next)
    rng = np.random.default_rng(seed)
    vae = StateVAE(s_t.shape[1], latent_dim, beta, hidden, depth, rng)
    vae.fit_normalization(s_t, s_next)
    return _fit_vae(vae, s_t, s_next, epochs, batch, lr, rng)


def vae_predict_next(vae: StateVAE, s_t, mode: str = "mean_latent", rng=None) -> np.ndarray:
    return vae.predict_next(s_t, mode, rng)


# --------------------------------------------------------------------------- #
# Inverse dynamics
# --------------------------------------------------------------------------- #


class InverseDynamics:
    """g_inv(s_t, target) -> action, where target is s_{t+1} or its goal-space projection.

    Inputs are featurized as ``[standardized s_t, scaled (target - P s_t)]``
    with ``P`` the goal projection (identity by default); the displacement
    feature keeps small steps from drowning in the absolute coordinates.
    """

    def __init__(self, state_dim: int, action_dim: int, projector: GoalProjector | None = None,
                 hidden: int = 64, depth: int = 3, rng: np.random.Generator | None = None):
        self.projector = projector or GoalProjector.identity(state_dim)
        if self.projector.state_dim != state_dim:
            raise ContractError(f"projector state_dim {self.projector.state_dim} != {state_dim}")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.net = make_mlp(state_dim + self.projector.goal_dim, action_dim, hidden, depth, rng)
        self.state_norm = Standardizer.identity(state_dim)
        self.disp_scale = np.ones(self.projector.goal_dim)
        self.heldout_mse = float("nan")
        self._opt: Adam | None = None

    @property
    def target_dim(self) -> int:
        return self.projector.goal_dim

    def features(self, s, target) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if s.shape[-1] != self.state_dim or target.shape[-1] != self.target_dim:
            raise DimensionError(f"inverse model expects ({self.state_dim}, {self.target_dim}), "
                                 f"got {s.shape} and {target.shape}")
        disp = (target - self.projector.project(s)) / self.disp_scale
        return np.concatenate([self.state_norm(s), disp], axis=-1)

    def __call__(self, s, target) -> np.ndarray:
        return self.net.predict(self.features(s, target))

    def fit_normalization(self, s: np.ndarray, target: np.ndarray) -> None:
        self.state_norm = Standardizer.fit(s)
        self.disp_scale = np.maximum((target - self.projector.project(s)).std(axis=0), 1e-6)

    def train_epochs(self, s, target, a, epochs: int, rng: np.random.Generator, batch: int = 64,
                     lr: float = 1e-3) -> float:
        if self._opt is None:
            self._opt = Adam(self.net.parameters(), lr=lr)
        x = self.features(s, target)
        last = float("nan")
        for _ in range(epochs):
            total = 0.0
            for idx in _minibatches(len(x), batch, rng):
                diff = self.net(x[idx]) - a[idx]
                loss = (diff * diff).sum(axis=-1).mean()
                self._opt.zero_grad()
                nn.backward(loss)
                self._opt.step()
                total += loss.item() * len(idx)
            last = total / len(x)
        return last

    def mse(self, s, target, a) -> float:
        return float(np.mean(np.sum((self(s, target) - a) ** 2, axis=-1)))


def transition_arrays(data) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(s, a, s') arrays from trajectories, a DemoSet, or an (s, a, s') tuple."""
    if isinstance(data, DemoSet):
        data = data.trajectories
    if isinstance(data, tuple) and len(data) == 3:
        return tuple(np.asarray(x, dtype=np.float64) for x in data)
    trajs = [t for t in data if isinstance(t, Trajectory) and len(t)]
    return (np.vstack([t.states for t in trajs]), np.vstack([t.actions for t in trajs]),
            np.vstack([t.next_states for t in trajs]))


def train_inverse(transitions, epochs: int = 200, seed: int = 0, projector: GoalProjector | None = None,
                  holdout: float = 0.1, threshold: float | None = 0.05, hidden: int = 64, depth: int = 3,
                  batch: int = 64, lr: float = 1e-3) -> InverseDynamics:
    """Regress actions on (s_t, s_{t+1}); reports MSE on a held-out slice.

    ``threshold`` only triggers a logged warning: some environments (walls,
    disabled actuators) are not fully invertible.
    """
    s, a, s_next = transition_arrays(transitions)
    if len(s) < 100:
        raise ContractError(f"train_inverse needs >= 100 transitions, got {len(s)}")
    rng = np.random.default_rng(seed)
    inv = InverseDynamics(s.shape[1], a.shape[1], projector, hidden, depth, rng)
    target = inv.projector.project(s_next)
    order = rng.permutation(len(s))
    n_hold = max(1, int(round(holdout * len(s))))
    hold, fit = order[:n_hold], order[n_hold:]
    inv.fit_normalization(s[fit], target[fit])
    inv.train_epochs(s[fit], target[fit], a[fit], epochs, rng, batch, lr)
    inv.heldout_mse = inv.mse(s[hold], target[hold], a[hold])
    if threshold is not None and inv.heldout_mse > threshold:
        log.warning("inverse dynamics held-out MSE %.4g above threshold %.4g", inv.heldout_mse, threshold)
    return inv


def update_inverse(inv: InverseDynamics, transitions, epochs: int = 1, seed: int = 0) -> float:
    """Fine-tune on fresh transitions, keeping the fitted normalization and optimizer state."""
    s, a, s_next = transition_arrays(transitions)
    return inv.train_epochs(s, inv.projector.project(s_next), a, epochs, np.random.default_rng(seed))


# --------------------------------------------------------------------------- #
# Action prior
# --------------------------------------------------------------------------- #


@dataclass
class ActionPrior:
    """p_a(a | s): Gaussian centred at g_inv(s, f(s)) with fixed std ``sigma``.

    With a non-identity ``inv.projector`` the VAE predicts the next goal-space
    point from the projected state and the inverse model decodes it.
    """

    vae: StateVAE
    inv: InverseDynamics
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")
        if self.vae.state_dim != self.inv.target_dim:
            raise ContractError(f"VAE predicts {self.vae.state_dim}-d states, inverse model expects "
                                f"{self.inv.target_dim}-d targets")

    @property
    def projector(self) -> GoalProjector:
        return self.inv.projector

    @property
    def action_dim(self) -> int:
        return self.inv.action_dim

    def means(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        target = self.vae.predict_next(self.projector.project(states), "mean_latent")
        return self.inv(states, target)

    @property
    def log_std(self) -> np.ndarray:
        return np.full(self.action_dim, np.log(self.sigma))

    def at(self, s) -> DiagGaussian:
        return DiagGaussian(self.means(np.asarray(s)[None, :])[0], self.log_std)


def prior_at(prior: ActionPrior, s_t) -> DiagGaussian:
    return prior.at(s_t)


def goal_space_prior(projector: GoalProjector, goal_vae: StateVAE, inv: InverseDynamics, s_t,
                     sigma: float = DEFAULT_SIGMA) -> DiagGaussian:
    s_t = np.asarray(s_t, dtype=np.float64)
    if s_t.shape[-1] != projector.state_dim:
        raise ContractError(f"state has {s_t.shape[-1]} dims, projector expects {projector.state_dim}")
    if goal_vae.state_dim != projector.goal_dim or inv.target_dim != projector.goal_dim:
        raise ContractError(f"goal VAE ({goal_vae.state_dim}) / inverse target ({inv.target_dim}) "
                            f"do not match goal space ({projector.goal_dim})")
    subgoal = goal_vae.predict_next(projector.project(s_t)[None, :], "mean_latent")
    mean = inv(s_t[None, :], subgoal)[0]
    return DiagGaussian(mean, np.full(inv.action_dim, np.log(sigma)))


# --------------------------------------------------------------------------- #
# Ablation baselines
# --------------------------------------------------------------------------- #


class ActionVAEPolicy:
    """beta-VAE that encodes s_t and decodes a_t; acts with the mean-latent decode."""

    def __init__(self, state_dim: int, action_dim: int, latent_dim: int | None = None, beta: float = DEFAULT_BETA,
                 hidden: int = 64, depth: int = 3, rng: np.random.Generator | None = None):
        self.vae = StateVAE(state_dim, latent_dim, beta, hidden, depth, rng)
        # decoder maps latent -> action instead of latent -> state
        self.vae.decoder = make_mlp(self.vae.latent_dim, action_dim, hidden, depth, rng)
        self.action_norm = Standardizer.identity(action_dim)

    def loss_terms(self, s, a, rng) -> tuple[Tensor, Tensor]:
        mu, log_std = self.vae.encode(np.atleast_2d(s))
        z = mu + nn.texp(log_std) * rng.standard_normal(mu.shape)
        diff = self.vae.decoder(z) - self.action_norm(np.atleast_2d(a))
        recon = (diff * diff).sum(axis=-1).mean() * 0.5
        kl = nn.kl_tensor(mu, log_std, np.zeros(mu.shape), np.zeros(mu.shape)).mean()
        return recon, kl

    def mean_action(self, states) -> np.ndarray:
        h = self.vae.encoder.predict(self.vae.norm(states))
        return self.action_norm.inverse(self.vae.decoder.predict(h[..., :self.vae.latent_dim]))

    def act(self, state, rng=None, deterministic: bool = True) -> np.ndarray:
        return self.mean_action(np.asarray(state)[None, :])[0]

    __call__ = act


def action_vae_bc(demos: DemoSet, beta: float = DEFAULT_BETA, seed: int = 0, epochs: int = 500,
                  batch: int = 64, lr: float = 1e-3, hidden: int = 64, depth: int = 3) -> ActionVAEPolicy:
    s, a = demos.state_actions()
    rng = np.random.default_rng(seed)
    pol = ActionVAEPolicy(s.shape[1], a.shape[1], None, beta, hidden, depth, rng)
    pol.vae.norm = Standardizer.fit(s)
    pol.action_norm = Standardizer.fit(a)
    opt = Adam(pol.vae.parameters(), lr=lr)
    for _ in range(epochs):
        for idx in _minibatches(len(s), batch, rng):
            recon, kl = pol.loss_terms(s[idx], a[idx], rng)
            loss = recon + kl * beta if beta > 0 else recon
            opt.zero_grad()
            nn.backward(loss)
            opt.step()
    return pol


class MlpStatePredictor:
    """Deterministic s_t -> s_{t+1} regressor with the VAE's encoder + decoder capacity."""

    def __init__(self, state_dim: int, hidden: int = 64, depth: int = 3, rng=None):
        self.net = make_mlp(state_dim, state_dim, hidden, 2 * depth, rng)
        self.norm = Standardizer.identity(state_dim)

    def predict_next(self, s, mode: str = "mean_latent", rng=None) -> np.ndarray:
        return self.norm.inverse(self.net.predict(self.norm(s)))

    @property
    def state_dim(self) -> int:
        return self.net.in_dim

    def reconstruction_error(self, s_t, s_next) -> float:
        return float(np.mean((self.predict_next(s_t) - s_next) ** 2))


def mlp_state_predictor(demos: DemoSet, seed: int = 0, epochs: int = 500, batch: int = 64, lr: float = 1e-3,
                        hidden: int = 64, depth: int = 3) -> MlpStatePredictor:
    s_t, s_next = demo_pairs(demos)
    rng = np.random.default_rng(seed)
    pred = MlpStatePredictor(s_t.shape[1], hidden, depth, rng)
    pred.norm = Standardizer.fit(np.vstack([s_t, s_next]))
    x, y = pred.norm(s_t), pred.norm(s_next)
    opt = Adam(pred.net.parameters(), lr=lr)
    for _ in range(epochs):
        for idx in _minibatches(len(x), batch, rng):
            diff = pred.net(x[idx]) - y[idx]
            loss = (diff * diff).sum(axis=-1).mean() * 0.5
            opt.zero_grad()
            nn.backward(loss)
            opt.step()
    return pred


__all__ = [
    "Standardizer", "GoalProjector", "StateVAE", "vae_loss", "vae_loss_terms", "train_vae", "vae_predict_next",
    "InverseDynamics", "train_inverse", "update_inverse", "transition_arrays", "ActionPrior", "prior_at",
    "goal_space_prior", "ActionVAEPolicy", "action_vae_bc", "MlpStatePredictor", "mlp_state_predictor",
    "DEFAULT_BETA", "DEFAULT_SIGMA",
]
