"""Alternating first-order trainer over the (phi, theta) parameter split.

Each iteration runs, in order: an inner descent step on the reconstruction
objective touching phi only, an outer descent step on the fusion objective
touching theta only, then an exponential-moving-average update of the theta
shadow. Inner rates exceed outer rates so representations adapt faster than
the fusion strategy tracking them.
"""

import hashlib
import warnings

import torch

from .errors import ConfigError, NumericsError
from .losses import LossBreakdown


def tensor_checksum(named_tensors: dict) -> str:
    """Order-independent digest of a name->tensor mapping (bit-exact)."""
    h = hashlib.sha256()
    for name in sorted(named_tensors):
        t = named_tensors[name]
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _as_breakdown(result) -> LossBreakdown:
    if isinstance(result, LossBreakdown):
        return result
    return LossBreakdown(total=result, terms={"loss": result}, weights={"loss": 1.0})


def _check_finite(breakdown: LossBreakdown, params: dict, label: str):
    if torch.isfinite(breakdown.total).all():
        return
    for name, term in breakdown.terms.items():
        if not torch.isfinite(term).all():
            raise NumericsError(
                f"non-finite {label} loss: term '{name}' is not finite",
                tensor_name=f"{label}.{name}",
            )
    for name, p in params.items():
        if not torch.isfinite(p).all():
            raise NumericsError(
                f"non-finite {label} loss: parameter '{name}' is not finite",
                tensor_name=name,
            )
    raise NumericsError(f"non-finite {label} loss", tensor_name=f"{label}.total")


def _make_optimizer(kind, params, lr):
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise ConfigError(f"unknown optimizer '{kind}'")


class _TrainerBase:
    def __init__(self, decay_factor, decay_every):
        if not (0.0 < decay_factor <= 1.0):
            raise ConfigError(f"decay factor must be in (0, 1], got {decay_factor}")
        if decay_every < 1:
            raise ConfigError("decay interval must be >= 1")
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.t = 0

    def _scheduled(self, base_rate):
        return base_rate * self.decay_factor ** (self.t // self.decay_every)

    @staticmethod
    def _set_lr(optimizer, lr):
        for group in optimizer.param_groups:
            group["lr"] = lr

    @staticmethod
    def _backward_and_step(optimizer, loss):
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()


class BilevelTrainer(_TrainerBase):
    """Sequential phi/theta updates with an EMA shadow of theta.

    ``rec_loss`` and ``fuse_loss`` are closures mapping a batch to a
    :class:`LossBreakdown`; the fuse closure is expected to detach the
    latents so phi gradients from the fusion objective are skipped.
    """

    def __init__(
        self,
        phi: dict,
        theta: dict,
        rec_loss,
        fuse_loss,
        eta_L=2e-4,
        eta_U=1e-4,
        alpha=0.999,
        optimizer="adam",
        decay_factor=0.98,
        decay_every=200,
        strict_rates=True,
    ):
        super().__init__(decay_factor, decay_every)
        if not (0.0 <= alpha < 1.0):
            raise ConfigError(f"EMA momentum must lie in [0, 1), got {alpha}")
        if eta_L <= eta_U:
            msg = f"inner rate {eta_L} must exceed outer rate {eta_U}"
            if strict_rates:
                raise ConfigError(msg)
            warnings.warn(msg)
        self.phi = dict(phi)
        self.theta = dict(theta)
        overlap = set(self.phi) & set(self.theta)
        if overlap:
            raise ConfigError(f"parameters registered in both partitions: {sorted(overlap)}")
        self.rec_loss = rec_loss
        self.fuse_loss = fuse_loss
        self.eta_L = eta_L
        self.eta_U = eta_U
        self.alpha = alpha
        self._phi_names = sorted(self.phi)
        self._theta_names = sorted(self.theta)
        self.opt_phi = _make_optimizer(optimizer, [self.phi[n] for n in self._phi_names], eta_L)
        self.opt_theta = _make_optimizer(
            optimizer, [self.theta[n] for n in self._theta_names], eta_U
        )
        self.theta_ema = {n: self.theta[n].detach().clone() for n in self._theta_names}

    def current_rates(self):
        return self._scheduled(self.eta_L), self._scheduled(self.eta_U)

    def inner_step(self, batch) -> LossBreakdown:
        """Descend the reconstruction objective; phi changes, theta does not."""
        breakdown = _as_breakdown(self.rec_loss(batch))
        _check_finite(breakdown, self.phi, "rec")
        self._set_lr(self.opt_phi, self._scheduled(self.eta_L))
        self._backward_and_step(self.opt_phi, breakdown.total)
        return breakdown

    def outer_step(self, batch) -> LossBreakdown:
        """Descend the fusion objective; theta changes, phi does not."""
        breakdown = _as_breakdown(self.fuse_loss(batch))
        _check_finite(breakdown, self.theta, "fuse")
        self._set_lr(self.opt_theta, self._scheduled(self.eta_U))
        self._backward_and_step(self.opt_theta, breakdown.total)
        return breakdown

    def ema_update(self):
        """theta_ema <- alpha * theta_ema + (1 - alpha) * theta, elementwise."""
        with torch.no_grad():
            for name in self._theta_names:
                self.theta_ema[name].mul_(self.alpha).add_(
                    self.theta[name], alpha=1.0 - self.alpha
                )

    def train_iteration(self, batch) -> dict:
        eta_l, eta_u = self.current_rates()
        rec = self.inner_step(batch)
        fuse = self.outer_step(batch)
        self.ema_update()
        self.t += 1
        return {
            "t": self.t,
            "rec": rec.detached(),
            "fuse": fuse.detached(),
            "eta_L": eta_l,
            "eta_U": eta_u,
        }

    def state_dict(self):
        return {
            "t": self.t,
            "theta_ema": {n: v.clone() for n, v in self.theta_ema.items()},
            "opt_phi": self.opt_phi.state_dict(),
            "opt_theta": self.opt_theta.state_dict(),
        }

    def load_state_dict(self, state):
        self.t = state["t"]
        for n in self._theta_names:
            self.theta_ema[n].copy_(state["theta_ema"][n])
        self.opt_phi.load_state_dict(state["opt_phi"])
        self.opt_theta.load_state_dict(state["opt_theta"])


class JointTrainer(_TrainerBase):
    """Single-loop baseline: one combined objective, one rate, one update.

    Used by the training-scheme ablations. An EMA shadow is still kept over
    the designated theta subset so inference-side handling stays uniform.
    """

    def __init__(
        self,
        params: dict,
        loss_fn,
        theta: dict | None = None,
        eta=2e-4,
        alpha=0.999,
        optimizer="adam",
        decay_factor=0.98,
        decay_every=200,
    ):
        super().__init__(decay_factor, decay_every)
        if not (0.0 <= alpha < 1.0):
            raise ConfigError(f"EMA momentum must lie in [0, 1), got {alpha}")
        self.params = dict(params)
        self.loss_fn = loss_fn
        self.eta = eta
        self.alpha = alpha
        self._names = sorted(self.params)
        self.opt = _make_optimizer(optimizer, [self.params[n] for n in self._names], eta)
        self.theta = dict(theta) if theta else {}
        self._theta_names = sorted(self.theta)
        self.theta_ema = {n: self.theta[n].detach().clone() for n in self._theta_names}

    def current_rates(self):
        rate = self._scheduled(self.eta)
        return rate, rate

    def ema_update(self):
        with torch.no_grad():
            for name in self._theta_names:
                self.theta_ema[name].mul_(self.alpha).add_(
                    self.theta[name], alpha=1.0 - self.alpha
                )

    def train_iteration(self, batch) -> dict:
        rate = self._scheduled(self.eta)
        breakdown = _as_breakdown(self.loss_fn(batch))
        _check_finite(breakdown, self.params, "joint")
        self._set_lr(self.opt, rate)
        self._backward_and_step(self.opt, breakdown.total)
        self.ema_update()
        self.t += 1
        return {"t": self.t, "joint": breakdown.detached(), "eta": rate}

    def state_dict(self):
        return {
            "t": self.t,
            "theta_ema": {n: v.clone() for n, v in self.theta_ema.items()},
            "opt": self.opt.state_dict(),
        }

    def load_state_dict(self, state):
        self.t = state["t"]
        for n in self._theta_names:
            self.theta_ema[n].copy_(state["theta_ema"][n])
        self.opt.load_state_dict(state["opt"])
