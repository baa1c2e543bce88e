"""The four networks: pose and translation regressors, gain and force nets.

The two keypoint-lifting networks are causal temporal convolution stacks
over a fixed 10-frame window (replication-padded residual blocks with
dilated kernels). The gain network is a two-headed MLP whose sigmoid/tanh
heads keep the PD gains and offset forces inside fixed normalised ranges by
construction; the contact-force network is a plain ReLU MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backend import value_of
from .dynamics import EmptyContacts


class BadWindowShape(ValueError):
    """Input window does not match the configured (channels, frames) shape."""


@dataclass(frozen=True)
class CausalConvNetConfig:
    """Architecture of the temporal convolution stacks.

    Residual blocks keep the sequence length: the embedding pad matches its
    kernel and the residual pad matches its dilated kernel span. The window
    itself contains only current and past frames, so the stack never sees
    the future.
    """

    window: int = 10
    embed_kernel: int = 3
    residual_kernel: int = 5
    dilation: int = 2
    residual_blocks: int = 4
    pad_embed: int = 1
    pad_residual: int = 4
    channels: int = 128

    def __post_init__(self):
        if self.pad_embed * 2 != self.embed_kernel - 1:
            raise ValueError("embedding pad must preserve the window length")
        if self.pad_residual * 2 != (self.residual_kernel - 1) * self.dilation:
            raise ValueError("residual pad must preserve the window length")


@dataclass
class GainOutput:
    """PD gains and offset forces, bounded by the head nonlinearities."""

    kp: object  # (n_v,), in (0, 2 kp_ini)
    alpha: object  # (n_v,), in (-gamma, gamma)
    s_g: object
    s_f: object


class Module:
    """Least possible structure: a named tree of parameter tensors."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
        for name, child in self._children():
            out.update(child.named_parameters(prefix + name + "."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_training(self, flag: bool):
        for attr in vars(self).values():
            if isinstance(attr, Module):
                attr.set_training(flag)
            elif isinstance(attr, (list, tuple)):
                for item in attr:
                    if isinstance(item, Module):
                        item.set_training(flag)
        if hasattr(self, "training"):
            self.training = flag

    def state_dict(self, prefix: str = ""):
        out = {name: p.numpy() for name, p in self.named_parameters(prefix).items()}
        for name, child in self._children():
            for key, val in child.state_dict().items():
                out.setdefault(prefix + name + "." + key, val)
        out.update(self._extra_state(prefix))
        return out

    def _extra_state(self, prefix: str = ""):
        return {}

    def load_state_dict(self, state: dict, prefix: str = ""):
        params = self.named_parameters(prefix)
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"checkpoint missing parameter {name}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()
            p.grad = None
        self._load_extra_state(state, prefix)

    def _load_extra_state(self, state: dict, prefix: str = ""):
        for name, child in self._children():
            child._load_extra_state(state, prefix + name + ".")


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, in_features: int, out_features: int, zero_init: bool = False):
        if zero_init:
            w = np.zeros((out_features, in_features))
        else:
            w = _he_uniform(rng, (out_features, in_features), in_features)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x):
        return x @ ad.transpose(self.weight) + self.bias


class Conv1d(Module):
    def __init__(self, rng, in_channels: int, out_channels: int, kernel: int, dilation: int = 1):
        fan_in = in_channels * kernel
        self.weight = Tensor(_he_uniform(rng, (out_channels, in_channels, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.dilation = dilation

    def __call__(self, x):
        return ad.conv1d(x, self.weight, self.bias, dilation=self.dilation)


class BatchNorm1d(Module):
    """Per-channel normalisation over (batch, time); running stats in eval.

    Training batches normalise with their own statistics and update the
    running estimates; the per-frame refinement path runs in eval mode so
    outputs depend only on the stored statistics (and stay causal).
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, gamma_init: float = 1.0):
        self.gamma = Tensor(np.full(channels, float(gamma_init)), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.training = False

    def __call__(self, x):
        if self.training:
            mean = ad.tmean(x, axis=(0, 2), keepdims=True)
            centered = x - mean
            var = ad.tmean(centered * centered, axis=(0, 2), keepdims=True)
            self.running_mean = (
                (1.0 - self.momentum) * self.running_mean + self.momentum * value_of(mean).reshape(-1)
            )
            self.running_var = (
                (1.0 - self.momentum) * self.running_var + self.momentum * value_of(var).reshape(-1)
            )
            norm = centered * (var + self.eps) ** -0.5
        else:
            mean = self.running_mean.reshape(1, -1, 1)
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            norm = (x - mean) * scale.reshape(1, -1, 1)
        return norm * ad.reshape(self.gamma, (1, -1, 1)) + ad.reshape(self.beta, (1, -1, 1))

    def _extra_state(self, prefix: str = ""):
        return {
            prefix + "running_mean": self.running_mean.copy(),
            prefix + "running_var": self.running_var.copy(),
        }

    def _load_extra_state(self, state: dict, prefix: str = ""):
        self.running_mean = np.asarray(state[prefix + "running_mean"], dtype=np.float64).copy()
        self.running_var = np.asarray(state[prefix + "running_var"], dtype=np.float64).copy()


class _ConvBlock(Module):
    def __init__(self, rng, in_channels, out_channels, kernel, dilation, pad, gamma_init: float = 1.0):
        self.pad = pad
        self.conv = Conv1d(rng, in_channels, out_channels, kernel, dilation)
        self.bn = BatchNorm1d(out_channels, gamma_init=gamma_init)

    def __call__(self, x):
        y = ad.replication_pad1d(x, self.pad)
        return ad.relu(self.bn(self.conv(y)))


class TemporalConvNet(Module):
    """Embedding block, dilated residual blocks, linear head on the last frame."""

    def __init__(self, rng, in_channels: int, out_dim: int, cfg: CausalConvNetConfig):
        self.cfg = cfg
        self.embed = _ConvBlock(rng, in_channels, cfg.channels, cfg.embed_kernel, 1, cfg.pad_embed)
        # residual blocks start near identity (small normalisation scale), so
        # the stack trains head-first and engages depth progressively; the
        # scale must stay nonzero or the rectifier gates every gradient
        self.blocks = [
            _ConvBlock(rng, cfg.channels, cfg.channels, cfg.residual_kernel, cfg.dilation, cfg.pad_residual, gamma_init=0.1)
            for _ in range(cfg.residual_blocks)
        ]
        self.head = Linear(rng, cfg.channels, out_dim)
        self.in_channels = in_channels

    def __call__(self, x):
        shape = value_of(x).shape
        if len(shape) != 3 or shape[1] != self.in_channels or shape[2] != self.cfg.window:
            raise BadWindowShape(
                f"expected (B, {self.in_channels}, {self.cfg.window}), got {shape}"
            )
        y = self.embed(x)
        for block in self.blocks:
            y = block(y) + y
        return self.head(y[:, :, -1])


def _normalize_rows(q):
    # the epsilon guards the (degenerate) all-zero row at initialisation
    nsq = ad.tsum(q * q, axis=1, keepdims=True) + 1e-24
    return q * nsq**-0.5


class PoseNet(Module):
    """Root orientation, joint angles and contact labels from root-relative
    keypoint windows; three replicated stacks differing in the output head."""

    def __init__(self, rng, n_keypoints: int, n_angles: int, cfg: CausalConvNetConfig):
        in_ch = 2 * n_keypoints
        self.ori_net = TemporalConvNet(rng, in_ch, 4, cfg)
        self.angle_net = TemporalConvNet(rng, in_ch, n_angles, cfg)
        self.contatrans_net = TemporalConvNet(rng, in_ch, 4, cfg)
        # start the orientation head at the identity rotation, keeping the
        # normalised output well-defined whatever the trunk emits
        self.ori_net.head.bias.data = np.array([1.0, 0.0, 0.0, 0.0])

    def __call__(self, krr_window):
        ori = _normalize_rows(self.ori_net(krr_window))
        angles = self.angle_net(krr_window)
        contact_probs = ad.sigmoid(self.contatrans_net(krr_window))
        return ori, angles, contact_probs


class TransNet(Module):
    """Global translation from root-relative 3D joints plus canonical keypoints."""

    def __init__(self, rng, n_keypoints: int, cfg: CausalConvNetConfig):
        self.trans_net = TemporalConvNet(rng, 5 * n_keypoints, 3, cfg)

    def __call__(self, prr_kc_window):
        return self.trans_net(prr_kc_window)


class GainNet(Module):
    """Two-headed MLP producing per-DoF gains and offset forces.

    The output layer is zero-initialised: before any training the sigmoid
    head sits at 0.5 (gains equal their baseline) and the tanh head at 0
    (no offset force).
    """

    def __init__(self, rng, in_features: int, n_v: int, hidden: int = 512):
        self.fc1 = Linear(rng, in_features, hidden)
        self.fc2 = Linear(rng, hidden, hidden)
        self.head_gain = Linear(rng, hidden, n_v, zero_init=True)
        self.head_force = Linear(rng, hidden, n_v, zero_init=True)

    def __call__(self, features, kp_ini, gamma: float = 10.0) -> GainOutput:
        h = ad.relu(self.fc1(features))
        h = ad.relu(self.fc2(h))
        s_g = ad.sigmoid(self.head_gain(h))
        # float64 saturates the sigmoid to exactly 0/1 for |x| > ~37; nudge
        # back inside so the gains stay strictly within (0, 2 kp_ini)
        s_g = ad.maximum(-ad.maximum(-s_g, -(1.0 - 1e-12)), 1e-12)
        s_f = ad.tanh(self.head_force(h))
        kp = 2.0 * s_g * kp_ini
        alpha = gamma * s_f
        return GainOutput(kp=kp, alpha=alpha, s_g=s_g, s_f=s_f)


class ContactForceNet(Module):
    """Ground-reaction forces per contact site from contact-state features.

    Four fully-connected layers, ReLU on all but the output. The output
    covers every site; callers select the 3-vectors of the active subset.
    The output layer is zero-initialised so an untrained net applies no
    force at all.
    """

    def __init__(self, rng, in_features: int, n_sites: int = 4, hidden: int = 512):
        self.fc1 = Linear(rng, in_features, hidden)
        self.fc2 = Linear(rng, hidden, hidden)
        self.fc3 = Linear(rng, hidden, hidden)
        self.out = Linear(rng, hidden, 3 * n_sites, zero_init=True)
        self.n_sites = n_sites

    def __call__(self, features, active_sites):
        """Forces for the active sites, stacked (3 * n_active,)."""
        active = list(active_sites)
        if not active:
            raise EmptyContacts("contact force net needs at least one active site")
        h = ad.relu(self.fc1(features))
        h = ad.relu(self.fc2(h))
        h = ad.relu(self.fc3(h))
        full = self.out(h)
        parts = [full[3 * s : 3 * s + 3] for s in active]
        return ad.concat(parts) if len(parts) > 1 else parts[0]


def save_networks(path, nets: dict):
    """One checkpoint holding every network, keys namespaced by role."""
    state = {}
    for role, net in nets.items():
        for key, val in net.state_dict().items():
            state[f"{role}/{key}"] = val
    ad.save_checkpoint(path, state)


def load_networks(path, nets: dict):
    state = ad.load_checkpoint(path)
    for role, net in nets.items():
        sub = {k[len(role) + 1 :]: v for k, v in state.items() if k.startswith(role + "/")}
        if not sub:
            raise ad.CheckpointError(f"checkpoint has no tensors for network {role!r}")
        net.load_state_dict(sub)
    return nets
