"""Policy/value network with per-component logit heads.

Fixed architecture: two 3x3 padded convolutions (in -> 32 -> 64), flatten,
two shared linear layers (1024, 512), then an actor head (linear 256 ->
linear total-logits, split per component) and a single-output critic head.
ReLU everywhere except the output layers.

Parameters are float32 for training; `to_double()` yields a float64 clone
for finite-difference work.  Initialisation is scaled-orthogonal, seeded
through a numpy generator, so a fixed seed gives bit-identical weights.
Checkpoints use a small named-tensor container (see `save_checkpoint`).
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np
import torch
from torch import nn as tnn

__all__ = [
    "PolicyValueNet",
    "backward",
    "RMSPropState",
    "rmsprop_step",
    "save_checkpoint",
    "load_checkpoint",
    "orthogonal_init",
]

CHECKPOINT_MAGIC = b"CATRLCK1"


def orthogonal_init(shape: Sequence[int], gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal weight matrix for a (fan_out, fan_in...) shaped tensor."""
    fan_out = shape[0]
    fan_in = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(fan_out, fan_in), min(fan_out, fan_in)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix the sign ambiguity
    if fan_out < fan_in:
        q = q.T
    return (gain * q[:fan_out, :fan_in]).reshape(shape).astype(np.float32)


class PolicyValueNet(tnn.Module):
    """Maps (batch, H, W, channels) observations to per-component logits + value."""

    def __init__(self, obs_shape: tuple[int, int, int], arities: Sequence[int],
                 seed: int = 0):
        super().__init__()
        h, w, c = obs_shape
        self.obs_shape = (h, w, c)
        self.arities = tuple(int(a) for a in arities)
        if not self.arities:
            raise ValueError("need at least one action component")
        total = sum(self.arities)

        self.conv1 = tnn.Conv2d(c, 32, kernel_size=3, padding=1)
        self.conv2 = tnn.Conv2d(32, 64, kernel_size=3, padding=1)
        self.fc1 = tnn.Linear(h * w * 64, 1024)
        self.fc2 = tnn.Linear(1024, 512)
        self.actor_fc = tnn.Linear(512, 256)
        self.actor_out = tnn.Linear(256, total)
        self.critic_out = tnn.Linear(512, 1)
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E657477]))
        gains = {
            "conv1": np.sqrt(2), "conv2": np.sqrt(2),
            "fc1": np.sqrt(2), "fc2": np.sqrt(2), "actor_fc": np.sqrt(2),
            "actor_out": 0.01,  # near-uniform initial policy
            "critic_out": 1.0,
        }
        for name, module in self.named_children():
            w = orthogonal_init(tuple(module.weight.shape), gains[name], rng)
            with torch.no_grad():
                module.weight.copy_(torch.from_numpy(w))
                module.bias.zero_()

    def forward(self, obs: torch.Tensor | np.ndarray) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Returns ([batch, arity_k] logits per component, [batch] values)."""
        if isinstance(obs, np.ndarray):
            obs = torch.from_numpy(np.ascontiguousarray(obs, dtype=np.float32))
        if obs.dim() != 4 or tuple(obs.shape[1:]) != self.obs_shape:
            raise ValueError(
                f"observation batch shape {tuple(obs.shape)} does not match "
                f"(batch, {self.obs_shape[0]}, {self.obs_shape[1]}, {self.obs_shape[2]})"
            )
        if not torch.isfinite(obs).all():
            raise ValueError("observations contain NaN or Inf")
        dtype = self.fc1.weight.dtype
        x = obs.to(dtype).permute(0, 3, 1, 2)
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        x = x.flatten(1)
        x = torch.relu(self.fc1(x))
        x = torch.relu(self.fc2(x))
        a = self.actor_out(torch.relu(self.actor_fc(x)))
        value = self.critic_out(x).squeeze(-1)
        if not torch.isfinite(a).all() or not torch.isfinite(value).all():
            raise ValueError("network produced non-finite outputs")
        return list(torch.split(a, list(self.arities), dim=1)), value

    @torch.no_grad()
    def act_logits(self, obs: np.ndarray) -> tuple[list[np.ndarray], float]:
        """Single-observation forward for actors: float64 logit groups + value."""
        groups, value = self.forward(obs[None])
        return [g[0].numpy().astype(np.float64) for g in groups], float(value[0])

    def to_double(self) -> "PolicyValueNet":
        clone = PolicyValueNet(self.obs_shape, self.arities, seed=0)
        clone.load_state_dict({k: v.clone() for k, v in self.state_dict().items()})
        return clone.double()

    def clone_state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}


def backward(model: tnn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss for every model parameter, by name.

    The graph is retained so a second call from the same forward pass
    reproduces the same gradients.
    """
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to the model; run a forward pass first")
    model.zero_grad(set_to_none=True)
    loss.backward(retain_graph=True)
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
    return grads


class RMSPropState:
    """Per-parameter running average of squared gradients."""

    def __init__(self, model: tnn.Module):
        self.square_avg = {
            name: torch.zeros_like(p) for name, p in model.named_parameters()
        }

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {f"rmsprop/{k}": v for k, v in self.square_avg.items()}


def rmsprop_step(model: tnn.Module, grads: dict[str, torch.Tensor], state: RMSPropState,
                 lr: float = 5e-4, decay: float = 0.99, eps: float = 1e-5) -> None:
    """In-place RMSProp update; rejects non-finite gradients."""
    params = dict(model.named_parameters())
    if set(params) != set(grads):
        raise ValueError("gradient names do not match model parameters")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter "
                             f"shape {tuple(p.shape)} for {name}")
        if not torch.isfinite(g).all():
            raise ValueError(f"non-finite gradient for parameter {name}")
        sq = state.square_avg[name]
        sq.mul_(decay).addcmul_(g, g, value=1.0 - decay)
        with torch.no_grad():
            p.addcdiv_(g, sq.sqrt().add(eps), value=-lr)


def save_checkpoint(fh: BinaryIO, tensors: dict[str, torch.Tensor]) -> None:
    """Named-tensor container: magic, count, then per tensor a length-prefixed
    UTF-8 name, a shape header, and raw little-endian float32 data."""
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        data = tensors[name].detach().cpu().to(torch.float32).numpy()
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(data.astype("<f4").tobytes())


def load_checkpoint(fh: BinaryIO) -> dict[str, torch.Tensor]:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (magic {magic!r})")
    (count,) = struct.unpack("<I", fh.read(4))
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        numel = int(np.prod(shape)) if ndim else 1
        raw = fh.read(4 * numel)
        if len(raw) != 4 * numel:
            raise ValueError(f"checkpoint truncated while reading tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        out[name] = torch.from_numpy(arr)
    return out
