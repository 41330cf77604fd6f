"""Frozen diffusion UNet backbone and decoder-activation capture.

The backbone is either a desk-scale toy UNet built here or a checkpoint
loaded from disk. Either way the handle is frozen: feature extraction never
changes the weights, and the descriptor's ``weights_fingerprint`` (sha256
over all parameter bytes) makes that checkable.

Decoder blocks are numbered 1..decoder_block_count starting at the deepest
(lowest-resolution) block and counting upward toward the output. An
activation is the block's output *after* any upsampling attached to it, so
shapes always match the descriptor's geometry table. This is the capture
point all block/timestep coordinates in this package refer to.

Checkpoint adapter
------------------
``load_pretrained_backbone`` reads the package's own checkpoint schema::

    {"format": "dermprobe-backbone/1",
     "config": {"resolution", "base_channels", "channel_mult", "num_res_blocks"},
     "schedule": {"betas": [...]},
     "state_dict": {...}}   # tensor names of ToyUNet below

Externally trained weights must be converted to this tensor-name mapping
first. A checkpoint's embedded schedule always overrides the package
defaults.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import (
    CheckpointCorruptError,
    CheckpointMissingError,
    GeometryMismatchError,
    ImmutabilityError,
    ParameterError,
)
from .schedule import NoiseSchedule, build_linear_schedule, forward_noise

CHECKPOINT_FORMAT = "dermprobe-backbone/1"
_CHANNEL_MULT = (1, 2, 2, 4)
_NUM_RES_BLOCKS = 2


@dataclass(frozen=True)
class BlockSpec:
    """A decoder block index paired with a diffusion timestep."""

    block_index: int
    timestep: int


@dataclass(frozen=True)
class BackboneDescriptor:
    """Published geometry and provenance of a frozen backbone.

    ``geometry[i]`` is the (C, H, W) shape of decoder block ``i + 1``.
    """

    input_resolution: int
    decoder_block_count: int
    geometry: tuple[tuple[int, int, int], ...]
    schedule: NoiseSchedule
    weights_fingerprint: str | None
    activation_point: str = "decoder block output, after any attached upsampling"

    def __post_init__(self):
        if len(self.geometry) != self.decoder_block_count:
            raise ParameterError("geometry table length must equal decoder_block_count")
        spatial = [h for _, h, _ in self.geometry]
        channels = [c for c, _, _ in self.geometry]
        if any(b < a for a, b in zip(spatial, spatial[1:])):
            raise ParameterError("decoder spatial sizes must be non-decreasing")
        if any(b > a for a, b in zip(channels, channels[1:])):
            raise ParameterError("decoder channel counts must be non-increasing")

    def block_shape(self, block_index: int) -> tuple[int, int, int]:
        if not 1 <= block_index <= self.decoder_block_count:
            raise ParameterError(
                f"block_index {block_index} outside [1, {self.decoder_block_count}]"
            )
        return self.geometry[block_index - 1]


@dataclass(frozen=True)
class DecoderActivation:
    """One decoder block's activation for one image."""

    spec: BlockSpec
    data: np.ndarray  # (C, H, W) float32

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-np.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class _ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.op = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.op(x)


class _Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ToyUNet(nn.Module):
    """Reduced diffusion UNet: same encoder/decoder stage pattern as the
    full-scale lineage (residual blocks, skip concatenation, sinusoidal
    timestep conditioning), attention omitted."""

    def __init__(
        self,
        resolution: int,
        base_channels: int = 32,
        channel_mult: Sequence[int] = _CHANNEL_MULT,
        num_res_blocks: int = _NUM_RES_BLOCKS,
    ):
        super().__init__()
        self.resolution = resolution
        self.base_channels = base_channels
        self.channel_mult = tuple(channel_mult)
        self.num_res_blocks = num_res_blocks
        emb_dim = base_channels * 4
        self.time_embed = nn.Sequential(
            nn.Linear(base_channels, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.stem = nn.Conv2d(3, base_channels, 3, padding=1)

        skip_chs = [base_channels]
        ch = base_channels
        self.down_blocks = nn.ModuleList()
        for level, mult in enumerate(self.channel_mult):
            for _ in range(num_res_blocks):
                self.down_blocks.append(_ResBlock(ch, base_channels * mult, emb_dim))
                ch = base_channels * mult
                skip_chs.append(ch)
            if level != len(self.channel_mult) - 1:
                self.down_blocks.append(_Downsample(ch))
                skip_chs.append(ch)

        self.middle = nn.ModuleList([_ResBlock(ch, ch, emb_dim), _ResBlock(ch, ch, emb_dim)])

        # One decoder entry per skip, deepest first; entries that close a
        # stage (all but the shallowest) carry an upsample.
        self.up_blocks = nn.ModuleList()
        self.up_samples = nn.ModuleList()
        for level, mult in reversed(list(enumerate(self.channel_mult))):
            for i in range(num_res_blocks + 1):
                self.up_blocks.append(_ResBlock(ch + skip_chs.pop(), base_channels * mult, emb_dim))
                ch = base_channels * mult
                last_of_stage = i == num_res_blocks
                self.up_samples.append(_Upsample(ch) if last_of_stage and level != 0 else None)
        assert not skip_chs

        self.out_norm = _norm(ch)
        self.out_conv = nn.Conv2d(ch, 3, 3, padding=1)

    @property
    def decoder_block_count(self) -> int:
        return len(self.up_blocks)

    def decoder_geometry(self) -> tuple[tuple[int, int, int], ...]:
        rows = []
        size = self.resolution // 2 ** (len(self.channel_mult) - 1)
        for level, mult in reversed(list(enumerate(self.channel_mult))):
            for i in range(self.num_res_blocks + 1):
                if i == self.num_res_blocks and level != 0:
                    rows.append((self.base_channels * mult, size * 2, size * 2))
                    size *= 2
                else:
                    rows.append((self.base_channels * mult, size, size))
        return tuple(rows)

    def forward(self, x, t, collect: set[int] | None = None):
        """Predict the noise in ``x`` at timestep ``t``.

        When ``collect`` is given, also return {block_index: activation} for
        the requested decoder blocks.
        """
        emb = self.time_embed(_timestep_embedding(t, self.base_channels))
        h = self.stem(x)
        skips = [h]
        for block in self.down_blocks:
            h = block(h, emb) if isinstance(block, _ResBlock) else block(h)
            skips.append(h)
        for block in self.middle:
            h = block(h, emb)
        captured: dict[int, torch.Tensor] = {}
        for i, (block, up) in enumerate(zip(self.up_blocks, self.up_samples)):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if up is not None:
                h = up(h)
            if collect and (i + 1) in collect:
                captured[i + 1] = h
        eps = self.out_conv(F.silu(self.out_norm(h)))
        return (eps, captured) if collect is not None else eps


class FrozenBackbone:
    """Immutable handle around a UNet whose weights are frozen."""

    def __init__(self, net: ToyUNet, schedule: NoiseSchedule, origin: str):
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net
        self.origin = origin
        self.descriptor = BackboneDescriptor(
            input_resolution=net.resolution,
            decoder_block_count=net.decoder_block_count,
            geometry=net.decoder_geometry(),
            schedule=schedule,
            weights_fingerprint=fingerprint_weights(net),
        )

    @property
    def fingerprint(self) -> str:
        return self.descriptor.weights_fingerprint


def fingerprint_weights(net: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(net.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def _init_weights(net: nn.Module, seed: int) -> None:
    # Mirrors the default conv/linear init (U(+-1/sqrt(fan_in))) but drawn
    # from a local generator so construction is reproducible in isolation.
    gen = torch.Generator().manual_seed(seed)
    for module in net.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight[0].numel()
            bound = fan_in**-0.5
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)
    # Zero final conv: the untrained net predicts zero noise.
    with torch.no_grad():
        net.out_conv.weight.zero_()
        net.out_conv.bias.zero_()


def build_toy_backbone(
    resolution: int = 64,
    base_channels: int = 32,
    seed: int = 0,
    schedule: NoiseSchedule | None = None,
) -> FrozenBackbone:
    """Build a frozen desk-scale backbone with deterministic weights."""
    if not isinstance(resolution, (int, np.integer)) or resolution < 32 or resolution & (resolution - 1):
        raise ParameterError(f"resolution must be a power of two >= 32, got {resolution!r}")
    if base_channels < 4:
        raise ParameterError(f"base_channels must be >= 4, got {base_channels!r}")
    net = ToyUNet(int(resolution), int(base_channels))
    _init_weights(net, seed)
    return FrozenBackbone(net, schedule or build_linear_schedule(), origin="toy")


def collect_activations(
    backbone: FrozenBackbone,
    x0: np.ndarray,
    blocks: Sequence[BlockSpec],
    epsilon_seed: int,
) -> list[DecoderActivation]:
    """Noise ``x0`` at the blocks' shared timestep, run one denoising forward
    pass, and return the requested decoder activations.

    ``x0`` is (3, R, R) in [-1, 1]. All blocks must share one timestep; the
    noise is drawn from a generator seeded with ``epsilon_seed`` so results
    are bit-reproducible.
    """
    if not blocks:
        raise ParameterError("blocks must be non-empty")
    desc = backbone.descriptor
    timesteps = {b.timestep for b in blocks}
    if len(timesteps) != 1:
        raise ParameterError(f"all blocks must share one timestep, got {sorted(timesteps)}")
    t = timesteps.pop()
    if not 0 <= t <= desc.schedule.T:
        raise ParameterError(f"timestep {t} outside [0, {desc.schedule.T}]")
    for b in blocks:
        desc.block_shape(b.block_index)
    x0 = np.asarray(x0, dtype=np.float32)
    expected = (3, desc.input_resolution, desc.input_resolution)
    if x0.shape != expected:
        raise ParameterError(f"x0 shape {x0.shape} does not match backbone input {expected}")

    eps = np.random.default_rng(epsilon_seed).standard_normal(x0.shape).astype(np.float32)
    x_t = forward_noise(x0, t, eps, desc.schedule).astype(np.float32)
    with torch.no_grad():
        _, captured = backbone.net(
            torch.from_numpy(x_t)[None],
            torch.tensor([t]),
            collect={b.block_index for b in blocks},
        )
    out = []
    for b in blocks:
        data = captured[b.block_index][0].numpy().copy()
        assert data.shape == desc.block_shape(b.block_index)
        out.append(DecoderActivation(spec=b, data=data))
    return out


def train_toy_backbone(
    backbone: FrozenBackbone,
    images: np.ndarray,
    steps: int,
    seed: int = 0,
    learning_rate: float = 1e-3,
    batch_size: int = 8,
) -> tuple[FrozenBackbone, list[float]]:
    """Denoise-pretrain a copy of a toy backbone for ``steps`` Adam steps.

    Standard objective: mean squared error between predicted and true noise
    at uniformly drawn timesteps. Returns a new frozen handle plus the
    per-step loss trace; the input handle is never mutated. Pretrained
    (loaded) handles are immutable and cannot be retrained.
    """
    if backbone.origin != "toy":
        raise ImmutabilityError("only toy backbones can be denoise-trained; loaded handles are immutable")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ParameterError(f"images must be (N, 3, R, R), got {images.shape}")
    net = copy.deepcopy(backbone.net)
    schedule = backbone.descriptor.schedule
    losses: list[float] = []
    if steps > 0:
        for p in net.parameters():
            p.requires_grad_(True)
        net.train()
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
        data = torch.from_numpy(images)
        abar = torch.from_numpy(np.asarray(schedule.alphas_cumprod, dtype=np.float32))
        for _ in range(steps):
            idx = torch.randint(len(data), (batch_size,), generator=gen)
            t = torch.randint(1, schedule.T + 1, (batch_size,), generator=gen)
            eps = torch.randn(batch_size, *images.shape[1:], generator=gen)
            a = abar[t - 1][:, None, None, None]
            x_t = torch.sqrt(a) * data[idx] + torch.sqrt(1.0 - a) * eps
            loss = F.mse_loss(net(x_t, t), eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.item()))
    return FrozenBackbone(net, schedule, origin="toy"), losses


def save_backbone(backbone: FrozenBackbone, path) -> None:
    """Write a checkpoint in the adapter schema documented above."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": {
            "resolution": backbone.net.resolution,
            "base_channels": backbone.net.base_channels,
            "channel_mult": list(backbone.net.channel_mult),
            "num_res_blocks": backbone.net.num_res_blocks,
        },
        "schedule": {"betas": backbone.descriptor.schedule.betas.tolist()},
        "state_dict": backbone.net.state_dict(),
    }
    torch.save(payload, path)


def load_pretrained_backbone(path, expected: BackboneDescriptor | None = None) -> FrozenBackbone:
    """Load a frozen backbone from a checkpoint.

    The embedded schedule overrides package defaults. When ``expected`` is
    given, the checkpoint's geometry must match it exactly.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointMissingError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointCorruptError(f"cannot parse checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointCorruptError(
            f"checkpoint {path} is not in the {CHECKPOINT_FORMAT!r} schema"
        )
    try:
        cfg = payload["config"]
        betas = np.asarray(payload["schedule"]["betas"], dtype=np.float64)
        schedule = NoiseSchedule(betas=betas, alphas_cumprod=np.cumprod(1.0 - betas))
        net = ToyUNet(
            int(cfg["resolution"]),
            int(cfg["base_channels"]),
            tuple(cfg["channel_mult"]),
            int(cfg["num_res_blocks"]),
        )
        net.load_state_dict(payload["state_dict"])
    except (KeyError, TypeError, RuntimeError, ValueError) as exc:
        raise CheckpointCorruptError(f"checkpoint {path} is corrupt: {exc}") from exc
    loaded = FrozenBackbone(net, schedule, origin="pretrained")
    if expected is not None:
        got = loaded.descriptor
        if got.decoder_block_count != expected.decoder_block_count:
            raise GeometryMismatchError(
                f"checkpoint has {got.decoder_block_count} decoder blocks, "
                f"expected {expected.decoder_block_count}"
            )
        if got.input_resolution != expected.input_resolution:
            raise GeometryMismatchError(
                f"checkpoint input resolution {got.input_resolution}, "
                f"expected {expected.input_resolution}"
            )
        if got.geometry != expected.geometry:
            raise GeometryMismatchError("checkpoint geometry table differs from the expected descriptor")
    return loaded


def full_scale_geometry() -> BackboneDescriptor:
    """Descriptor of the external full-scale 256x256 backbone lineage.

    Published for adapter validation and pooling contracts; carries no
    weights (fingerprint is None). Six decoder stages of three blocks each,
    model width 256 with stage multipliers (1, 1, 2, 2, 4, 4).
    """
    rows: list[tuple[int, int, int]] = []
    size = 8
    for mult in (4, 4, 2, 2, 1, 1):
        for i in range(3):
            last = i == 2 and size < 256
            rows.append((256 * mult, size * 2 if last else size, size * 2 if last else size))
            if last:
                size *= 2
    return BackboneDescriptor(
        input_resolution=256,
        decoder_block_count=18,
        geometry=tuple(rows),
        schedule=build_linear_schedule(),
        weights_fingerprint=None,
    )
