"""Generator and discriminator architectures.

Generators map one-channel normalized slices to one-channel normalized
slices through a tanh head.  The default generator is a U-Net: stride-2
convolution blocks (batch norm, leaky ReLU) halve the grid and double
the channel count on the way down; transposed-convolution blocks (batch
norm, ReLU) mirror the path up, concatenating the matching encoder
feature map when skip connections are enabled.  A residual-block
generator is available as an architectural variant.  Discriminators are
patch critics: a stride-2 convolution stack emitting an
(N, 1, side/2^depth, side/2^depth) score grid of raw logits.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import torch
from torch import nn

ARCHS = ("unet", "resnet")


class NetworkError(ValueError):
    """Invalid architecture spec or input tensor."""


@dataclass(frozen=True)
class GeneratorSpec:
    input_side: int = 256
    depth: int = 6
    base_channels: int = 32
    leaky_slope: float = 0.2
    skip_connections: bool = True
    arch: str = "unet"

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise NetworkError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.input_side < 16:
            raise NetworkError(f"input_side must be >= 16, got {self.input_side}")
        if self.base_channels < 1:
            raise NetworkError("base_channels must be >= 1")
        if self.depth < 1:
            raise NetworkError("depth must be >= 1")
        if not 0.0 < self.leaky_slope < 1.0:
            raise NetworkError("leaky_slope must be in (0, 1)")
        if self.arch == "unet":
            if self.input_side % (1 << self.depth) != 0:
                raise NetworkError(
                    f"input_side {self.input_side} not divisible by 2^depth ({1 << self.depth})"
                )
            if self.input_side // (1 << self.depth) < 2:
                raise NetworkError(
                    f"depth {self.depth} collapses a {self.input_side}px input below 2px"
                )
        else:
            if self.input_side % 4 != 0:
                raise NetworkError("resnet generator needs input_side divisible by 4")


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_side: int = 256
    depth: int = 3
    base_channels: int = 64
    leaky_slope: float = 0.2

    def __post_init__(self) -> None:
        if self.input_side < 16:
            raise NetworkError(f"input_side must be >= 16, got {self.input_side}")
        if self.depth < 1:
            raise NetworkError("depth must be >= 1")
        if self.base_channels < 1:
            raise NetworkError("base_channels must be >= 1")
        if self.input_side % (1 << self.depth) != 0:
            raise NetworkError(
                f"input_side {self.input_side} not divisible by 2^depth ({1 << self.depth})"
            )

    @property
    def patch_grid(self) -> int:
        return self.input_side // (1 << self.depth)


def _check_input(x: torch.Tensor, side: int, who: str) -> None:
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != side or x.shape[3] != side:
        raise NetworkError(
            f"{who} expects (N, 1, {side}, {side}) input, got {tuple(x.shape)}"
        )


def _down_block(in_ch: int, out_ch: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.LeakyReLU(slope, inplace=True),
    )


def _up_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class UNetGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        enc_ch = [spec.base_channels * (1 << i) for i in range(spec.depth)]
        downs = []
        prev = 1
        for ch in enc_ch:
            downs.append(_down_block(prev, ch, spec.leaky_slope))
            prev = ch
        self.downs = nn.ModuleList(downs)
        ups = []
        in_ch = enc_ch[-1]
        for level in range(spec.depth - 2, -1, -1):
            ups.append(_up_block(in_ch, enc_ch[level]))
            in_ch = enc_ch[level] * (2 if spec.skip_connections else 1)
        self.ups = nn.ModuleList(ups)
        self.final_up = _up_block(in_ch, spec.base_channels)
        self.final_conv = nn.Conv2d(spec.base_channels, 1, 3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.spec.input_side, "generator")
        feats = []
        h = x
        for down in self.downs:
            h = down(h)
            feats.append(h)
        for i, up in enumerate(self.ups):
            h = up(h)
            if self.spec.skip_connections:
                h = torch.cat([h, feats[self.spec.depth - 2 - i]], dim=1)
        h = self.final_up(h)
        return torch.tanh(self.final_conv(h))


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, stride=1, padding=1),
            nn.BatchNorm2d(ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, stride=1, padding=1),
            nn.BatchNorm2d(ch),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class ResNetGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        b = spec.base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(1, b, 7, stride=1, padding=3),
            nn.BatchNorm2d(b),
            nn.ReLU(inplace=True),
        )
        self.down = nn.Sequential(
            _down_block(b, 2 * b, spec.leaky_slope),
            _down_block(2 * b, 4 * b, spec.leaky_slope),
        )
        self.blocks = nn.Sequential(*[_ResBlock(4 * b) for _ in range(spec.depth)])
        self.up = nn.Sequential(_up_block(4 * b, 2 * b), _up_block(2 * b, b))
        self.head = nn.Conv2d(b, 1, 7, stride=1, padding=3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.spec.input_side, "generator")
        h = self.stem(x)
        h = self.down(h)
        h = self.blocks(h)
        h = self.up(h)
        return torch.tanh(self.head(h))


class PatchDiscriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = [
            nn.Conv2d(1, spec.base_channels, 4, stride=2, padding=1),
            nn.LeakyReLU(spec.leaky_slope, inplace=True),
        ]
        prev = spec.base_channels
        for i in range(1, spec.depth):
            ch = spec.base_channels * (1 << i)
            layers += [
                nn.Conv2d(prev, ch, 4, stride=2, padding=1),
                nn.BatchNorm2d(ch),
                nn.LeakyReLU(spec.leaky_slope, inplace=True),
            ]
            prev = ch
        layers.append(nn.Conv2d(prev, 1, 3, stride=1, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.spec.input_side, "discriminator")
        return self.body(x)


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """Deterministic N(0, 0.02) conv init / N(1, 0.02) norm init."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            m.weight.data.normal_(0.0, 0.02, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.normal_(1.0, 0.02, generator=gen)
            m.bias.data.zero_()
    return module


def build_generator(spec: GeneratorSpec, seed: int) -> nn.Module:
    net = UNetGenerator(spec) if spec.arch == "unet" else ResNetGenerator(spec)
    return init_weights(net, seed)


def build_discriminator(spec: DiscriminatorSpec, seed: int) -> nn.Module:
    return init_weights(PatchDiscriminator(spec), seed)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def param_checksum(module: nn.Module) -> str:
    """sha256 over learnable parameters only (batch-norm buffers excluded)."""
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        digest.update(name.encode("utf-8"))
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def state_checksum(module: nn.Module) -> str:
    """sha256 over the full state dict (parameters and buffers)."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        tensor = state[key]
        digest.update(key.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def spec_to_dict(spec) -> dict:
    return asdict(spec)
