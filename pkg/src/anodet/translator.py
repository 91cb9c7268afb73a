"""Two-domain image translation model with separate content and style codes.

Each domain (X and Y) owns a content encoder, a style encoder, a decoder,
and a discriminator. Content codes are spatial feature maps; style codes
are short vectors drawn from (or encoded into) one space shared by both
domains, turned into per-channel AdaIN scale/shift pairs by a single MLP
shared across decoders. Styles therefore influence the decoders only
through AdaIN, which is what lets one content code render in either
domain's appearance.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from anodet.errors import CheckpointError, DegenerateInputError, ShapeError

CHECKPOINT_VERSION = "anodet-ckpt-v1"
DOMAINS = ("X", "Y")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes. Defaults follow the common translation-GAN layout."""

    style_dim: int = 8
    base_width: int = 64
    downsamples: int = 2        # stride-2 stages in the content encoder
    content_blocks: int = 4
    decoder_blocks: int = 4
    style_downs: int = 4        # stride-2 stages in the style encoder
    mlp_width: int = 256
    disc_width: int = 64
    disc_layers: int = 4
    disc_scales: int = 3

    def __post_init__(self):
        for name in ("style_dim", "base_width", "content_blocks", "decoder_blocks",
                     "style_downs", "mlp_width", "disc_width", "disc_layers",
                     "disc_scales"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.downsamples < 0:
            raise ValueError("downsamples must be >= 0")

    @property
    def content_channels(self) -> int:
        return self.base_width * 2 ** self.downsamples


def init_weights(module: nn.Module) -> None:
    """Gaussian(0, 0.02) init for conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def adain(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
          epsilon: float = 1e-5) -> torch.Tensor:
    """Adaptive instance normalization over spatial positions.

    Per sample and channel the features are standardized with their own
    (biased) spatial statistics, then affinely mapped to the given scale
    and shift. A zero-variance channel comes out as plain beta.
    """
    if features.dim() != 4:
        raise ShapeError(f"expected (N, C, H, W) features, got {tuple(features.shape)}")
    n, c = features.shape[:2]
    if gamma.numel() not in (c, n * c) or beta.numel() != gamma.numel():
        raise ShapeError("gamma/beta length does not match channel count")
    gamma = gamma.reshape(-1, c, 1, 1)
    beta = beta.reshape(-1, c, 1, 1)
    mean = features.mean(dim=(2, 3), keepdim=True)
    var = features.var(dim=(2, 3), unbiased=False, keepdim=True)
    return gamma * (features - mean) / torch.sqrt(var + epsilon) + beta


def sample_style(rng: torch.Generator, style_dim: int, n: int = 1) -> torch.Tensor:
    """Draw style codes from the shared standard-normal prior."""
    if style_dim < 1:
        raise ValueError(f"style_dim must be >= 1, got {style_dim}")
    return torch.randn(n, style_dim, generator=rng)


def _pad_conv(in_ch, out_ch, kernel, stride=1, pad=None):
    # stride-2 4x4 convs halve exactly with pad 1; odd kernels center-pad
    pad = kernel // 2 if pad is None else pad
    return nn.Sequential(
        nn.ReflectionPad2d(pad),
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride),
    )


class _ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = _pad_conv(channels, channels, 3)
        self.norm1 = nn.InstanceNorm2d(channels)
        self.conv2 = _pad_conv(channels, channels, 3)
        self.norm2 = nn.InstanceNorm2d(channels)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class ContentEncoder(nn.Module):
    """7x7 stem, stride-2 downsampling, residual blocks; instance norm throughout."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base_width
        layers = [_pad_conv(3, w, 7), nn.InstanceNorm2d(w), nn.ReLU(inplace=True)]
        for _ in range(cfg.downsamples):
            layers += [_pad_conv(w, 2 * w, 4, stride=2, pad=1),
                       nn.InstanceNorm2d(2 * w), nn.ReLU(inplace=True)]
            w *= 2
        self.net = nn.Sequential(*layers, *[_ResBlock(w) for _ in range(cfg.content_blocks)])

    def forward(self, x):
        return self.net(x)


class StyleEncoder(nn.Module):
    """Stride-2 stages without normalization, pooled to one vector per image."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base_width
        cap = 4 * cfg.base_width
        layers = [_pad_conv(3, w, 7), nn.ReLU(inplace=True)]
        for _ in range(cfg.style_downs):
            nw = min(2 * w, cap)
            layers += [_pad_conv(w, nw, 4, stride=2, pad=1), nn.ReLU(inplace=True)]
            w = nw
        self.net = nn.Sequential(*layers)
        self.head = nn.Linear(w, cfg.style_dim)

    def forward(self, x):
        h = self.net(x)
        return self.head(h.mean(dim=(2, 3)))


class _AdaInResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = _pad_conv(channels, channels, 3)
        self.conv2 = _pad_conv(channels, channels, 3)

    def forward(self, x, gamma, beta):
        h = F.relu(adain(self.conv1(x), gamma, beta))
        return x + self.conv2(h)


class Decoder(nn.Module):
    """AdaIN residual blocks, nearest-neighbor upsampling, bounded 7x7 output.

    Style information enters only through the AdaIN parameters; no other
    layer is normalized, so appearance is fully determined by them.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.content_channels
        self.blocks = nn.ModuleList(_AdaInResBlock(w) for _ in range(cfg.decoder_blocks))
        ups = []
        for _ in range(cfg.downsamples):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"),
                    _pad_conv(w, w // 2, 5), nn.ReLU(inplace=True)]
            w //= 2
        self.upsample = nn.Sequential(*ups)
        self.out = nn.Sequential(_pad_conv(w, 3, 7), nn.Tanh())

    def forward(self, content, params):
        if len(params) != len(self.blocks):
            raise ShapeError(f"expected {len(self.blocks)} AdaIN parameter pairs, "
                             f"got {len(params)}")
        h = content
        for block, (gamma, beta) in zip(self.blocks, params):
            h = block(h, gamma, beta)
        return self.out(self.upsample(h))


class StyleMLP(nn.Module):
    """Maps a style code to per-block (gamma, beta) pairs for one decoder pass."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = cfg.decoder_blocks
        self.channels = cfg.content_channels
        out_dim = 2 * self.blocks * self.channels
        self.net = nn.Sequential(
            nn.Linear(cfg.style_dim, cfg.mlp_width), nn.ReLU(inplace=True),
            nn.Linear(cfg.mlp_width, cfg.mlp_width), nn.ReLU(inplace=True),
            nn.Linear(cfg.mlp_width, out_dim),
        )

    def forward(self, style):
        flat = self.net(style)
        per_block = flat.reshape(style.shape[0], self.blocks, 2, self.channels)
        return [(per_block[:, b, 0], per_block[:, b, 1]) for b in range(self.blocks)]


class Discriminator(nn.Module):
    """Least-squares patch discriminator applied at several image scales."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        def one_scale():
            w = cfg.disc_width
            layers = [_pad_conv(3, w, 4, stride=2, pad=1), nn.LeakyReLU(0.2, inplace=True)]
            for _ in range(cfg.disc_layers - 1):
                layers += [_pad_conv(w, 2 * w, 4, stride=2, pad=1), nn.LeakyReLU(0.2, inplace=True)]
                w *= 2
            layers.append(nn.Conv2d(w, 1, 1))
            return nn.Sequential(*layers)

        self.scales = nn.ModuleList(one_scale() for _ in range(cfg.disc_scales))
        self.pool = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    def forward(self, x):
        logits = []
        for net in self.scales:
            logits.append(net(x))
            x = self.pool(x)
        return logits


class TranslatorModel(nn.Module):
    """The full two-domain model; all public ops accept (3, H, W) or (N, 3, H, W)."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.content_enc = nn.ModuleDict({d: ContentEncoder(self.cfg) for d in DOMAINS})
        self.style_enc = nn.ModuleDict({d: StyleEncoder(self.cfg) for d in DOMAINS})
        self.decoder = nn.ModuleDict({d: Decoder(self.cfg) for d in DOMAINS})
        self.disc = nn.ModuleDict({d: Discriminator(self.cfg) for d in DOMAINS})
        self.mlp = StyleMLP(self.cfg)
        init_weights(self)

    @staticmethod
    def _check_domain(domain):
        if domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")

    @staticmethod
    def _batched(image):
        if image.dim() == 3:
            return image.unsqueeze(0), True
        if image.dim() == 4:
            return image, False
        raise ShapeError(f"expected (3, H, W) or (N, 3, H, W), got {tuple(image.shape)}")

    def encode_content(self, image: torch.Tensor, domain: str) -> torch.Tensor:
        self._check_domain(domain)
        x, squeeze = self._batched(image)
        h, w = x.shape[2:]
        step = 2 ** self.cfg.downsamples
        if h % step or w % step:
            raise ShapeError(f"spatial size {(h, w)} not divisible by {step}")
        code = self.content_enc[domain](x)
        return code.squeeze(0) if squeeze else code

    def encode_style(self, image: torch.Tensor, domain: str) -> torch.Tensor:
        self._check_domain(domain)
        x, squeeze = self._batched(image)
        if x.shape[2] == 0 or x.shape[3] == 0:
            raise DegenerateInputError("empty image")
        code = self.style_enc[domain](x)
        return code.squeeze(0) if squeeze else code

    def style_params(self, style: torch.Tensor) -> list:
        if style.dim() == 1:
            style = style.unsqueeze(0)
        if style.shape[-1] != self.cfg.style_dim:
            raise ShapeError(f"style length {style.shape[-1]} != {self.cfg.style_dim}")
        return self.mlp(style)

    def decode(self, content: torch.Tensor, style: torch.Tensor, domain: str) -> torch.Tensor:
        self._check_domain(domain)
        code, squeeze = self._batched(content)
        if code.shape[1] != self.cfg.content_channels:
            raise ShapeError(f"content has {code.shape[1]} channels, "
                             f"expected {self.cfg.content_channels}")
        if style.dim() == 1:
            style = style.unsqueeze(0)
        if style.shape[0] not in (1, code.shape[0]):
            raise ShapeError(f"{style.shape[0]} styles for {code.shape[0]} content codes")
        if style.shape[0] == 1 and code.shape[0] > 1:
            style = style.expand(code.shape[0], -1)
        img = self.decoder[domain](code, self.style_params(style))
        return img.squeeze(0) if squeeze else img

    def translate(self, image: torch.Tensor, source: str, target: str,
                  style: torch.Tensor | None = None,
                  rng: torch.Generator | None = None) -> torch.Tensor:
        """Render the image's content in the target domain.

        The style comes from the explicit `style` argument if given, else is
        sampled from the prior when `rng` is given, else is extracted from
        the input image with the target domain's style encoder.
        """
        content = self.encode_content(image, source)
        if style is None:
            if rng is not None:
                n = image.shape[0] if image.dim() == 4 else 1
                style = sample_style(rng, self.cfg.style_dim, n).to(image.device)
            else:
                style = self.encode_style(image, target)
        return self.decode(content, style, target)

    def generator_parameters(self):
        for part in (self.content_enc, self.style_enc, self.decoder, self.mlp):
            yield from part.parameters()

    def discriminator_parameters(self):
        yield from self.disc.parameters()


def save_checkpoint(path: str | Path, model: TranslatorModel, **extra) -> None:
    """Write model weights, config, and any extra state (optimizers, step, rng)."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.cfg),
        "model": model.state_dict(),
    }
    overlap = set(extra) & set(payload)
    if overlap:
        raise ValueError(f"reserved checkpoint keys: {sorted(overlap)}")
    payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expect_config: ModelConfig | None = None):
    """Load a checkpoint; returns (model, extra-state dict).

    Refuses files without the expected version tag, and config mismatches
    when the caller pins one.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} is not a {CHECKPOINT_VERSION} checkpoint "
            f"(found version {payload.get('version')!r})"
        )
    cfg = ModelConfig(**payload["config"])
    if expect_config is not None and cfg != expect_config:
        raise CheckpointError(f"checkpoint config {cfg} != expected {expect_config}")
    model = TranslatorModel(cfg)
    model.load_state_dict(payload["model"])
    extra = {k: v for k, v in payload.items() if k not in ("version", "config", "model")}
    return model, extra
