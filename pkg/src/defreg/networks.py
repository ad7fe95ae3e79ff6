"""The three trainable functions: registration net R, translation net T, projection heads H.

R is a 5-level U-Net over the channel-stacked pair (x, y) that predicts a dense
displacement field. T is a 9-residual-block encoder/decoder translator; its
encoder doubles as the multilayer feature extractor for the contrastive losses.
Each tapped encoder layer gets its own two-layer MLP head producing unit-norm
embeddings.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grids import DeformationField, ImageGrid

# Encoder stages that feed the patch embeddings: raw input, input conv,
# both downsampling convs, and residual blocks 1 and 4 give ids 0..7 below.
DEFAULT_LAYER_IDS = (0, 1, 2, 3, 7)


class ResidualBlock(nn.Module):
    """Reflection-padded 3x3 conv pair with instance norm and identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3, bias=True),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3, bias=True),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class TranslationEncoder(nn.Module):
    """Front half of the translator: input conv, two stride-2 downs, 4 residual blocks.

    Stage ids for feature taps: 0 = raw input, 1 = input conv, 2 = down1,
    3 = down2, 4..7 = residual blocks 1..4.
    """

    def __init__(self, in_channels: int = 1, ngf: int = 64, n_res: int = 4):
        super().__init__()
        self.stages = nn.ModuleList(
            [
                nn.Sequential(
                    nn.ReflectionPad2d(3),
                    nn.Conv2d(in_channels, ngf, kernel_size=7, bias=True),
                    nn.InstanceNorm2d(ngf),
                    nn.ReLU(inplace=True),
                ),
                nn.Sequential(
                    nn.Conv2d(ngf, ngf * 2, kernel_size=3, stride=2, padding=1, bias=True),
                    nn.InstanceNorm2d(ngf * 2),
                    nn.ReLU(inplace=True),
                ),
                nn.Sequential(
                    nn.Conv2d(ngf * 2, ngf * 4, kernel_size=3, stride=2, padding=1, bias=True),
                    nn.InstanceNorm2d(ngf * 4),
                    nn.ReLU(inplace=True),
                ),
            ]
            + [ResidualBlock(ngf * 4) for _ in range(n_res)]
        )

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def forward(self, x, layer_ids=None):
        if layer_ids is None:
            h = x
            for stage in self.stages:
                h = stage(h)
            return h
        max_id = self.num_stages
        for lid in layer_ids:
            if not 0 <= lid <= max_id:
                raise ValueError(f"layer id {lid} out of range [0, {max_id}]")
        taps = {}
        if 0 in layer_ids:
            taps[0] = x
        h = x
        deepest = max(layer_ids)
        for i, stage in enumerate(self.stages, start=1):
            if i > deepest:
                break
            h = stage(h)
            if i in layer_ids:
                taps[i] = h
        return [taps[lid] for lid in layer_ids]


class TranslationDecoder(nn.Module):
    """Back half of the translator: 5 residual blocks, two ups, tanh output conv."""

    def __init__(self, out_channels: int = 1, ngf: int = 64, n_res: int = 5):
        super().__init__()
        layers = [ResidualBlock(ngf * 4) for _ in range(n_res)]
        layers += [
            nn.ConvTranspose2d(ngf * 4, ngf * 2, kernel_size=3, stride=2, padding=1, output_padding=1, bias=True),
            nn.InstanceNorm2d(ngf * 2),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(ngf * 2, ngf, kernel_size=3, stride=2, padding=1, output_padding=1, bias=True),
            nn.InstanceNorm2d(ngf),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(ngf, out_channels, kernel_size=7),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, h):
        return self.model(h)


class TranslationNet(nn.Module):
    """Full translator T = decoder(encoder(x)); output in [-1, 1], same spatial shape."""

    def __init__(self, in_channels: int = 1, out_channels: int = 1, ngf: int = 64, n_blocks: int = 9):
        super().__init__()
        n_enc = n_blocks // 2
        self.encoder = TranslationEncoder(in_channels, ngf, n_res=n_enc)
        self.decoder = TranslationDecoder(out_channels, ngf, n_res=n_blocks - n_enc)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class ProjectionHeads(nn.Module):
    """One two-layer MLP per tapped encoder layer, mapping C_l -> embed_dim, L2-normalized."""

    def __init__(self, channels, embed_dim: int = 256, hidden_dim: int = 256):
        super().__init__()
        self.embed_dim = embed_dim
        self.heads = nn.ModuleList(
            [
                nn.Sequential(
                    nn.Linear(c, hidden_dim),
                    nn.ReLU(inplace=True),
                    nn.Linear(hidden_dim, embed_dim),
                )
                for c in channels
            ]
        )

    @classmethod
    def for_encoder(cls, encoder: TranslationEncoder, layer_ids, in_channels: int = 1,
                    embed_dim: int = 256, hidden_dim: int = 256) -> "ProjectionHeads":
        with torch.no_grad():
            probe = torch.zeros(1, in_channels, 16, 16)
            feats = encoder(probe, layer_ids=list(layer_ids))
        return cls([f.shape[1] for f in feats], embed_dim=embed_dim, hidden_dim=hidden_dim)

    def forward(self, feats, locations):
        """Embed selected spatial locations of each feature map.

        Args:
            feats: list of (B, C_l, H_l, W_l) tensors, one per head.
            locations: list of 1D LongTensors of flat indices into H_l*W_l.

        Returns:
            list of (B, n_l, embed_dim) tensors with unit-norm rows.
        """
        if len(feats) != len(self.heads):
            raise ValueError(f"expected {len(self.heads)} feature maps, got {len(feats)}")
        out = []
        for head, f, idx in zip(self.heads, feats, locations):
            b, c, h, w = f.shape
            if idx.numel() and (int(idx.max()) >= h * w or int(idx.min()) < 0):
                raise ValueError(f"location index out of range for {h}x{w} map")
            rows = f.flatten(2).index_select(2, idx).permute(0, 2, 1)
            z = head(rows)
            out.append(F.normalize(z, p=2, dim=-1))
        return out


def encode_features(encoder: TranslationEncoder, image, layer_ids=DEFAULT_LAYER_IDS):
    """Feature stack (shallow to deep) for an image given as ImageGrid or (B,1,H,W) tensor."""
    if isinstance(image, ImageGrid):
        t = torch.from_numpy(image.data.astype(np.float32))[None, None]
    else:
        t = image
    return encoder(t, layer_ids=list(layer_ids))


def embed_patches(stack, locations, heads: ProjectionHeads):
    """Unit-norm embeddings of the given per-layer locations; see ProjectionHeads.forward."""
    return heads(stack, locations)


def sample_locations(stack, num_locations: int, rng: np.random.Generator):
    """Per-layer flat indices, sampled without replacement, shared by query and key images."""
    locations = []
    for f in stack:
        s = f.shape[2] * f.shape[3]
        if num_locations > s:
            raise ValueError(f"num_locations={num_locations} exceeds {s} spatial positions")
        idx = rng.choice(s, size=num_locations, replace=False)
        locations.append(torch.from_numpy(np.ascontiguousarray(idx)).long())
    return locations


class _ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=True),
            nn.InstanceNorm2d(out_ch),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class RegistrationNet(nn.Module):
    """5-level U-Net over the stacked pair, ending in a zero-initialized 2-channel flow conv.

    Spatial dims must be divisible by 16 (four stride-2 encoder levels).
    """

    def __init__(self, in_channels: int = 2, channels=(16, 32, 32, 64, 64)):
        super().__init__()
        if len(channels) != 5:
            raise ValueError("RegistrationNet expects 5 channel widths")
        c0, c1, c2, c3, c4 = channels
        self.enc0 = _ConvBlock(in_channels, c0, stride=1)
        self.enc1 = _ConvBlock(c0, c1, stride=2)
        self.enc2 = _ConvBlock(c1, c2, stride=2)
        self.enc3 = _ConvBlock(c2, c3, stride=2)
        self.enc4 = _ConvBlock(c3, c4, stride=2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.dec3 = _ConvBlock(c4 + c3, c3)
        self.dec2 = _ConvBlock(c3 + c2, c2)
        self.dec1 = _ConvBlock(c2 + c1, c1)
        self.dec0 = _ConvBlock(c1 + c0, c0)
        self.flow = nn.Conv2d(c0, 2, kernel_size=3, padding=1)
        self.reset_flow_head()

    def reset_flow_head(self):
        nn.init.zeros_(self.flow.weight)
        nn.init.zeros_(self.flow.bias)

    def forward(self, x, y):
        inp = torch.cat([x, y], dim=1)
        h, w = inp.shape[2], inp.shape[3]
        if h % 16 or w % 16:
            raise ValueError(f"spatial dims must be divisible by 16, got {h}x{w}")
        if (h // 16) * (w // 16) < 2:
            raise ValueError(f"{h}x{w} leaves a single bottleneck element; "
                             "instance norm needs at least 32 in one dimension")
        e0 = self.enc0(inp)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        e4 = self.enc4(e3)
        d3 = self.dec3(torch.cat([self.up(e4), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up(d2), e1], dim=1))
        d0 = self.dec0(torch.cat([self.up(d1), e0], dim=1))
        return self.flow(d0)


def init_parameters(net: nn.Module, scheme: str = "xavier", seed: int | None = None) -> nn.Module:
    """Xavier-uniform weights, zero biases; nets may re-zero marked heads afterwards."""
    if scheme != "xavier":
        raise ValueError(f"unknown init scheme {scheme!r}")
    if seed is not None:
        torch.manual_seed(seed)
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    for m in net.modules():
        if isinstance(m, RegistrationNet):
            m.reset_flow_head()
    return net


class JointNetworks(nn.Module):
    """Container for R, T, H so checkpoints and the optimizer see one parameter store."""

    def __init__(self, registration: RegistrationNet, translation: TranslationNet,
                 heads: ProjectionHeads, layer_ids=DEFAULT_LAYER_IDS):
        super().__init__()
        self.registration = registration
        self.translation = translation
        self.heads = heads
        self.layer_ids = tuple(layer_ids)


def build_networks(in_channels: int = 1, ngf: int = 64, n_blocks: int = 9,
                   reg_channels=(16, 32, 32, 64, 64), layer_ids=DEFAULT_LAYER_IDS,
                   embed_dim: int = 256, hidden_dim: int = 256,
                   seed: int | None = None) -> JointNetworks:
    """Construct and initialize the full trainable bundle."""
    registration = RegistrationNet(in_channels=2 * in_channels, channels=reg_channels)
    translation = TranslationNet(in_channels=in_channels, out_channels=in_channels,
                                 ngf=ngf, n_blocks=n_blocks)
    heads = ProjectionHeads.for_encoder(translation.encoder, layer_ids,
                                        in_channels=in_channels,
                                        embed_dim=embed_dim, hidden_dim=hidden_dim)
    nets = JointNetworks(registration, translation, heads, layer_ids=layer_ids)
    return init_parameters(nets, scheme="xavier", seed=seed)


def register(nets: JointNetworks, x: ImageGrid, y: ImageGrid) -> DeformationField:
    """Inference-mode displacement field for a source/target pair (only R is used)."""
    if x.data.shape != y.data.shape:
        raise ValueError(f"shape mismatch: {x.data.shape} vs {y.data.shape}")
    xt = torch.from_numpy(x.data.astype(np.float32))[None, None]
    yt = torch.from_numpy(y.data.astype(np.float32))[None, None]
    was_training = nets.training
    nets.eval()
    with torch.no_grad():
        flow = nets.registration(xt, yt)
    if was_training:
        nets.train()
    return DeformationField(flow[0].numpy())


def translate(nets: JointNetworks, x: ImageGrid) -> ImageGrid:
    """Inference-mode translation T(x) into the target-modality appearance."""
    xt = torch.from_numpy(x.data.astype(np.float32))[None, None]
    was_training = nets.training
    nets.eval()
    with torch.no_grad():
        out = nets.translation(xt)
    if was_training:
        nets.train()
    return ImageGrid(out[0, 0].numpy(), modality_tag=x.modality_tag)
