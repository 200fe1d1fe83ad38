"""Network components: patch-transformer encoders per modality, a unified
masked decoder, normalized projection and global-embedding heads, a
cross-attention fusion block, and linear classification/evidence heads.

No dropout anywhere: forward passes are deterministic given parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DEFAULT_NUM_CLASSES, DEFAULT_PATCH_SIZE, DEFAULT_SIDE, MODALITIES, NBI, WLI


class NetworkError(ValueError):
    """Raised for invalid network configuration or mismatched inputs."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters shared by every pipeline stage."""

    image_side: int = DEFAULT_SIDE
    patch_size: int = DEFAULT_PATCH_SIZE
    embed_dim: int = 64
    proj_dim: int = 32
    glo_dim: int = 256
    num_classes: int = DEFAULT_NUM_CLASSES
    encoder_depth: int = 2
    encoder_heads: int = 4
    decoder_depth: int = 1
    fusion_heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if self.image_side % self.patch_size != 0:
            raise NetworkError(
                f"image side {self.image_side} not divisible by patch size {self.patch_size}"
            )
        if not (self.glo_dim > self.embed_dim >= self.proj_dim):
            raise NetworkError(
                f"need glo_dim > embed_dim >= proj_dim, got {self.glo_dim}, "
                f"{self.embed_dim}, {self.proj_dim}"
            )
        if self.embed_dim % self.encoder_heads != 0:
            raise NetworkError("embed_dim must be divisible by encoder_heads")
        if self.embed_dim % self.fusion_heads != 0:
            raise NetworkError("embed_dim must be divisible by fusion_heads")
        if min(self.num_classes, self.encoder_depth, self.decoder_depth) < 1:
            raise NetworkError("num_classes and depths must be >= 1")

    @property
    def tokens_per_side(self) -> int:
        return self.image_side // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.tokens_per_side**2

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in self.__dataclass_fields__.values()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEncoder(nn.Module):
    """Patch embedding + learned positions + transformer blocks.

    ``keep`` restricts the forward pass to a per-sample subset of token
    positions (the visible set under masking); positional embeddings are
    added before the subset is taken, so kept tokens keep their identity.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(
            3, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.embed_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.encoder_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(
        self, images: torch.Tensor, keep: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (pooled, tokens): mean-pooled feature and token sequence."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise NetworkError(f"expected images of shape (B, 3, S, S), got {tuple(images.shape)}")
        if images.shape[2] != self.cfg.image_side or images.shape[3] != self.cfg.image_side:
            raise NetworkError(
                f"expected side {self.cfg.image_side}, got {tuple(images.shape[2:])}"
            )
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = x + self.pos_embed
        if keep is not None:
            if keep.ndim != 2 or keep.shape[0] != x.shape[0]:
                raise NetworkError(f"keep indices must be (B, T_visible), got {tuple(keep.shape)}")
            x = torch.gather(x, 1, keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x.mean(dim=1), x


class MaskedDecoder(nn.Module):
    """Unified decoder: visible tokens plus a shared mask token back to pixels."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.embed_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.encoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, cfg.patch_size**2 * 3)

    def forward(self, visible_tokens: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        """Reconstruct full images from per-sample visible token subsets."""
        b, t_visible, d = visible_tokens.shape
        t = self.cfg.num_tokens
        if keep.shape != (b, t_visible):
            raise NetworkError(
                f"keep indices {tuple(keep.shape)} do not match tokens ({b}, {t_visible})"
            )
        x = self.embed(visible_tokens)
        full = self.mask_token.expand(b, t, d).clone()
        full.scatter_(1, keep.unsqueeze(-1).expand(-1, -1, d), x)
        full = full + self.pos_embed
        for block in self.blocks:
            full = block(full)
        full = self.norm(full)
        patches = self.head(full)
        return self._unpatchify(patches)

    def _unpatchify(self, patches: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch_size
        s = self.cfg.tokens_per_side
        b = patches.shape[0]
        x = patches.reshape(b, s, s, p, p, 3)
        x = torch.einsum("bhwpqc->bchpwq", x)
        return x.reshape(b, 3, s * p, s * p)


class NormalizedHead(nn.Module):
    """Two-layer MLP whose outputs are L2-normalized rows."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, in_dim), nn.GELU(), nn.Linear(in_dim, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(x), dim=-1)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, tq, d = query.shape
        tk = context.shape[1]
        q = self.q(query).reshape(b, tq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(context).reshape(b, tk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(context).reshape(b, tk, self.num_heads, self.head_dim).transpose(1, 2)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        return self.proj(out)


class FusionEncoder(nn.Module):
    """Bidirectional cross-attention over the two pooled features.

    Each modality attends to the other; the two attended features are
    averaged and refined by a residual feed-forward layer.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        dim = cfg.embed_dim
        self.attn_wn = CrossAttention(dim, cfg.fusion_heads)
        self.attn_nw = CrossAttention(dim, cfg.fusion_heads)
        self.norm_w = nn.LayerNorm(dim)
        self.norm_n = nn.LayerNorm(dim)
        self.norm_out = nn.LayerNorm(dim)
        hidden = int(dim * cfg.mlp_ratio)
        self.ffn = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, z_w: torch.Tensor, z_n: torch.Tensor) -> torch.Tensor:
        if z_w.shape != z_n.shape or z_w.ndim != 2:
            raise NetworkError(
                f"fusion expects matching (B, D) inputs, got {tuple(z_w.shape)} and {tuple(z_n.shape)}"
            )
        qw, qn = z_w.unsqueeze(1), z_n.unsqueeze(1)
        attended_w = z_w + self.attn_wn(self.norm_w(qw), self.norm_n(qn)).squeeze(1)
        attended_n = z_n + self.attn_nw(self.norm_n(qn), self.norm_w(qw)).squeeze(1)
        fused = 0.5 * (attended_w + attended_n)
        return fused + self.ffn(self.norm_out(fused))


def momentum_update(online, momentum, m: float):
    """EMA toward the online value: m * momentum + (1 - m) * online.

    Accepts matching tensors/arrays or plain numbers; shapes must agree.
    """
    if not 0.0 <= m <= 1.0:
        raise NetworkError(f"momentum coefficient must be in [0, 1], got {m}")
    online_shape = getattr(online, "shape", None)
    momentum_shape = getattr(momentum, "shape", None)
    if online_shape != momentum_shape:
        raise NetworkError(f"shape mismatch: {online_shape} vs {momentum_shape}")
    return m * momentum + (1.0 - m) * online


@torch.no_grad()
def ema_update_(momentum_module: nn.Module, online_module: nn.Module, m: float) -> None:
    """In-place EMA of every parameter of ``momentum_module``."""
    momentum_params = dict(momentum_module.named_parameters())
    online_params = dict(online_module.named_parameters())
    if momentum_params.keys() != online_params.keys():
        raise NetworkError("module parameter sets differ")
    for name, p_m in momentum_params.items():
        p_m.copy_(momentum_update(online_params[name], p_m, m))


class Model(nn.Module):
    """Full parameter bundle for pretraining and fine-tuning.

    Momentum copies exist for the two encoders and the projection head only;
    they are excluded from gradient tracking and follow their online
    counterparts through :meth:`update_momentum`.
    """

    def __init__(self, cfg: NetConfig, momentum: float = 0.995):
        super().__init__()
        self.cfg = cfg
        self.momentum = momentum
        self.encoder_w = PatchEncoder(cfg)
        self.encoder_n = PatchEncoder(cfg)
        self.decoder = MaskedDecoder(cfg)
        self.project = NormalizedHead(cfg.embed_dim, cfg.proj_dim)
        self.global_embed = NormalizedHead(cfg.embed_dim, cfg.glo_dim)
        self.fusion = FusionEncoder(cfg)
        self.classifier = nn.Linear(cfg.embed_dim, cfg.num_classes)
        self.evidence_w = nn.Linear(cfg.embed_dim, cfg.num_classes)
        self.evidence_n = nn.Linear(cfg.embed_dim, cfg.num_classes)

        self.momentum_encoder_w = PatchEncoder(cfg)
        self.momentum_encoder_n = PatchEncoder(cfg)
        self.momentum_project = NormalizedHead(cfg.embed_dim, cfg.proj_dim)
        self._init_momentum_copies()

    def _init_momentum_copies(self) -> None:
        for online, copy in self._momentum_pairs():
            copy.load_state_dict(online.state_dict())
            for p in copy.parameters():
                p.requires_grad_(False)

    def _momentum_pairs(self) -> list[tuple[nn.Module, nn.Module]]:
        return [
            (self.encoder_w, self.momentum_encoder_w),
            (self.encoder_n, self.momentum_encoder_n),
            (self.project, self.momentum_project),
        ]

    def encoder(self, modality: str) -> PatchEncoder:
        if modality == WLI:
            return self.encoder_w
        if modality == NBI:
            return self.encoder_n
        raise NetworkError(f"unknown modality {modality!r}, expected one of {MODALITIES}")

    def encode(
        self, images: torch.Tensor, modality: str, keep: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.encoder(modality)(images, keep=keep)

    @torch.no_grad()
    def momentum_encode(self, images: torch.Tensor, modality: str) -> torch.Tensor:
        encoder = self.momentum_encoder_w if modality == WLI else self.momentum_encoder_n
        pooled, _ = encoder(images)
        return self.momentum_project(pooled)

    @torch.no_grad()
    def update_momentum(self) -> None:
        for online, copy in self._momentum_pairs():
            ema_update_(copy, online, self.momentum)

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}


def build_model(cfg: NetConfig, seed: int = 0, momentum: float = 0.995) -> Model:
    """Construct a model with initialization drawn from an isolated RNG fork."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Model(cfg, momentum=momentum)
    return model
