"""The three slot decoders.

SurrogateDecoder: bidirectional Transformer over learnable mask tokens with
cross-attention to the slots; one forward pass, linear patch expansion to
pixels. Backs the composition path.

SlotConditionedUNet: epsilon-prediction denoiser with sinusoidal time
embedding and slot cross-attention at every resolution. Backs the diffusion
path and doubles as the generative prior.

MixtureDecoder: per-slot spatial-broadcast RGB+alpha renderer, alpha-blended.
Diagnostic baseline only; never part of the composition path.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .slotcore import SlotSet


def _slots_tensor(slots):
    return slots.slots if isinstance(slots, SlotSet) else slots


class _DecoderBlock(nn.Module):
    """Pre-norm self-attention + cross-attention + MLP, no causal masking."""

    def __init__(self, width, heads, ctx_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.norm_ctx = nn.LayerNorm(ctx_dim)
        self.cross_attn = nn.MultiheadAttention(width, heads, batch_first=True,
                                                kdim=ctx_dim, vdim=ctx_dim)
        self.norm3 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width)
        )

    def forward(self, tokens, ctx):
        h = self.norm1(tokens)
        tokens = tokens + self.self_attn(h, h, h, need_weights=False)[0]
        c = self.norm_ctx(ctx)
        tokens = tokens + self.cross_attn(self.norm2(tokens), c, c, need_weights=False)[0]
        tokens = tokens + self.mlp(self.norm3(tokens))
        return tokens


class SurrogateDecoder(nn.Module):
    """One-shot slot-conditioned image decoder (D over mask tokens and slots)."""

    def __init__(self, image_size=32, channels=3, grid=(8, 8), width=192,
                 layers=4, heads=4, slot_dim=64):
        super().__init__()
        gh, gw = grid
        if image_size % gh or image_size % gw:
            raise ValueError("token grid must divide the image size")
        self.image_size = image_size
        self.channels = channels
        self.grid = grid
        self.patch = (image_size // gh, image_size // gw)
        self.mask_tokens = nn.Parameter(torch.randn(gh * gw, width) * 0.02)
        self.blocks = nn.ModuleList(
            [_DecoderBlock(width, heads, slot_dim) for _ in range(layers)]
        )
        self.norm_out = nn.LayerNorm(width)
        self.head = nn.Linear(width, self.patch[0] * self.patch[1] * channels)

    def forward(self, slots):
        s = _slots_tensor(slots)
        b = s.shape[0]
        tokens = self.mask_tokens.unsqueeze(0).expand(b, -1, -1)
        for blk in self.blocks:
            tokens = blk(tokens, s)
        patches = self.head(self.norm_out(tokens))  # (B, gh*gw, ph*pw*C)
        gh, gw = self.grid
        ph, pw = self.patch
        x = patches.reshape(b, gh, gw, ph, pw, self.channels)
        x = x.permute(0, 5, 1, 3, 2, 4).reshape(b, self.channels, gh * ph, gw * pw)
        return x


def timestep_embedding(t, dim, max_period=10000.0):
    """Standard sinusoidal embedding of integer timesteps; (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / half
    )
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class _ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _SlotCrossAttention(nn.Module):
    """Pixels attend to the slot set; permutation-invariant conditioning."""

    def __init__(self, channels, slot_dim, heads=4):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.norm_ctx = nn.LayerNorm(slot_dim)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True,
                                          kdim=slot_dim, vdim=slot_dim)

    def forward(self, x, slots):
        b, c, h, w = x.shape
        seq = x.reshape(b, c, h * w).transpose(1, 2)
        ctx = self.norm_ctx(slots)
        out = self.attn(self.norm(seq), ctx, ctx, need_weights=False)[0]
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class SlotConditionedUNet(nn.Module):
    """Noise predictor conditioned on slots at each stage, zero-init output."""

    def __init__(self, image_size=32, channels=3, base_width=64,
                 channel_mults=(1, 2), res_blocks=2, slot_dim=64, heads=4,
                 T=1000, groups=8):
        super().__init__()
        self.T = T
        time_dim = base_width * 4
        self.time_dim = base_width
        self.time_mlp = nn.Sequential(
            nn.Linear(base_width, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.stem = nn.Conv2d(channels, base_width, 3, padding=1)

        widths = [base_width * m for m in channel_mults]
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = base_width
        skip_chs = [ch]
        for level, w in enumerate(widths):
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for _ in range(res_blocks):
                blocks.append(_ResBlock(ch, w, time_dim, groups))
                attns.append(_SlotCrossAttention(w, slot_dim, heads))
                ch = w
                skip_chs.append(ch)
            self.down_blocks.append(blocks)
            self.down_attn.append(attns)
            if level < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_chs.append(ch)
            else:
                self.downsamples.append(None)

        self.mid_block1 = _ResBlock(ch, ch, time_dim, groups)
        self.mid_attn = _SlotCrossAttention(ch, slot_dim, heads)
        self.mid_block2 = _ResBlock(ch, ch, time_dim, groups)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level, w in reversed(list(enumerate(widths))):
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for _ in range(res_blocks + 1):
                blocks.append(_ResBlock(ch + skip_chs.pop(), w, time_dim, groups))
                attns.append(_SlotCrossAttention(w, slot_dim, heads))
                ch = w
            self.up_blocks.append(blocks)
            self.up_attn.append(attns)
            self.upsamples.append(
                nn.Conv2d(ch, ch, 3, padding=1) if level > 0 else None
            )

        self.out_norm = nn.GroupNorm(groups, ch)
        self.out_conv = nn.Conv2d(ch, channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x_t, t, slots):
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        if int(t.min()) < 1 or int(t.max()) > self.T:
            raise ValueError(f"timestep outside schedule range [1, {self.T}]")
        s = _slots_tensor(slots)
        t_emb = self.time_mlp(timestep_embedding(t, self.time_dim))

        h = self.stem(x_t)
        skips = [h]
        for level, (blocks, attns) in enumerate(zip(self.down_blocks, self.down_attn)):
            for blk, attn in zip(blocks, attns):
                h = attn(blk(h, t_emb), s)
                skips.append(h)
            if self.downsamples[level] is not None:
                h = self.downsamples[level](h)
                skips.append(h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, t_emb), s), t_emb)

        for blocks, attns, up in zip(self.up_blocks, self.up_attn, self.upsamples):
            for blk, attn in zip(blocks, attns):
                h = attn(blk(torch.cat([h, skips.pop()], dim=1), t_emb), s)
            if up is not None:
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))

        return self.out_conv(F.silu(self.out_norm(h)))


def combine_slot_renders(rgbs, alpha_logits):
    """Alpha-blend per-slot renders; alphas softmax-normalized across slots."""
    alphas = F.softmax(alpha_logits, dim=1)  # (B, N, 1, H, W)
    image = (alphas * rgbs).sum(dim=1)
    return image, alphas.squeeze(2)


class MixtureDecoder(nn.Module):
    """Spatial-broadcast per-slot decoder with alpha compositing (baseline)."""

    def __init__(self, image_size=32, channels=3, slot_dim=64, width=32,
                 broadcast=8):
        super().__init__()
        self.image_size = image_size
        self.channels = channels
        self.broadcast = broadcast
        ys = torch.linspace(0.0, 1.0, broadcast).view(broadcast, 1).expand(broadcast, broadcast)
        xs = torch.linspace(0.0, 1.0, broadcast).view(1, broadcast).expand(broadcast, broadcast)
        self.register_buffer("coords", torch.stack([xs, ys, 1 - xs, 1 - ys], 0))
        self.pos_proj = nn.Conv2d(4, slot_dim, 1)
        ups = int(math.log2(image_size // broadcast))
        layers = [nn.Conv2d(slot_dim, width, 3, padding=1)]
        for _ in range(ups):
            layers += [nn.ReLU(), nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(width, width, 3, padding=1)]
        layers += [nn.ReLU(), nn.Conv2d(width, channels + 1, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, slots):
        s = _slots_tensor(slots)
        b, n, d = s.shape
        g = self.broadcast
        h = s.reshape(b * n, d, 1, 1).expand(b * n, d, g, g)
        h = h + self.pos_proj(self.coords.unsqueeze(0))
        out = self.net(h)  # (B*N, C+1, H, W)
        out = out.reshape(b, n, self.channels + 1, self.image_size, self.image_size)
        rgbs, alpha_logits = out[:, :, : self.channels], out[:, :, self.channels:]
        return combine_slot_renders(rgbs, alpha_logits)
