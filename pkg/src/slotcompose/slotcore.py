"""Slot attention encoder: CNN/UNet backbone plus iterative slot refinement.

The attention softmax is normalized over the slot axis so slots compete for
input locations; the per-slot weights are then renormalized over locations
(the weighted-mean "Normalize") before the GRU update. The implicit variant
detaches the refinement prefix and reconnects the initialization, so gradients
flow through the final iteration only.
"""

import dataclasses
import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

NORMALIZE_EPS = 1e-8
SIGMA_FLOOR = 1e-8


@dataclasses.dataclass
class SlotSet:
    slots: torch.Tensor  # (B, N, D)
    init_id: str = None  # identifies the S0 draw; equal iff the same draw


@dataclasses.dataclass
class SlotInitParams:
    mu: torch.Tensor  # (D,)
    sigma: torch.Tensor  # (D,), positive


@dataclasses.dataclass
class FeatureMap:
    features: torch.Tensor  # (B, M, Dp)
    grid: tuple  # (Hp, Wp) with Hp * Wp == M


@dataclasses.dataclass
class AttentionMap:
    weights: torch.Tensor  # (B, M, N); rows over N sum to 1
    iteration: int
    grid: tuple = None


def slot_softmax(logits):
    """Softmax over the slot axis (last dim) with max-subtraction."""
    return F.softmax(logits - logits.max(dim=-1, keepdim=True).values, dim=-1)


def normalize_attention(attn, eps=NORMALIZE_EPS):
    """Renormalize each slot's weights over locations (weighted-mean trick)."""
    return attn / (attn.sum(dim=-2, keepdim=True) + eps)


def weighted_update(attn_norm, v):
    # (B, M, N)^T x (B, M, D) -> (B, N, D)
    return torch.einsum("bmn,bmd->bnd", attn_norm, v)


def init_slots(params, rng, batch, n_slots):
    """Draw S0 ~ N(mu, diag(sigma)); init_id identifies the draw."""
    if n_slots < 1:
        raise ConfigError("need at least one slot")
    sigma = params.sigma
    if bool((sigma <= 0).any()):
        raise ValueError("slot init sigma must be positive elementwise")
    sigma = sigma.clamp(min=SIGMA_FLOOR)
    dim = params.mu.shape[-1]
    noise = torch.randn(batch, n_slots, dim, generator=rng, dtype=params.mu.dtype)
    slots = params.mu + sigma * noise
    init_id = hashlib.sha1(slots.detach().cpu().numpy().tobytes()).hexdigest()[:16]
    return SlotSet(slots=slots, init_id=init_id)


class SoftPositionEmbed(nn.Module):
    """Linear projection of a 4-channel (x, y, 1-x, 1-y) grid, added to features."""

    def __init__(self, dim, grid):
        super().__init__()
        self.proj = nn.Linear(4, dim)
        h, w = grid
        ys = torch.linspace(0.0, 1.0, h).view(h, 1).expand(h, w)
        xs = torch.linspace(0.0, 1.0, w).view(1, w).expand(h, w)
        coords = torch.stack([xs, ys, 1.0 - xs, 1.0 - ys], dim=-1)  # (h, w, 4)
        self.register_buffer("coords", coords.reshape(h * w, 4))

    def forward(self, flat):  # (B, M, D)
        return flat + self.proj(self.coords)


class _UNetBackbone(nn.Module):
    def __init__(self, in_channels, width, out_dim):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, width, 3, stride=2, padding=1)
        self.enc = nn.Sequential(
            nn.ReLU(), nn.Conv2d(width, width, 3, padding=1), nn.ReLU()
        )
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.mid = nn.Sequential(
            nn.ReLU(), nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU()
        )
        self.up_conv = nn.Conv2d(2 * width + width, width, 3, padding=1)
        self.head = nn.Conv2d(width, out_dim, 3, padding=1)

    def forward(self, x):
        skip = self.enc(self.stem(x))
        mid = self.mid(self.down(skip))
        up = F.interpolate(mid, size=skip.shape[-2:], mode="nearest")
        h = F.relu(self.up_conv(torch.cat([up, skip], dim=1)))
        return self.head(h)


class _CNNBackbone(nn.Module):
    def __init__(self, in_channels, width, out_dim):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(width, width, 5, padding=2),
            nn.ReLU(),
            nn.Conv2d(width, width, 5, padding=2),
            nn.ReLU(),
            nn.Conv2d(width, out_dim, 5, padding=2),
        )

    def forward(self, x):
        return self.net(x)


class Backbone(nn.Module):
    """Image -> flattened FeatureMap at half resolution, position encoding added."""

    ARCHS = ("cnn", "unet")

    def __init__(self, arch="unet", in_channels=3, width=64, feat_dim=64,
                 image_size=32, use_pos_embed=True):
        super().__init__()
        if arch not in self.ARCHS:
            raise ConfigError(f"unsupported backbone arch {arch!r}")
        self.arch = arch
        self.grid = (image_size // 2, image_size // 2)
        self.use_pos_embed = use_pos_embed
        if arch == "unet":
            self.body = _UNetBackbone(in_channels, width, feat_dim)
        else:
            self.body = _CNNBackbone(in_channels, width, feat_dim)
        self.pos = SoftPositionEmbed(feat_dim, self.grid)
        self.norm = nn.LayerNorm(feat_dim)
        self.mlp = nn.Sequential(
            nn.Linear(feat_dim, feat_dim), nn.ReLU(), nn.Linear(feat_dim, feat_dim)
        )

    def forward(self, image):
        h = self.body(image)  # (B, D, Hp, Wp)
        b, d, gh, gw = h.shape
        flat = h.permute(0, 2, 3, 1).reshape(b, gh * gw, d)
        if self.use_pos_embed:
            flat = self.pos(flat)
        flat = self.mlp(self.norm(flat))
        return FeatureMap(features=flat, grid=(gh, gw))


class SlotEncoder(nn.Module):
    """Backbone + iterative slot attention (the object-centric encoder)."""

    def __init__(self, arch="unet", in_channels=3, image_size=32, feat_dim=64,
                 slot_dim=64, n_slots=5, n_iters=7, mlp_hidden=128,
                 use_layernorm=True, use_mlp=True, use_pos_embed=True,
                 backbone_width=64):
        super().__init__()
        if n_iters < 1:
            raise ConfigError("n_iters must be >= 1")
        self.n_slots = n_slots
        self.n_iters = n_iters
        self.slot_dim = slot_dim
        self.use_layernorm = use_layernorm
        self.use_mlp = use_mlp

        self.backbone = Backbone(arch, in_channels, backbone_width, feat_dim,
                                 image_size, use_pos_embed)

        self.slot_mu = nn.Parameter(torch.zeros(slot_dim))
        self.slot_log_sigma = nn.Parameter(torch.zeros(slot_dim))
        nn.init.xavier_uniform_(self.slot_mu.view(1, -1).data)
        nn.init.xavier_uniform_(self.slot_log_sigma.view(1, -1).data)

        self.norm_inputs = nn.LayerNorm(feat_dim)
        self.norm_slots = nn.LayerNorm(slot_dim)
        self.norm_mlp = nn.LayerNorm(slot_dim)
        self.project_q = nn.Linear(slot_dim, slot_dim, bias=False)
        self.project_k = nn.Linear(feat_dim, slot_dim, bias=False)
        self.project_v = nn.Linear(feat_dim, slot_dim, bias=False)
        self.gru = nn.GRUCell(slot_dim, slot_dim)
        self.mlp = nn.Sequential(
            nn.Linear(slot_dim, mlp_hidden), nn.ReLU(), nn.Linear(mlp_hidden, slot_dim)
        )

    @property
    def init_params(self):
        return SlotInitParams(mu=self.slot_mu, sigma=self.slot_log_sigma.exp())

    def init_slots(self, batch, rng, n_slots=None):
        return init_slots(self.init_params, rng, batch, n_slots or self.n_slots)

    def attention(self, features, slots):
        """Eq.-style competition: softmax over slots of k(z) q(S)^T / sqrt(D)."""
        f = features.features if isinstance(features, FeatureMap) else features
        s = slots.slots if isinstance(slots, SlotSet) else slots
        if self.use_layernorm:
            f = self.norm_inputs(f)
            s = self.norm_slots(s)
        k = self.project_k(f)
        q = self.project_q(s)
        logits = torch.einsum("bmd,bnd->bmn", k, q) / (self.slot_dim ** 0.5)
        weights = slot_softmax(logits)
        grid = features.grid if isinstance(features, FeatureMap) else None
        return AttentionMap(weights=weights, iteration=0, grid=grid)

    def _refine(self, slots, features):
        attn = self.attention(features, slots)
        f = features.features if isinstance(features, FeatureMap) else features
        if self.use_layernorm:
            f = self.norm_inputs(f)
        v = self.project_v(f)
        updates = weighted_update(normalize_attention(attn.weights), v)
        b, n, d = slots.shape
        new = self.gru(updates.reshape(b * n, d), slots.reshape(b * n, d)).reshape(b, n, d)
        if self.use_mlp:
            new = new + self.mlp(self.norm_mlp(new))
        return new, attn

    def refine_step(self, slots, features):
        """One refinement iteration; returns the attention map it used."""
        s = slots.slots if isinstance(slots, SlotSet) else slots
        new, attn = self._refine(s, features)
        init_id = slots.init_id if isinstance(slots, SlotSet) else None
        return SlotSet(slots=new, init_id=init_id), attn

    def forward(self, image, rng=None, n_iters=None, implicit=False, shared_init=None):
        """Encode an image batch into slots plus the last-iteration attention.

        shared_init lets two images refine from the identical S0 draw; with
        implicit set, only the final iteration is differentiated (the prefix
        runs detached and the initialization is reconnected first-order).
        """
        features = self.backbone(image)
        b = image.shape[0]
        if shared_init is not None:
            s0 = shared_init
            if s0.slots.shape[0] != b or s0.slots.shape[2] != self.slot_dim:
                raise ValueError(f"shared_init shape {tuple(s0.slots.shape)} does not "
                                 f"match batch {b} / slot dim {self.slot_dim}")
            if s0.slots.shape[1] != self.n_slots:
                raise ValueError(f"shared_init has {s0.slots.shape[1]} slots, "
                                 f"encoder is configured for {self.n_slots}")
        else:
            if rng is None:
                rng = torch.Generator()
                rng.seed()
            s0 = self.init_slots(b, rng)
        n = n_iters if n_iters is not None else self.n_iters
        if n < 1:
            raise ConfigError("n_iters must be >= 1")

        slots = s0.slots
        if implicit and n > 1:
            with torch.no_grad():
                for _ in range(n - 1):
                    slots, _ = self._refine(slots, features)
            # first-order reconnection: gradient flows through the last step only
            slots = slots.detach() + s0.slots - s0.slots.detach()
            slots, attn = self._refine(slots, features)
        else:
            for _ in range(n):
                slots, attn = self._refine(slots, features)
        attn = AttentionMap(weights=attn.weights, iteration=n, grid=features.grid)
        return SlotSet(slots=slots, init_id=s0.init_id), attn
