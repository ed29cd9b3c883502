"""Slot mixing strategies, the attention-mask regularizer, and loss assembly.

Mixing never synthesizes slot values: every composite slot is one of the 2N
source slots, and the MixSpec is enough to rebuild the composite from the two
sources. One MixSpec is drawn per call and applied across the batch.
"""

import dataclasses

import torch
import torch.nn.functional as F

from .errors import ContractError, TrainingAbort
from .slotcore import AttentionMap, SlotSet


@dataclasses.dataclass(frozen=True)
class MixSpec:
    strategy: str  # "random" | "shared_init"
    picks: tuple = None  # random: sorted indices into the 2N union
    partition: tuple = None  # shared_init: (I1, I2), 0-based slot indices

    def sources(self, n_slots):
        """Source slot columns taken from image 1 and image 2 respectively."""
        if self.strategy == "random":
            i1 = tuple(p for p in self.picks if p < n_slots)
            i2 = tuple(p - n_slots for p in self.picks if p >= n_slots)
            return i1, i2
        return self.partition


def _paired(s1, s2):
    a = s1.slots if isinstance(s1, SlotSet) else s1
    b = s2.slots if isinstance(s2, SlotSet) else s2
    if a.shape != b.shape:
        raise ValueError(f"slot sets differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def mix_random(s1, s2, rng):
    """Uniformly take N of the 2N slots (without replacement), sorted by source index."""
    a, b = _paired(s1, s2)
    n = a.shape[1]
    picks = tuple(sorted(torch.randperm(2 * n, generator=rng)[:n].tolist()))
    union = torch.cat([a, b], dim=1)
    mixed = union[:, list(picks)]
    return SlotSet(slots=mixed, init_id=None), MixSpec(strategy="random", picks=picks)


def mix_shared_init(s1, s2, rng):
    """Index-exclusive mix of two encodings that share the same S0 draw."""
    if not isinstance(s1, SlotSet) or not isinstance(s2, SlotSet):
        raise ContractError("shared-init mixing needs SlotSets carrying init ids")
    if s1.init_id is None or s1.init_id != s2.init_id:
        raise ContractError(
            "shared-init mixing requires both encodings to start from the identical "
            f"S0 draw (init ids {s1.init_id!r} vs {s2.init_id!r})"
        )
    a, b = _paired(s1, s2)
    n = a.shape[1]
    if n == 1:
        take_first = bool(torch.randint(0, 2, (1,), generator=rng).item())
        i1 = (0,) if take_first else ()
    else:
        while True:  # uniform over the 2^N - 2 both-nonempty partitions
            sides = torch.randint(0, 2, (n,), generator=rng)
            if 0 < int(sides.sum()) < n:
                break
        i1 = tuple(i for i in range(n) if sides[i] == 1)
    i2 = tuple(i for i in range(n) if i not in i1)
    mask = torch.zeros(n, dtype=torch.bool)
    mask[list(i1)] = True
    mixed = torch.where(mask.view(1, n, 1), a, b)
    spec = MixSpec(strategy="shared_init", partition=(i1, i2))
    return SlotSet(slots=mixed, init_id=s1.init_id), spec


def _pooled_error(x, x_c, grid):
    """Per-pixel squared error, stop-gradient, area-mean pooled to the grid."""
    h, w = x.shape[-2:]
    gh, gw = grid
    if h % gh or w % gw:
        raise ValueError(f"image {h}x{w} does not pool evenly to attention grid {gh}x{gw}")
    with torch.no_grad():
        err = ((x - x_c) ** 2).sum(dim=1, keepdim=True)  # (B, 1, H, W)
        err = F.avg_pool2d(err, (h // gh, w // gw))
    return err.reshape(x.shape[0], gh * gw)  # (B, M)


def reg_loss(a1, a2, x1, x2, x_c, spec):
    """Attention-mask consistency term; gradients reach the encoder via A only.

    For each source image, the selected slot columns' attention is weighted by
    the (stop-gradient) pooled squared error between that source and the
    composite, and averaged.
    """
    w1 = a1.weights if isinstance(a1, AttentionMap) else a1
    w2 = a2.weights if isinstance(a2, AttentionMap) else a2
    grid = a1.grid if isinstance(a1, AttentionMap) else a2.grid
    n = w1.shape[-1]
    i1, i2 = spec.sources(n)
    e1 = _pooled_error(x1, x_c, grid)
    e2 = _pooled_error(x2, x_c, grid)
    zero = x_c.sum() * 0.0  # keeps the return differentiable-typed when a side is empty
    t1 = (w1[:, :, list(i1)] * e1.unsqueeze(-1)).mean() if i1 else zero
    t2 = (w2[:, :, list(i2)] * e2.unsqueeze(-1)).mean() if i2 else zero
    return t1 + t2


@dataclasses.dataclass(frozen=True)
class LossWeights:
    prior: float = 1.0
    diff: float = 1.0
    recon: float = 1.0
    reg: float = 0.25


@dataclasses.dataclass
class LossBreakdown:
    prior: object
    diff: object
    recon: object
    reg: object
    total: object
    lambdas: LossWeights

    def detach(self):
        vals = {
            k: float(getattr(self, k).detach()) if torch.is_tensor(getattr(self, k))
            else float(getattr(self, k))
            for k in ("prior", "diff", "recon", "reg", "total")
        }
        return LossBreakdown(lambdas=self.lambdas, **vals)

    def to_dict(self):
        d = self.detach()
        return {
            "prior": d.prior, "diff": d.diff, "recon": d.recon, "reg": d.reg,
            "total": d.total,
            "lambdas": dataclasses.asdict(self.lambdas),
        }


def total_loss(prior, diff, recon, reg, lambdas=LossWeights()):
    """Weighted sum per the training objective; aborts on non-finite terms."""
    terms = {"prior": prior, "diff": diff, "recon": recon, "reg": reg}
    for name, value in terms.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if v != v or v in (float("inf"), float("-inf")):
            raise TrainingAbort(name, v)
    total = (
        lambdas.prior * prior + lambdas.diff * diff
        + lambdas.recon * recon + lambdas.reg * reg
    )
    return LossBreakdown(prior=prior, diff=diff, recon=recon, reg=reg,
                         total=total, lambdas=lambdas)
