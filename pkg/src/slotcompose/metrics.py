"""Unsupervised segmentation metrics and the object-property probe.

All metrics are pure numpy, operate at the attention grid resolution, and are
invariant to slot relabeling. Ground-truth masks are brought to the grid by
nearest-neighbor (labels are never interpolated).
"""

import dataclasses
import json
import warnings

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.special import comb

from .slotcore import AttentionMap


@dataclasses.dataclass
class SegMasks:
    labels: np.ndarray  # (H', W') int, values in 1..N


@dataclasses.dataclass
class MetricsReport:
    fg_ari: float
    miou: float
    mbo: float
    n_samples: int
    losses: dict = dataclasses.field(default_factory=dict)

    def to_json(self):
        return json.dumps(
            {"fg_ari": self.fg_ari, "miou": self.miou, "mbo": self.mbo,
             "n_samples": self.n_samples, "losses": self.losses},
            indent=2, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(fg_ari=d["fg_ari"], miou=d["miou"], mbo=d["mbo"],
                   n_samples=d["n_samples"], losses=d.get("losses", {}))


def extract_masks(attn, grid=None):
    """Hard segmentation per location: argmax over slots, first index on ties."""
    if isinstance(attn, AttentionMap):
        weights = attn.weights.detach().cpu().numpy()
        grid = grid or attn.grid
    else:
        weights = np.asarray(attn)
    if weights.ndim == 2:
        weights = weights[None]
    labels = np.argmax(weights, axis=-1).astype(np.int32) + 1  # (B, M)
    if grid is not None:
        labels = labels.reshape(labels.shape[0], *grid)
    return [SegMasks(labels=lab) for lab in labels]


def resize_nearest(labels, out_hw):
    """Nearest-neighbor label resize via pixel-center sampling."""
    labels = np.asarray(labels)
    h, w = labels.shape
    oh, ow = out_hw
    rows = np.clip(np.floor((np.arange(oh) + 0.5) * h / oh).astype(int), 0, h - 1)
    cols = np.clip(np.floor((np.arange(ow) + 0.5) * w / ow).astype(int), 0, w - 1)
    return labels[np.ix_(rows, cols)]


def _labels(x):
    return np.asarray(x.labels if isinstance(x, SegMasks) else x)


def _aligned(pred, gt):
    pred = _labels(pred)
    gt = _labels(gt)
    if gt.shape != pred.shape:
        gt = resize_nearest(gt, pred.shape)
    return pred, gt


def contingency_table(a, b):
    """Co-occurrence counts between two flat label arrays."""
    av, ai = np.unique(a, return_inverse=True)
    bv, bi = np.unique(b, return_inverse=True)
    table = np.zeros((len(av), len(bv)), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def ari_from_table(table):
    """Adjusted Rand index from a contingency table (standard formula)."""
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    n = a.sum()
    sum_ij = comb(table, 2).sum()
    sum_a = comb(a, 2).sum()
    sum_b = comb(b, 2).sum()
    expected = sum_a * sum_b / comb(n, 2) if n >= 2 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:  # both partitions trivial; identical by construction
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def fg_ari(pred, gt):
    """ARI restricted to ground-truth foreground pixels."""
    pred, gt = _aligned(pred, gt)
    fg = gt > 0
    if not fg.any():
        warnings.warn("fg_ari: sample has no foreground pixels; returning 0")
        return 0.0
    return ari_from_table(contingency_table(pred[fg].ravel(), gt[fg].ravel()))


def hungarian(cost):
    """Minimum-cost injection from the smaller side of a K x L matrix into the larger."""
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian requires finite costs")
    rows, cols = linear_sum_assignment(cost)
    return rows, cols


def _segment_ids(gt, include_background):
    ids = np.unique(gt)
    if not include_background:
        ids = ids[ids > 0]
    return ids


def _iou_matrix(pred, gt, gt_ids, pred_ids):
    iou = np.zeros((len(gt_ids), len(pred_ids)), dtype=np.float64)
    for i, g in enumerate(gt_ids):
        gmask = gt == g
        gsum = gmask.sum()
        for j, p in enumerate(pred_ids):
            pmask = pred == p
            inter = np.logical_and(gmask, pmask).sum()
            union = gsum + pmask.sum() - inter
            iou[i, j] = inter / union if union else 0.0
    return iou


def miou(pred, gt, include_background=True):
    """Mean IoU over gt segments under the optimal one-to-one slot matching."""
    pred, gt = _aligned(pred, gt)
    gt_ids = _segment_ids(gt, include_background)
    if len(gt_ids) == 0:
        return 0.0
    pred_ids = np.unique(pred)
    iou = _iou_matrix(pred, gt, gt_ids, pred_ids)
    rows, cols = hungarian(1.0 - iou)
    total = iou[rows, cols].sum()
    return float(total / len(gt_ids))


def mbo(pred, gt, include_background=True):
    """Mean best overlap: per gt segment, the best IoU over all predicted masks."""
    pred, gt = _aligned(pred, gt)
    gt_ids = _segment_ids(gt, include_background)
    if len(gt_ids) == 0:
        return 0.0
    pred_ids = np.unique(pred)
    iou = _iou_matrix(pred, gt, gt_ids, pred_ids)
    return float(iou.max(axis=1).mean())


# ---------------------------------------------------------------------------
# Object-property probe
# ---------------------------------------------------------------------------

def match_slots_to_objects(pred, gt):
    """Pair slot regions with gt objects by maximum-IoU one-to-one matching.

    Returns [(slot_label, object_id, iou), ...] for pairs with positive overlap;
    unmatched slots are treated as background by callers.
    """
    pred, gt = _aligned(pred, gt)
    obj_ids = np.unique(gt)
    obj_ids = obj_ids[obj_ids > 0]
    slot_ids = np.unique(pred)
    if len(obj_ids) == 0 or len(slot_ids) == 0:
        return []
    iou = _iou_matrix(pred, gt, obj_ids, slot_ids)
    rows, cols = hungarian(1.0 - iou)
    return [
        (int(slot_ids[c]), int(obj_ids[r]), float(iou[r, c]))
        for r, c in zip(rows, cols)
        if iou[r, c] > 0.0
    ]


def fit_probe(features, targets, kind, hidden=196, n_layers=4, epochs=300,
              lr=1e-3, seed=0, val_frac=0.2):
    """Train a small MLP readout on frozen features.

    kind "categorical" returns held-out accuracy; "continuous" returns held-out
    mean squared error. The network has n_layers linear layers with the given
    hidden width.
    """
    x = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    if kind == "categorical":
        y = torch.as_tensor(np.asarray(targets), dtype=torch.long)
        out_dim = int(y.max()) + 1
    elif kind == "continuous":
        y = torch.as_tensor(np.asarray(targets), dtype=torch.float32)
        if y.ndim == 1:
            y = y[:, None]
        out_dim = y.shape[1]
    else:
        raise ValueError(f"unknown probe kind {kind!r}")

    n = x.shape[0]
    if n < 4:
        raise ValueError("probe needs at least 4 examples")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        perm = torch.randperm(n)
        n_val = max(1, int(round(val_frac * n)))
        val_idx, train_idx = perm[:n_val], perm[n_val:]

        layers = [torch.nn.Linear(x.shape[1], hidden), torch.nn.ReLU()]
        for _ in range(n_layers - 2):
            layers += [torch.nn.Linear(hidden, hidden), torch.nn.ReLU()]
        layers.append(torch.nn.Linear(hidden, out_dim))
        net = torch.nn.Sequential(*layers)

        opt = torch.optim.Adam(net.parameters(), lr=lr)
        loss_fn = (torch.nn.CrossEntropyLoss() if kind == "categorical"
                   else torch.nn.MSELoss())
        xt, yt = x[train_idx], y[train_idx]
        for _ in range(epochs):
            opt.zero_grad()
            loss = loss_fn(net(xt), yt)
            loss.backward()
            opt.step()

        with torch.no_grad():
            pred = net(x[val_idx])
    if kind == "categorical":
        return float((pred.argmax(dim=1) == y[val_idx]).float().mean())
    return float(((pred - y[val_idx]) ** 2).mean())


PROBE_PROPERTIES = ("position", "shape", "color")


def property_probe(dataset, encode_fn, prop, max_samples=None, seed=0,
                   probe_kwargs=None):
    """Predict an object property from the frozen slot of its matched region.

    encode_fn maps an image batch (B, C, H, W) to (SlotSet, AttentionMap).
    Returns accuracy for categorical properties, MSE for position.
    """
    if prop not in PROBE_PROPERTIES:
        raise ValueError(f"property must be one of {PROBE_PROPERTIES}")
    from .scenegen import PALETTE, SHAPES  # property vocabularies

    feats, labels = [], []
    n = len(dataset) if max_samples is None else min(max_samples, len(dataset))
    for i in range(n):
        sample = dataset[i]
        if len(sample.visible) < 1:
            continue
        img = torch.as_tensor(sample.image, dtype=torch.float32)
        img = img.permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            slot_set, attn = encode_fn(img)
        seg = extract_masks(attn)[0]
        for slot_label, obj_id, _ in match_slots_to_objects(seg, sample.gt_masks):
            obj = sample.properties[obj_id - 1]
            vec = slot_set.slots[0, slot_label - 1].detach().cpu().numpy()
            feats.append(vec)
            if prop == "shape":
                labels.append(SHAPES.index(obj.shape))
            elif prop == "color":
                labels.append(obj.color)
            else:
                labels.append([obj.position[0], obj.position[1]])
    if len(feats) < 4:
        raise ValueError("too few matched slot/object pairs to train a probe")
    kind = "continuous" if prop == "position" else "categorical"
    return fit_probe(np.stack(feats), np.asarray(labels), kind, seed=seed,
                     **(probe_kwargs or {}))
