"""PNG rendering helpers for segmentation overlays and composite panels."""

import numpy as np
from PIL import Image

# Fixed palette keyed by slot index, so panels are comparable across checkpoints.
SLOT_COLORS = np.array(
    [
        (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (170, 110, 40),
    ],
    dtype=np.uint8,
)


def to_uint8(img):
    """(H, W, C) or (C, H, W) float image in [-1, 1] -> (H, W, C) uint8."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[-1] not in (1, 3):
        arr = np.moveaxis(arr, 0, -1)
    arr = (np.clip(arr, -1.0, 1.0) + 1.0) * 127.5
    return arr.round().astype(np.uint8)


def upsample_labels(labels, out_hw):
    labels = np.asarray(labels)
    oh, ow = out_hw
    rows = np.floor(np.arange(oh) * labels.shape[0] / oh).astype(int)
    cols = np.floor(np.arange(ow) * labels.shape[1] / ow).astype(int)
    return labels[np.ix_(rows, cols)]


def overlay_segmentation(image, labels, alpha=0.55):
    """Blend slot-colored segmentation over the image; labels are 1-based."""
    base = to_uint8(image)
    lab = upsample_labels(labels, base.shape[:2])
    colors = SLOT_COLORS[(lab - 1) % len(SLOT_COLORS)]
    out = (1 - alpha) * base.astype(np.float64) + alpha * colors.astype(np.float64)
    return out.round().astype(np.uint8)


def panel(images, pad=2):
    """Concatenate same-size uint8 images horizontally with white padding."""
    tiles = [np.asarray(im, dtype=np.uint8) for im in images]
    h = tiles[0].shape[0]
    spacer = np.full((h, pad, 3), 255, dtype=np.uint8)
    row = []
    for i, t in enumerate(tiles):
        if i:
            row.append(spacer)
        row.append(t)
    return np.concatenate(row, axis=1)


def save_png(arr, path, scale=4):
    img = Image.fromarray(np.asarray(arr, dtype=np.uint8))
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)
