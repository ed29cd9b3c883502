"""Joint training of both paths, checkpointing, and the evaluation harness.

One optimizer step per batch on the weighted total loss; "fixing the decoders"
for the composition terms is realized structurally: the prior residual is
detached (no gradient into the denoiser) and the surrogate runs with its
parameters frozen while decoding the composite, so only the encoder learns
from those terms.

Checkpoint file: magic ``SCCK``, version u16, named parameter records (binio
format), an optimizer-state section in the same record format, and a JSON
tail holding step, config snapshot, and optimizer hyperparameters.
"""

import contextlib
import dataclasses
import json
import os
import struct

import numpy as np
import torch
import torch.nn.functional as F

from . import binio, compose, diffusion, metrics
from .decoders import SlotConditionedUNet, SurrogateDecoder
from .errors import ConfigError, FormatError
from .slotcore import SlotEncoder

CKPT_MAGIC = b"SCCK"
CKPT_VERSION = 1


@dataclasses.dataclass
class TrainConfig:
    image_size: int = 32
    channels: int = 3
    batch_size: int = 32  # pairs are formed by halving, so this must be even
    steps: int = 20000
    lr: float = 1e-4
    lambda_prior: float = 1.0
    lambda_diff: float = 1.0
    lambda_recon: float = 1.0
    lambda_reg: float = 0.25
    n_slots: int = 5
    slot_dim: int = 64
    feat_dim: int = 64
    n_iters: int = 7
    arch: str = "unet"
    backbone_width: int = 32
    implicit: bool = True
    use_pos_embed: bool = True
    use_slot_mlp: bool = True  # residual MLP after the GRU, switchable
    use_layernorm: bool = True
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    weight_fn: str = "one"
    t_min: float = 0.02
    t_max: float = 0.5
    mix_strategy: str = "shared_init"  # or "random"
    prior_reduce: str = "mean"  # per-pixel scale, comparable with the other terms
    reg_literal_eq8: bool = False
    composite_decoder: str = "surrogate"  # or "tweedie" (ablation)
    tweedie_t_frac: float = 0.9
    denoiser_width: int = 32
    denoiser_mults: tuple = (1, 2)
    denoiser_res_blocks: int = 2
    denoiser_heads: int = 4
    surrogate_grid: int = 8
    surrogate_width: int = 96
    surrogate_layers: int = 4
    surrogate_heads: int = 4
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even (images are paired by halving)")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        for name in ("lambda_prior", "lambda_diff", "lambda_recon", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.mix_strategy not in ("shared_init", "random"):
            raise ConfigError(f"unknown mix_strategy {self.mix_strategy!r}")
        if self.composite_decoder not in ("surrogate", "tweedie"):
            raise ConfigError(f"unknown composite_decoder {self.composite_decoder!r}")

    def lambdas(self):
        return compose.LossWeights(prior=self.lambda_prior, diff=self.lambda_diff,
                                   recon=self.lambda_recon, reg=self.lambda_reg)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["denoiser_mults"] = list(self.denoiser_mults)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "denoiser_mults" in d:
            d["denoiser_mults"] = tuple(d["denoiser_mults"])
        return cls(**d)


class CompositionSystem(torch.nn.Module):
    """Encoder + denoiser (diffusion path) + surrogate decoder (composition path)."""

    def __init__(self, config):
        super().__init__()
        self.encoder = SlotEncoder(
            arch=config.arch, in_channels=config.channels,
            image_size=config.image_size, feat_dim=config.feat_dim,
            slot_dim=config.slot_dim, n_slots=config.n_slots,
            n_iters=config.n_iters, use_pos_embed=config.use_pos_embed,
            use_layernorm=config.use_layernorm, use_mlp=config.use_slot_mlp,
            backbone_width=config.backbone_width,
        )
        self.denoiser = SlotConditionedUNet(
            image_size=config.image_size, channels=config.channels,
            base_width=config.denoiser_width, channel_mults=config.denoiser_mults,
            res_blocks=config.denoiser_res_blocks, slot_dim=config.slot_dim,
            heads=config.denoiser_heads, T=config.T,
        )
        self.surrogate = SurrogateDecoder(
            image_size=config.image_size, channels=config.channels,
            grid=(config.surrogate_grid, config.surrogate_grid),
            width=config.surrogate_width, layers=config.surrogate_layers,
            heads=config.surrogate_heads, slot_dim=config.slot_dim,
        )


@contextlib.contextmanager
def frozen(module):
    """Build graphs through a module while treating its parameters as constants."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


@dataclasses.dataclass
class TrainState:
    config: TrainConfig
    system: CompositionSystem
    optimizer: torch.optim.Optimizer
    schedule: diffusion.NoiseSchedule
    trange: diffusion.TimestepRange
    rng: torch.Generator
    step: int = 0


def init_state(config):
    torch.manual_seed(config.seed)  # parameter init
    system = CompositionSystem(config)
    optimizer = torch.optim.Adam(system.parameters(), lr=config.lr)
    schedule = diffusion.make_schedule(config.T, config.beta_start, config.beta_end,
                                       config.weight_fn)
    trange = diffusion.TimestepRange(config.t_min, config.t_max)
    rng = torch.Generator()
    rng.manual_seed(config.seed + 1)
    return TrainState(config=config, system=system, optimizer=optimizer,
                      schedule=schedule, trange=trange, rng=rng)


def batch_for_step(images, config, step):
    """Deterministic batch selection: a pure function of (seed, step)."""
    n = images.shape[0]
    rng = np.random.default_rng([config.seed, 7919, step])
    idx = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
    x = torch.as_tensor(images[idx], dtype=torch.float32)
    return x.permute(0, 3, 1, 2).contiguous()  # (B, C, H, W)


def _composite_image(state, slots_c):
    """Decode the composite slots with the decoder parameters held fixed."""
    cfg = state.config
    if cfg.composite_decoder == "surrogate":
        with frozen(state.system.surrogate):
            return state.system.surrogate(slots_c)
    # Tweedie ablation: one-step estimate from the diffusion decoder.
    t = max(1, int(round(cfg.tweedie_t_frac * state.schedule.T)))
    b = slots_c.slots.shape[0]
    x_t = torch.randn((b, cfg.channels, cfg.image_size, cfg.image_size),
                      generator=state.rng)
    t_b = torch.full((b,), t, dtype=torch.long)
    with frozen(state.system.denoiser):
        eps_hat = state.system.denoiser(x_t, t_b, slots_c)
    return diffusion.tweedie_one_step(x_t, t_b, eps_hat, state.schedule)


def compute_losses(state, batch):
    """All four loss terms on one batch of 2B' images; returns (breakdown, aux).

    aux exposes the intermediate composite image and slot sets so tests can
    assert the gradient-routing contracts directly.
    """
    cfg = state.config
    sys_ = state.system
    if batch.shape[0] % 2:
        raise ValueError("batch must contain an even number of images")
    bp = batch.shape[0] // 2
    x1, x2 = batch[:bp], batch[bp:]

    shared = cfg.mix_strategy == "shared_init"
    if shared:
        s0 = sys_.encoder.init_slots(bp, state.rng)
        slots1, attn1 = sys_.encoder(x1, implicit=cfg.implicit, shared_init=s0)
        slots2, attn2 = sys_.encoder(x2, implicit=cfg.implicit, shared_init=s0)
    else:
        slots1, attn1 = sys_.encoder(x1, rng=state.rng, implicit=cfg.implicit)
        slots2, attn2 = sys_.encoder(x2, rng=state.rng, implicit=cfg.implicit)
    slots_all = torch.cat([slots1.slots, slots2.slots], dim=0)

    zero = torch.zeros(())
    l_diff = zero
    if cfg.lambda_diff > 0:
        l_diff = diffusion.diffusion_loss(sys_.denoiser, batch, slots_all,
                                          state.rng, state.schedule)
    l_recon = zero
    if cfg.lambda_recon > 0:
        l_recon = F.mse_loss(sys_.surrogate(slots_all), batch)

    aux = {"slots1": slots1, "slots2": slots2, "attn1": attn1, "attn2": attn2,
           "x_c": None, "mix": None}
    l_prior = zero
    l_reg = zero
    if cfg.lambda_prior > 0 or cfg.lambda_reg > 0:
        if shared:
            slots_c, mix = compose.mix_shared_init(slots1, slots2, state.rng)
        else:
            slots_c, mix = compose.mix_random(slots1, slots2, state.rng)
        x_c = _composite_image(state, slots_c)
        aux["x_c"] = x_c
        aux["mix"] = mix
        if cfg.lambda_prior > 0:
            l_prior = diffusion.prior_gradient_loss(
                sys_.denoiser, x_c, slots_c.slots, state.rng, state.schedule,
                state.trange, reduce=cfg.prior_reduce)
        if cfg.lambda_reg > 0:
            if cfg.reg_literal_eq8:
                # literal reading: slots of one image attend over the other's features
                f1 = sys_.encoder.backbone(x1)
                f2 = sys_.encoder.backbone(x2)
                a1 = sys_.encoder.attention(f2, slots1)
                a2 = sys_.encoder.attention(f1, slots2)
            else:
                a1, a2 = attn1, attn2
            l_reg = compose.reg_loss(a1, a2, x1, x2, x_c, mix)

    breakdown = compose.total_loss(l_prior, l_diff, l_recon, l_reg, cfg.lambdas())
    return breakdown, aux


def train_step(state, batch):
    """One optimizer step on the weighted total; returns the detached breakdown."""
    breakdown, _ = compute_losses(state, batch)
    state.optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    state.optimizer.step()
    state.step += 1
    return breakdown.detach()


def train(config, images, out_dir=None, log_cb=None, state=None):
    """Run the training loop over an (n, H, W, C) image array.

    Resumes from ``state`` when given (e.g. a loaded checkpoint); otherwise
    starts fresh. Writes per-step JSONL loss logs and periodic checkpoints
    under out_dir when provided.
    """
    if state is None:
        state = init_state(config)
    log_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_f = open(os.path.join(out_dir, "losses.jsonl"), "a")
    try:
        while state.step < config.steps:
            batch = batch_for_step(images, config, state.step)
            breakdown = train_step(state, batch)
            if log_f is not None and state.step % config.log_every == 0:
                rec = {"step": state.step, **{k: getattr(breakdown, k) for k in
                                              ("total", "prior", "diff", "recon", "reg")}}
                log_f.write(json.dumps(rec) + "\n")
                log_f.flush()
            if log_cb is not None:
                log_cb(state.step, breakdown)
            if out_dir is not None and (
                state.step % config.checkpoint_every == 0 or state.step == config.steps
            ):
                save_checkpoint(state, os.path.join(out_dir, "ckpt_latest.scck"))
    finally:
        if log_f is not None:
            log_f.close()
    return state


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(state, path):
    tensors = {name: t.detach().cpu().numpy()
               for name, t in state.system.state_dict().items()}
    param_names = [n for n, _ in state.system.named_parameters()]
    opt_sd = state.optimizer.state_dict()
    opt_arrays = {}
    saved_opt_names = []
    for idx, name in enumerate(param_names):
        st = opt_sd["state"].get(idx)
        if st is None:
            continue
        saved_opt_names.append(name)
        opt_arrays[f"{name}.step"] = np.asarray([float(st["step"])], dtype=np.float64)
        opt_arrays[f"{name}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
        opt_arrays[f"{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
    opt_arrays["rng.torch_state"] = state.rng.get_state().numpy()

    group = opt_sd["param_groups"][0]
    tail = {
        "step": state.step,
        "config": state.config.to_dict(),
        "optimizer": {
            "name": "adam",
            "lr": group["lr"],
            "betas": list(group["betas"]),
            "eps": group["eps"],
            "weight_decay": group["weight_decay"],
            "param_names": saved_opt_names,
        },
    }
    payload = json.dumps(tail, sort_keys=True).encode("utf-8")

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<H", CKPT_VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            binio.write_named_array(f, name, tensors[name])
        f.write(struct.pack("<I", len(opt_arrays)))
        for name in sorted(opt_arrays):
            binio.write_named_array(f, name, opt_arrays[name])
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
    os.replace(tmp, path)


def _read_section(f, what):
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError(f"truncated checkpoint while reading {what} count")
    (count,) = struct.unpack("<I", raw)
    out = {}
    for _ in range(count):
        name, arr = binio.read_named_array(f)
        out[name] = arr
    return out


def load_checkpoint(path):
    """Rebuild a full TrainState; fails cleanly on truncation or version skew."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        raw = f.read(2)
        if len(raw) != 2:
            raise FormatError("truncated checkpoint header")
        (version,) = struct.unpack("<H", raw)
        if version != CKPT_VERSION:
            raise FormatError(
                f"checkpoint version {version} is incompatible with reader "
                f"version {CKPT_VERSION}"
            )
        tensors = _read_section(f, "parameter")
        opt_arrays = _read_section(f, "optimizer")
        raw = f.read(4)
        if len(raw) != 4:
            raise FormatError("truncated checkpoint while reading config length")
        (tail_len,) = struct.unpack("<I", raw)
        payload = f.read(tail_len)
        if len(payload) != tail_len:
            raise FormatError("truncated checkpoint config snapshot")
    tail = json.loads(payload.decode("utf-8"))

    config = TrainConfig.from_dict(tail["config"])
    state = init_state(config)
    state.step = int(tail["step"])
    state.system.load_state_dict(
        {name: torch.as_tensor(arr) for name, arr in tensors.items()}, strict=True
    )

    opt_info = tail["optimizer"]
    param_names = [n for n, _ in state.system.named_parameters()]
    opt_state = {}
    for name in opt_info["param_names"]:
        idx = param_names.index(name)
        ref = dict(state.system.named_parameters())[name]
        opt_state[idx] = {
            "step": torch.tensor(float(opt_arrays[f"{name}.step"][0])),
            "exp_avg": torch.as_tensor(opt_arrays[f"{name}.exp_avg"]).to(ref.dtype),
            "exp_avg_sq": torch.as_tensor(opt_arrays[f"{name}.exp_avg_sq"]).to(ref.dtype),
        }
    groups = state.optimizer.state_dict()["param_groups"]
    groups[0].update(lr=opt_info["lr"], betas=tuple(opt_info["betas"]),
                     eps=opt_info["eps"], weight_decay=opt_info["weight_decay"])
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    state.rng.set_state(torch.as_tensor(opt_arrays["rng.torch_state"]))
    return state


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def score_masks(pred_list, gt_list):
    """Mean fg_ari / miou / mbo over parallel lists of predicted and gt masks."""
    per = [(metrics.fg_ari(p, g), metrics.miou(p, g), metrics.mbo(p, g))
           for p, g in zip(pred_list, gt_list)]
    arr = np.asarray(per, dtype=np.float64)
    return tuple(arr.mean(axis=0))


def encode_dataset(state, images, batch=32, seed=0, implicit=None):
    """Encode an (n, H, W, C) array; returns (slots list, SegMasks list)."""
    cfg = state.config
    implicit = cfg.implicit if implicit is None else implicit
    rng = torch.Generator()
    rng.manual_seed(seed)
    slots_out, masks_out = [], []
    for lo in range(0, images.shape[0], batch):
        x = torch.as_tensor(images[lo:lo + batch], dtype=torch.float32)
        x = x.permute(0, 3, 1, 2).contiguous()
        with torch.no_grad():
            slot_set, attn = state.system.encoder(x, rng=rng, implicit=implicit)
        slots_out.extend(slot_set.slots)
        masks_out.extend(metrics.extract_masks(attn))
    return slots_out, masks_out


def evaluate(state, dataset, batch=32, seed=0, loss_batches=2, panel_dir=None,
             n_panels=0, panel_steps=100):
    """Segmentation metrics plus averaged loss terms on a held-out dataset.

    With panel_dir set, also renders n_panels composite-image panels (two
    sources mixed, decoded by the surrogate and by ancestral sampling) for
    qualitative inspection.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    images = dataset.images()
    _, pred = encode_dataset(state, images, batch=batch, seed=seed)
    gt = [s.gt_masks for s in dataset.samples]
    ari, iou, bo = score_masks(pred, gt)

    losses = {}
    if loss_batches > 0:
        saved = state.rng.get_state()
        state.rng.manual_seed(seed + 17)
        sums = {}
        n_b = 0
        for lo in range(0, min(loss_batches * batch, len(dataset)) - 1, batch):
            x = torch.as_tensor(images[lo:lo + batch], dtype=torch.float32)
            x = x.permute(0, 3, 1, 2).contiguous()
            if x.shape[0] % 2:
                x = x[:-1]
            if x.shape[0] < 2:
                continue
            breakdown, _ = compute_losses(state, x)
            d = breakdown.to_dict()
            for k in ("prior", "diff", "recon", "reg", "total"):
                sums[k] = sums.get(k, 0.0) + d[k]
            n_b += 1
        losses = {k: v / max(n_b, 1) for k, v in sums.items()}
        losses["lambdas"] = dataclasses.asdict(state.config.lambdas())
        state.optimizer.zero_grad(set_to_none=True)
        state.rng.set_state(saved)
    if panel_dir is not None and n_panels > 0:
        render_composite_panels(state, dataset, panel_dir, n_panels=n_panels,
                                steps=panel_steps, seed=seed)
    return metrics.MetricsReport(fg_ari=float(ari), miou=float(iou), mbo=float(bo),
                                 n_samples=len(dataset), losses=losses)


def render_composite_panels(state, dataset, out_dir, n_panels=4, steps=100, seed=0):
    """Mix random pairs and render source | surrogate | sampled composites."""
    from . import viz

    os.makedirs(out_dir, exist_ok=True)
    rng = torch.Generator()
    rng.manual_seed(seed)
    cfg = state.config
    paths = []
    for i in range(n_panels):
        a = int(torch.randint(0, len(dataset), (1,), generator=rng))
        b = int(torch.randint(0, len(dataset), (1,), generator=rng))
        xa = torch.as_tensor(dataset[a].image).permute(2, 0, 1)[None].float()
        xb = torch.as_tensor(dataset[b].image).permute(2, 0, 1)[None].float()
        with torch.no_grad():
            if cfg.mix_strategy == "shared_init":
                s0 = state.system.encoder.init_slots(1, rng)
                sa, _ = state.system.encoder(xa, implicit=cfg.implicit, shared_init=s0)
                sb, _ = state.system.encoder(xb, implicit=cfg.implicit, shared_init=s0)
                mixed, _ = compose.mix_shared_init(sa, sb, rng)
            else:
                sa, _ = state.system.encoder(xa, rng=rng, implicit=cfg.implicit)
                sb, _ = state.system.encoder(xb, rng=rng, implicit=cfg.implicit)
                mixed, _ = compose.mix_random(sa, sb, rng)
            surr = state.system.surrogate(mixed)
        sampled = diffusion.sample(state.system.denoiser, mixed, state.schedule,
                                   steps, rng, surr.shape)
        tiles = [viz.to_uint8(t) for t in (xa[0], xb[0], surr[0], sampled[0])]
        path = os.path.join(out_dir, f"composite_{i:02d}.png")
        viz.save_png(viz.panel(tiles), path)
        paths.append(path)
    return paths


def probe_checkpoint(state, dataset, prop, max_samples=None, seed=0,
                     probe_kwargs=None):
    """Object-property probe on frozen slots from this training state."""
    rng = torch.Generator()
    rng.manual_seed(seed)

    def encode_fn(images):
        return state.system.encoder(images, rng=rng, implicit=state.config.implicit)

    return metrics.property_probe(dataset, encode_fn, prop,
                                  max_samples=max_samples, seed=seed,
                                  probe_kwargs=probe_kwargs)


# ---------------------------------------------------------------------------
# Compositional edits and ablation
# ---------------------------------------------------------------------------

def slot_edit_iou(state, dataset, n_edits=20, seed=0, change_threshold=0.1):
    """Mean IoU between each slot-removal change mask and the removed object.

    For each edit: encode, match slots to gt objects, drop one matched slot,
    re-decode with the surrogate, and compare the changed-pixel mask against
    the object's ground-truth mask at image resolution.
    """
    rng = torch.Generator()
    rng.manual_seed(seed)
    ious = []
    i = 0
    while len(ious) < n_edits and i < len(dataset) * 4:
        sample = dataset[i % len(dataset)]
        i += 1
        if not sample.visible:
            continue
        x = torch.as_tensor(sample.image, dtype=torch.float32)
        x = x.permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            slot_set, attn = state.system.encoder(x, rng=rng,
                                                  implicit=state.config.implicit)
            seg = metrics.extract_masks(attn)[0]
            matches = metrics.match_slots_to_objects(seg, sample.gt_masks)
            if not matches:
                continue
            slot_label, obj_id, _ = max(matches, key=lambda m: m[2])
            full = state.system.surrogate(slot_set)
            keep = [j for j in range(slot_set.slots.shape[1]) if j != slot_label - 1]
            dropped = state.system.surrogate(slot_set.slots[:, keep])
        change = (full - dropped).abs().amax(dim=1)[0].numpy() > change_threshold
        obj = sample.gt_masks == obj_id
        inter = np.logical_and(change, obj).sum()
        union = np.logical_or(change, obj).sum()
        ious.append(inter / union if union else 0.0)
    if not ious:
        raise ValueError("no usable edits found in the dataset")
    return float(np.mean(ious))


# Rows mirroring the published ablation: toggling the prior term, the mask
# regularizer, and shared slot initialization.
DEFAULT_ABLATION_ROWS = (
    ("baseline", {"lambda_prior": 0.0, "lambda_reg": 0.0, "mix_strategy": "random"}),
    ("prior", {"lambda_reg": 0.0, "mix_strategy": "random"}),
    ("prior_shared", {"lambda_reg": 0.0}),
    ("reg_shared", {"lambda_prior": 0.0}),
    ("full", {}),
)


def run_ablation(base_config, train_images, val_dataset, rows=DEFAULT_ABLATION_ROWS,
                 out_dir=None, log_cb=None):
    """Train each row from the same seed and report metrics per configuration."""
    results = []
    for name, overrides in rows:
        cfg = TrainConfig.from_dict({**base_config.to_dict(), **overrides})
        row_dir = os.path.join(out_dir, name) if out_dir else None
        state = train(cfg, train_images, out_dir=row_dir, log_cb=log_cb)
        report = evaluate(state, val_dataset, seed=cfg.seed)
        results.append({"row": name, "overrides": overrides, "seed": cfg.seed,
                        "report": report})
        if out_dir:
            with open(os.path.join(out_dir, f"{name}_report.json"), "w") as f:
                f.write(report.to_json())
    return results
