"""Command-line entry points: generate-data, train, eval, compose, ablate.

Every command takes --config (JSON overlaid by flags) and a global --seed, and
logs the fully resolved configuration. Exit codes: 0 success, 2 usage error,
1 runtime error.
"""

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import diffusion, metrics, trainer, viz
from .errors import ConfigError
from .scenegen import GeneratorConfig, SpriteDataset, make_dataset
from .trainer import TrainConfig


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _resolved(out_dir, config_dict, extra=None):
    resolved = dict(config_dict)
    if extra:
        resolved.update(extra)
    print("resolved config: " + json.dumps(resolved, sort_keys=True))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
            json.dump(resolved, f, indent=2, sort_keys=True)
            f.write("\n")
    return resolved


def _train_config(args, parser):
    base = {}
    if args.config:
        base.update(_load_json(args.config))
    overrides = {
        "seed": args.seed,
        "steps": args.steps,
        "batch_size": args.batch_size,
        "mix_strategy": args.mix,
    }
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    if args.no_prior:
        base["lambda_prior"] = 0.0
    if args.no_reg:
        base["lambda_reg"] = 0.0
    if args.no_implicit:
        base["implicit"] = False
    try:
        return TrainConfig.from_dict(base)
    except ConfigError as e:
        parser.error(str(e))


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file (TrainConfig keys)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--mix", choices=["shared_init", "random"], default=None)
    p.add_argument("--no-prior", action="store_true",
                   help="disable the composition prior term (lambda_prior = 0)")
    p.add_argument("--no-reg", action="store_true",
                   help="disable the attention-mask regularizer (lambda_reg = 0)")
    p.add_argument("--no-implicit", action="store_true",
                   help="differentiate all refinement iterations")


def cmd_generate_data(args, parser):
    base = {}
    if args.config:
        base.update(_load_json(args.config))
    if args.k_min is not None:
        base["k_min"] = args.k_min
    if args.k_max is not None:
        base["k_max"] = args.k_max
    if args.canvas is not None:
        base["canvas"] = [args.canvas, args.canvas]
    try:
        config = GeneratorConfig.from_dict(base) if base else GeneratorConfig()
    except (ConfigError, TypeError) as e:
        parser.error(str(e))
    if args.n < 1:
        parser.error("--n must be >= 1")
    _resolved(args.out, config.to_dict(),
              {"n": args.n, "seed": args.seed, "split": args.split})
    manifest = make_dataset(args.n, config, args.seed, args.out,
                            split=args.split, overwrite=args.overwrite)
    print(f"wrote {manifest['n']} samples to {args.out} "
          f"(split={manifest['split']}, config_hash={manifest['config_hash'][:12]})")
    return 0


def cmd_train(args, parser):
    config = _train_config(args, parser)
    if not os.path.isdir(args.data):
        raise FileNotFoundError(f"dataset directory not found: {args.data}")
    dataset = SpriteDataset.load(args.data)
    _resolved(args.out, config.to_dict(), {"data": args.data})
    state = None
    latest = os.path.join(args.out, "ckpt_latest.scck")
    if args.resume and os.path.exists(latest):
        state = trainer.load_checkpoint(latest)
        print(f"resuming from step {state.step}")

    def log_cb(step, breakdown):
        if step % max(1, config.steps // 50) == 0 or step == 1:
            print(f"step {step}/{config.steps} total={breakdown.total:.4f} "
                  f"diff={breakdown.diff:.4f} recon={breakdown.recon:.4f} "
                  f"prior={breakdown.prior:.4f} reg={breakdown.reg:.4f}")

    state = trainer.train(config, dataset.images(), out_dir=args.out,
                          log_cb=log_cb, state=state)
    final = os.path.join(args.out, "ckpt_latest.scck")
    trainer.save_checkpoint(state, final)
    print(f"done: {final}")
    return 0


def _override_state_config(state, config_path, parser):
    """Overlay a JSON config file onto the checkpoint's config snapshot."""
    if not config_path:
        return
    try:
        merged = TrainConfig.from_dict({**state.config.to_dict(),
                                        **_load_json(config_path)})
    except ConfigError as e:
        parser.error(str(e))
    state.config = merged


def cmd_eval(args, parser):
    state = trainer.load_checkpoint(args.checkpoint)
    _override_state_config(state, args.config, parser)
    dataset = SpriteDataset.load(args.data)
    _resolved(args.out, state.config.to_dict(),
              {"checkpoint": args.checkpoint, "data": args.data, "seed": args.seed})
    report = trainer.evaluate(state, dataset, seed=args.seed,
                              panel_dir=args.out if args.panels else None,
                              n_panels=args.panels, panel_steps=args.panel_steps)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "metrics.json")
    with open(report_path, "w") as f:
        f.write(report.to_json())
    print(report.to_json())

    if args.overlays > 0:
        images = dataset.images()[: args.overlays]
        _, masks = trainer.encode_dataset(state, images, seed=args.seed)
        for i, seg in enumerate(masks):
            overlay = viz.overlay_segmentation(images[i], seg.labels)
            viz.save_png(overlay, os.path.join(args.out, f"overlay_{i:03d}.png"))
        print(f"wrote {len(masks)} overlays to {args.out}")
    print(f"report: {report_path}")
    return 0


def compose_tiles(state, dataset, sample_a, sample_b, slots_a, slots_b,
                  steps=250, seed=0):
    """Encode two samples, swap the requested slots, decode both ways."""
    rng = torch.Generator()
    rng.manual_seed(seed)
    xa = torch.as_tensor(dataset[sample_a].image).permute(2, 0, 1)[None].float()
    xb = torch.as_tensor(dataset[sample_b].image).permute(2, 0, 1)[None].float()
    with torch.no_grad():
        sa, _ = state.system.encoder(xa, rng=rng, implicit=state.config.implicit)
        sb, _ = state.system.encoder(xb, rng=rng, implicit=state.config.implicit)
        mixed = torch.cat([sa.slots[:, list(slots_a)], sb.slots[:, list(slots_b)]],
                          dim=1)
        recon_a = state.system.surrogate(sa)
        surr = state.system.surrogate(mixed)
    diff = diffusion.sample(state.system.denoiser, mixed, state.schedule,
                            steps, rng, surr.shape)
    return {"image_a": xa, "image_b": xb, "recon_a": recon_a,
            "surrogate": surr, "diffusion": diff, "mixed_slots": mixed}


def _parse_slot_list(text, n_slots, parser, flag):
    if text is None:
        return []
    if text.strip() == "":
        return []
    try:
        idx = [int(tok) for tok in text.split(",")]
    except ValueError:
        parser.error(f"{flag} expects a comma-separated list of slot indices")
    for i in idx:
        if not 0 <= i < n_slots:
            parser.error(f"{flag}: slot index {i} out of range [0, {n_slots})")
    return idx


def cmd_compose(args, parser):
    state = trainer.load_checkpoint(args.checkpoint)
    _override_state_config(state, args.config, parser)
    dataset = SpriteDataset.load(args.data)
    n = len(dataset)
    if not (0 <= args.sample_a < n and 0 <= args.sample_b < n):
        parser.error(f"sample ids must be in [0, {n})")
    n_slots = state.config.n_slots
    slots_a = _parse_slot_list(args.slots_a, n_slots, parser, "--slots-a")
    slots_b = _parse_slot_list(args.slots_b, n_slots, parser, "--slots-b")
    if args.slots_a is None and args.slots_b is None:
        slots_a = list(range(n_slots))  # identity swap by default
    _resolved(args.out, state.config.to_dict(),
              {"sample_a": args.sample_a, "sample_b": args.sample_b,
               "slots_a": slots_a, "slots_b": slots_b, "seed": args.seed,
               "steps": args.steps})

    arrays = compose_tiles(state, dataset, args.sample_a, args.sample_b,
                           slots_a, slots_b, steps=args.steps, seed=args.seed)
    tiles = [viz.to_uint8(arrays[k][0]) for k in
             ("image_a", "image_b", "recon_a", "surrogate", "diffusion")]
    os.makedirs(args.out, exist_ok=True)
    out_png = os.path.join(args.out, "composite_panel.png")
    viz.save_png(viz.panel(tiles), out_png)
    print("panel columns: image A | image B | recon A | surrogate composite | "
          "diffusion composite")
    print(f"wrote {out_png}")
    return 0


def cmd_ablate(args, parser):
    base = {}
    if args.config:
        base.update(_load_json(args.config))
    if args.seed is not None:
        base["seed"] = args.seed
    if args.steps is not None:
        base["steps"] = args.steps
    try:
        config = TrainConfig.from_dict(base)
    except ConfigError as e:
        parser.error(str(e))
    rows = trainer.DEFAULT_ABLATION_ROWS
    if args.rows:
        wanted = args.rows.split(",")
        by_name = dict(rows)
        unknown = [w for w in wanted if w not in by_name]
        if unknown:
            parser.error(f"unknown ablation rows: {unknown} "
                         f"(available: {[r for r, _ in rows]})")
        rows = tuple((w, by_name[w]) for w in wanted)
    train_ds = SpriteDataset.load(args.data)
    val_ds = SpriteDataset.load(args.val_data)
    _resolved(args.out, config.to_dict(),
              {"rows": [r for r, _ in rows], "data": args.data,
               "val_data": args.val_data})
    results = trainer.run_ablation(config, train_ds.images(), val_ds, rows=rows,
                                   out_dir=args.out)
    table = [{"row": r["row"], "seed": r["seed"], "fg_ari": r["report"].fg_ari,
              "miou": r["report"].miou, "mbo": r["report"].mbo}
             for r in results]
    with open(os.path.join(args.out, "ablation_table.json"), "w") as f:
        json.dump(table, f, indent=2)
        f.write("\n")
    print(f"{'row':<14}{'fg_ari':>8}{'miou':>8}{'mbo':>8}")
    for row in table:
        print(f"{row['row']:<14}{row['fg_ari']:>8.3f}{row['miou']:>8.3f}"
              f"{row['mbo']:>8.3f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="slotcompose")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a sprite dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file (GeneratorConfig keys)")
    p.add_argument("--split", default="train")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--k-min", type=int, default=None)
    p.add_argument("--k-max", type=int, default=None)
    p.add_argument("--canvas", type=int, default=None)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train the full objective or an ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics report plus segmentation overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON overrides of the checkpoint config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overlays", type=int, default=0)
    p.add_argument("--panels", type=int, default=0,
                   help="composite-image panels to render via sampling")
    p.add_argument("--panel-steps", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compose", help="slot-swap panel between two samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON overrides of the checkpoint config")
    p.add_argument("--sample-a", type=int, required=True)
    p.add_argument("--sample-b", type=int, required=True)
    p.add_argument("--slots-a", default=None,
                   help="comma-separated slot indices to keep from sample A")
    p.add_argument("--slots-b", default=None,
                   help="comma-separated slot indices to add from sample B")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=250,
                   help="diffusion sampling steps for the right panel")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("ablate", help="train the ablation grid with a shared seed")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--rows", help="comma-separated subset of ablation row names")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (ConfigError, ValueError, FileNotFoundError, RuntimeError,
            np.linalg.LinAlgError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
