#!/usr/bin/env python3
"""Committed training runs behind acceptance checks 7 and 8.

Trains the full objective and the no-composition baseline on the sprite
dataset over a fixed seed set, evaluates FG-ARI on a held-out split, runs the
slot-removal edit check on the trained full models, and writes
runs/acceptance/<preset>/summary.json for tests/test_acceptance.py.

Presets (select with SLOTCOMPOSE_ACCEPTANCE_PRESET or --preset):
  full     the acceptance configuration: 32x32, 2-4 objects, N=5 slots,
           20000 steps, batch 32, seeds {0, 1, 2} (hours per run on CPU)
  reduced  same pipeline at a budget that finishes on a small CPU box:
           4000 steps, batch 16, slimmer decoders, seeds {0, 1}

Runs are resumable: finished rows are skipped, interrupted rows continue from
their latest checkpoint.
"""

import argparse
import json
import os
import sys
import time

import numpy as np
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from slotcompose import scenegen, trainer  # noqa: E402

PRESETS = {
    "full": {
        "seeds": [0, 1, 2],
        "n_train": 8000,
        "n_val": 256,
        "config": dict(steps=20000, batch_size=32),
    },
    "reduced": {
        "seeds": [0, 1],
        "n_train": 2000,
        "n_val": 64,
        "config": dict(
            steps=4000, batch_size=16, n_iters=5, backbone_width=24,
            denoiser_width=16, denoiser_res_blocks=1, surrogate_width=64,
            surrogate_layers=3,
        ),
    },
}

ROWS = {
    "full": {},
    "baseline": {"lambda_prior": 0.0, "lambda_reg": 0.0, "mix_strategy": "random"},
}

DATA_SEED = 100
VAL_SEED = 999
GEN_CONFIG = scenegen.GeneratorConfig(canvas=(32, 32), k_min=2, k_max=4)


def ensure_datasets(root, preset):
    train_dir = os.path.join(root, "data_train")
    val_dir = os.path.join(root, "data_val")
    if not os.path.exists(os.path.join(train_dir, "manifest.json")):
        scenegen.make_dataset(preset["n_train"], GEN_CONFIG, DATA_SEED, train_dir,
                              split="train")
    if not os.path.exists(os.path.join(val_dir, "manifest.json")):
        scenegen.make_dataset(preset["n_val"], GEN_CONFIG, VAL_SEED, val_dir,
                              split="val")
    return scenegen.SpriteDataset.load(train_dir), scenegen.SpriteDataset.load(val_dir)


def run_row(root, preset, row, seed, train_images, val_ds):
    out_dir = os.path.join(root, f"{row}_s{seed}")
    report_path = os.path.join(out_dir, "report.json")
    cfg = trainer.TrainConfig(**{**preset["config"], **ROWS[row], "seed": seed})
    if os.path.exists(report_path):
        with open(report_path) as f:
            return json.load(f), out_dir
    state = None
    latest = os.path.join(out_dir, "ckpt_latest.scck")
    if os.path.exists(latest):
        state = trainer.load_checkpoint(latest)
        print(f"[{row} s{seed}] resuming from step {state.step}", flush=True)
    t0 = time.time()

    def log_cb(step, bd):
        if step % 200 == 0:
            print(f"[{row} s{seed}] step {step}/{cfg.steps} total={bd.total:.4f} "
                  f"diff={bd.diff:.4f} recon={bd.recon:.4f} "
                  f"({time.time() - t0:.0f}s)", flush=True)

    state = trainer.train(cfg, train_images, out_dir=out_dir, log_cb=log_cb,
                          state=state)
    trainer.save_checkpoint(state, latest)
    rep = trainer.evaluate(state, val_ds, seed=7, loss_batches=0)
    result = {"row": row, "seed": seed, "fg_ari": rep.fg_ari, "miou": rep.miou,
              "mbo": rep.mbo, "steps": cfg.steps,
              "minutes": round((time.time() - t0) / 60, 1)}
    with open(report_path, "w") as f:
        json.dump(result, f, indent=2)
    print(f"[{row} s{seed}] fg_ari={rep.fg_ari:.4f} miou={rep.miou:.4f} "
          f"mbo={rep.mbo:.4f}", flush=True)
    return result, out_dir


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset",
                    default=os.environ.get("SLOTCOMPOSE_ACCEPTANCE_PRESET", "full"),
                    choices=sorted(PRESETS))
    ap.add_argument("--out", default=os.path.join("runs", "acceptance"))
    args = ap.parse_args()
    preset = PRESETS[args.preset]
    root = os.path.join(args.out, args.preset)
    os.makedirs(root, exist_ok=True)
    torch.set_num_threads(max(1, os.cpu_count() or 1))

    train_ds, val_ds = ensure_datasets(root, preset)
    train_images = train_ds.images()

    results = {"preset": args.preset, "seeds": preset["seeds"], "rows": {},
               "gen_config": GEN_CONFIG.to_dict(),
               "train_config": preset["config"]}
    ckpts = {}
    for row in ("full", "baseline"):
        results["rows"][row] = {}
        for seed in preset["seeds"]:
            res, out_dir = run_row(root, preset, row, seed, train_images, val_ds)
            results["rows"][row][str(seed)] = res
            if row == "full":
                ckpts[str(seed)] = os.path.join(out_dir, "ckpt_latest.scck")

    full_scores = [r["fg_ari"] for r in results["rows"]["full"].values()]
    base_scores = [r["fg_ari"] for r in results["rows"]["baseline"].values()]
    results["full_mean_fg_ari"] = float(np.mean(full_scores))
    results["baseline_mean_fg_ari"] = float(np.mean(base_scores))
    results["gap"] = results["full_mean_fg_ari"] - results["baseline_mean_fg_ari"]

    edit_ious = {}
    for seed, ckpt in ckpts.items():
        state = trainer.load_checkpoint(ckpt)
        edit_ious[seed] = trainer.slot_edit_iou(state, val_ds, n_edits=20, seed=0)
        print(f"[edit s{seed}] mean IoU = {edit_ious[seed]:.4f}", flush=True)
    results["edit_iou"] = edit_ious
    results["edit_iou_mean"] = float(np.mean(list(edit_ious.values())))
    results["checkpoints"] = ckpts
    results["val_dir"] = os.path.join(root, "data_val")

    with open(os.path.join(root, "summary.json"), "w") as f:
        json.dump(results, f, indent=2)
    print(json.dumps({k: v for k, v in results.items()
                      if k not in ("rows", "gen_config", "train_config")},
                     indent=2))


if __name__ == "__main__":
    main()
