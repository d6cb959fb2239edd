"""Scratch: tune the toy-scale training recipe against acceptance targets."""
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, "/root/pkg/src")
from nucdet.data import SynthDatasetSpec, SynthSpec, synth_generate
from nucdet.train import RunConfig, evaluate_checkpoint, train

ROOT = Path("/tmp/tune")


def make_corpus(tag, n_images=12, seed=7):
    out = ROOT / tag
    if out.exists():
        shutil.rmtree(out)
    spec = SynthSpec(
        datasets=(
            SynthDatasetSpec(name="cultureA", classes=("round", "spindle", "ring"), n_images=n_images,
                             nuclei_range=(3, 6), radius_range=(4.5, 7.0)),
            SynthDatasetSpec(name="cultureB", classes=("round", "dark", "halo", "speck"), n_images=n_images,
                             nuclei_range=(3, 6), radius_range=(4.5, 7.0)),
        ),
        seed=seed,
    )
    return synth_generate(spec, out)


def toy_config(manifest, iters=300, batch=2, lr=1e-3, groups=3, gamma_f=2.0, alpha=0.75,
               clip=5.0, ffn=256, augment=False):
    cfg = RunConfig()
    cfg.seed = 0
    cfg.model.num_queries = 100
    cfg.model.ffn_dim = ffn
    cfg.dpm.mode = "feature"
    cfg.cdn.n_groups = groups
    cfg.loss.focal_alpha = alpha
    cfg.loss.focal_gamma = gamma_f
    cfg.data.train_manifests = (str(manifest),)
    cfg.data.train_sizes = (96,)
    cfg.data.augment = augment
    cfg.optim.iterations = iters
    cfg.optim.batch_size = batch
    cfg.optim.lr = lr
    cfg.optim.lr_backbone = lr
    cfg.optim.clip_norm = clip
    return cfg


def run(tag, cfg, manifest):
    wd = ROOT / tag
    if wd.exists():
        shutil.rmtree(wd)
    t0 = time.time()
    ckpt = train(cfg, wd)
    train_s = time.time() - t0
    lines = [json.loads(l) for l in (wd / "metrics.jsonl").read_text().splitlines()]
    first = np.mean([l["total"] for l in lines[:10]])
    last = np.mean([l["total"] for l in lines[-20:]])
    best = {}
    for thr in (0.2, 0.3, 0.5):
        reports = evaluate_checkpoint(ckpt, [manifest], confidence_threshold=thr)
        best[thr] = {n: (round(r.f_d, 3), round(r.mean_f_c, 3)) for n, r in reports.items()}
    print(f"[{tag}] train={train_s:.0f}s first10={first:.2f} last20={last:.2f}", flush=True)
    for thr, scores in best.items():
        print(f"   thr={thr}: {scores}", flush=True)
    return ckpt


if __name__ == "__main__":
    manifest = make_corpus("corpus12")
    print("corpus at", manifest, flush=True)
    run("g0_lr1e3", toy_config(manifest, gamma_f=0.0, lr=1e-3), manifest)
    run("g2_lr1e3", toy_config(manifest, gamma_f=2.0, lr=1e-3), manifest)
    run("g0_lr2e3", toy_config(manifest, gamma_f=0.0, lr=2e-3), manifest)
    run("g0_lr1e3_long", toy_config(manifest, gamma_f=0.0, lr=1e-3, iters=700), manifest)
