"""Scratch: final toy recipe candidate."""
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


def make_corpus(tag, n_images, seed=7):
    out = ROOT / tag
    if out.exists():
        shutil.rmtree(out)
    spec = SynthSpec(
        datasets=(
            SynthDatasetSpec(name="cultureA", classes=("round", "spindle", "ring"), n_images=n_images,
                             nuclei_range=(3, 5), radius_range=(5.0, 7.5)),
            SynthDatasetSpec(name="cultureB", classes=("round", "dark", "halo", "speck"), n_images=n_images,
                             nuclei_range=(3, 5), radius_range=(5.0, 7.5)),
        ),
        seed=seed,
    )
    return synth_generate(spec, out)


def toy_config(manifest, iters=1000, batch=2, lr=1e-3, groups=4, seq_len=24, cls_w=2.0, clip=5.0):
    cfg = RunConfig()
    cfg.seed = 0
    cfg.confidence_threshold = 0.3
    cfg.model.num_queries = 100
    cfg.model.ffn_dim = 256
    cfg.dpm.mode = "feature"
    cfg.dpm.seq_len = seq_len
    cfg.cdn.n_groups = groups
    cfg.cdn.gamma = 0.1
    cfg.cdn.lambda2 = 12.0
    cfg.loss.focal_alpha = 0.75
    cfg.loss.focal_gamma = 0.0
    cfg.loss.cls_weight = cls_w
    cfg.data.train_manifests = (str(manifest),)
    cfg.data.train_sizes = (96,)
    cfg.data.augment = False
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
    at300 = np.mean([l["total"] for l in lines[280:300]]) if len(lines) >= 300 else float("nan")
    last = np.mean([l["total"] for l in lines[-20:]])
    print(f"[{tag}] train={train_s:.0f}s first10={first:.2f} at300={at300:.2f} last20={last:.2f}", flush=True)
    for thr in (0.2, 0.3, 0.4):
        reports = evaluate_checkpoint(ckpt, [manifest], confidence_threshold=thr)
        scores = {n: (round(r.f_d, 3), round(r.mean_f_c, 3)) for n, r in reports.items()}
        print(f"   thr={thr}: {scores}", flush=True)
    return ckpt


if __name__ == "__main__":
    manifest = make_corpus("corpus10", 10)
    print("corpus at", manifest, flush=True)
    run("r_final_1000", toy_config(manifest, iters=1000, lr=1e-3, clip=5.0), manifest)
