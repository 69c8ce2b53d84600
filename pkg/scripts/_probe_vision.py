"""Scratch probe: can the vision side learn against frozen text targets?"""
import math
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from cxalign.autodiff import backward
from cxalign.grammar.corpus import generate_corpus
from cxalign.objectives import clip_loss, init_log_tau
from cxalign.optim import AdamW
from cxalign.pipeline import (
    RunConfig, split_corpus, train_mntp, train_contrastive, save_stage,
    load_stage, clip_text_seq, encode_pooled, stream_rng,
    _STREAM_INIT_VISION, _STREAM_INIT_PROJ,
)
from cxalign.towers import init_vision_tower, init_projection, project, vision_forward

t0 = time.time()
studies = generate_corpus(2000, seed=4096)
train, val = split_corpus(studies)

# image uniqueness in the val pool
def img_key(s):
    return s.image.tobytes()
print("val unique images:", len({img_key(s) for s in val}), "/", len(val), flush=True)
print("val unique labelsets:", len({s.latent.label_set() for s in val}), "/", len(val), flush=True)

import os
if os.path.isdir("/tmp/cx_r2"):
    r2 = load_stage("/tmp/cx_r2")
    print("loaded r2", flush=True)
else:
    run = RunConfig(epochs_contrastive=2)
    r1 = train_mntp(studies, run)
    r2 = train_contrastive(studies, run, init=r1)
    save_stage(r2, "/tmp/cx_r2")
    print("trained r2", round((time.time() - t0) / 60, 2), "min", flush=True)

run = r2.config
vocab = r2.vocab
cfg_text = run.text_config(len(vocab))
cfg_vision = run.vision_config()

# frozen text-side targets: pooled text features -> fixed random projection
params = {n: p for n, p in r2.params.items() if not n.startswith("mntp.")}
rng_proj = stream_rng(run.seed, _STREAM_INIT_PROJ, 1)
ptext = init_projection("proj_text", run.model_dim, run.shared_dim, rng_proj)
pimg = init_projection("proj_img", cfg_vision.model_dim, run.shared_dim, rng_proj)
vparams = init_vision_tower(cfg_vision, stream_rng(run.seed, _STREAM_INIT_VISION))

def pooled_text(subset):
    rows = []
    for start in range(0, len(subset), 64):
        seqs = [clip_text_seq(s, vocab, run) for s in subset[start:start + 64]]
        rows.append(encode_pooled(params, cfg_text, run, seqs, normalize=False).data)
    return np.concatenate(rows)

t_tr = pooled_text(train)
t_va = pooled_text(val)
ptext["proj_text.mu"].data = t_tr.mean(axis=0)
t_proj_tr = project(__import__("cxalign.autodiff", fromlist=["Tensor"]).Tensor(t_tr),
                    ptext["proj_text.w"], ptext["proj_text.mu"]).data
t_proj_va = project(__import__("cxalign.autodiff", fromlist=["Tensor"]).Tensor(t_va),
                    ptext["proj_text.w"], ptext["proj_text.mu"]).data
print("text feat: pairwise-cos stats on val", flush=True)
c = t_proj_va @ t_proj_va.T
off = c[~np.eye(len(c), dtype=bool)]
print("  mean", round(float(off.mean()), 3), "std", round(float(off.std()), 3), flush=True)

# center proj_img from train images
from cxalign.autodiff import Tensor
imgs_tr = [s.image for s in train]
imgs_va = [s.image for s in val]
v0 = []
for start in range(0, 256, 64):
    v0.append(vision_forward(vparams, cfg_vision, np.stack(imgs_tr[start:start + 64])).data)
pimg["proj_img.mu"].data = np.concatenate(v0).mean(axis=0)

trainable = dict(vparams)
trainable.update(pimg)
trainable["clip.log_tau"] = init_log_tau()
for p in trainable.values():
    p.requires_grad = True

LR = float(sys.argv[1]) if len(sys.argv) > 1 else 3e-3
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 6
AUG = float(sys.argv[3]) if len(sys.argv) > 3 else 0.1
bs = 32
opt = AdamW(group_lrs={"": LR})
n_tr = len(train)
total_steps = EPOCHS * math.ceil(n_tr / bs)
step = 0
t1 = time.time()
for epoch in range(EPOCHS):
    order = np.random.default_rng([run.seed, 90, epoch]).permutation(n_tr)
    for i in range(math.ceil(n_tr / bs)):
        ids = order[i * bs:(i + 1) * bs]
        if len(ids) < 2:
            continue
        opt.zero_grad(trainable)
        rng_aug = np.random.default_rng([run.seed, 92, step])
        batch_imgs = np.stack([imgs_tr[j] for j in ids])
        batch_imgs = np.clip(batch_imgs + rng_aug.normal(0, AUG, batch_imgs.shape).astype(np.float32), 0, 1)
        v_emb = vision_forward(trainable, cfg_vision, batch_imgs,
                               train=True, rng=np.random.default_rng([run.seed, 91, step]))
        v_proj = project(v_emb, trainable["proj_img.w"], trainable["proj_img.mu"])
        t_fixed = Tensor(t_proj_tr[ids])
        loss = clip_loss(v_proj, t_fixed, trainable["clip.log_tau"])
        backward(loss)
        opt.lr_scale = 0.5 * (1 + math.cos(math.pi * step / total_steps))
        opt.step(trainable)
        step += 1
    # honest full-pool val recall
    v_rows = []
    for start in range(0, len(val), 64):
        ve = vision_forward(trainable, cfg_vision, np.stack(imgs_va[start:start + 64]))
        v_rows.append(project(ve, trainable["proj_img.w"], trainable["proj_img.mu"]).data)
    v_mat = np.concatenate(v_rows)
    sims = v_mat @ t_proj_va.T
    n = len(val)
    diag = sims[np.arange(n), np.arange(n)][:, None]
    ranks = (sims > diag).sum(axis=1) + (sims == diag).sum(axis=1) - 1
    tau = math.exp(float(trainable["clip.log_tau"].data[0]))
    print(f"ep{epoch} loss {float(loss.data):.3f} tau {tau:.3f} "
          f"r@1 {float((ranks < 1).mean()):.3f} r@5 {float((ranks < 5).mean()):.3f} "
          f"r@10 {float((ranks < 10).mean()):.3f}", flush=True)
print("probe min", round((time.time() - t1) / 60, 2), "total", round((time.time() - t0) / 60, 2), flush=True)
