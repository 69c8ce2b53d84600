"""Scratch tuning run: contrastive epochs sweep + clip bs32/cosine."""
import copy
import dataclasses
import sys
import time

sys.path.insert(0, "src")

from cxalign.grammar.corpus import generate_corpus
from cxalign.pipeline import RunConfig, split_corpus, train_mntp, train_contrastive, train_clip
from cxalign.evals import TextEncoder, DualEncoder, task1_prior_omitted, task3_error_discrimination, multimodal_eval

t0 = time.time()
studies = generate_corpus(2000, seed=4096)
train, val = split_corpus(studies)
base = RunConfig()

t = time.time()
r1 = train_mntp(studies, base)
print("mntp", round(r1.final_val_loss(), 3), round((time.time() - t) / 60, 2), flush=True)

best = None
for ep in (2, 3):
    run = dataclasses.replace(base, epochs_contrastive=ep)
    t = time.time()
    r2 = train_contrastive(studies, run, init=copy.deepcopy(r1))
    mins = round((time.time() - t) / 60, 2)
    enc = TextEncoder(r2)
    print(f"contr{ep}", round(r2.final_val_loss(), 3), mins, flush=True)
    print(" task1", task1_prior_omitted(enc, val), flush=True)
    print(" task3", task3_error_discrimination(enc, val)["accuracy"], flush=True)
    best = (run, r2)

run3 = dataclasses.replace(best[0], batch_clip=32, epochs_clip=8)
t = time.time()
r3 = train_clip(studies, run3, text_init=best[1])
print("clip min", round((time.time() - t) / 60, 2), flush=True)
for rec in r3.log:
    if "val_loss" in rec:
        print("ep", {k: round(v, 3) if isinstance(v, float) else v for k, v in rec.items()}, flush=True)
print("mm", multimodal_eval(DualEncoder(r3), val, train), flush=True)
print("total", round((time.time() - t0) / 60, 2), flush=True)
