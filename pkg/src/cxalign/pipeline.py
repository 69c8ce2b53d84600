"""Three-stage training pipeline: masked pretraining, supervised contrastive
fine-tuning, and image-text alignment with the freezing regime asserted at
every step."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import add, backward, l2_normalize, matmul
from .checkpoint import params_to_arrays, save_checkpoint
from .objectives import (
    INSTR_IMAGE,
    build_contrastive_pairs,
    clip_loss,
    init_log_tau,
    inverse_tau,
    mntp_loss,
    mntp_text_pool,
    supcon_loss,
)
from .optim import AdamW, DivergenceError
from .tokenizer import (
    PAD,
    Vocabulary,
    apply_mntp_mask,
    build_vocab,
    encode,
    tokenize,
)
from .towers import (
    LoraConfig,
    TextTowerConfig,
    VisionTowerConfig,
    eligible_mask,
    init_lora,
    init_projection,
    init_text_tower,
    init_vision_tower,
    pool,
    project,
    set_trainable,
    text_forward,
    trainable_names,
    vision_forward,
)

STAGES = ("mntp", "contrastive", "clip")

# Fixed RNG stream tags so every stochastic choice is addressable by
# (seed, stream, step) and resuming replays the identical sequence.
_STREAM_INIT_TEXT = 20
_STREAM_INIT_VISION = 21
_STREAM_INIT_PROJ = 22
_STREAM_INIT_LORA = 23
_STREAM_ORDER = {"mntp": 30, "contrastive": 31, "clip": 32}
_STREAM_MASK = 40
_STREAM_DROPOUT = 41
_STREAM_VAL_MASK = 42
_STREAM_PAIRS = 43


class RegimeViolationError(RuntimeError):
    """A gradient reached a parameter that the stage freezes."""


@dataclass
class RunConfig:
    """Hyperparameters for all three stages; one document per run."""

    epochs_mntp: int = 1
    epochs_contrastive: int = 1
    epochs_clip: int = 10
    batch_mntp: int = 32
    batch_contrastive: int = 32
    batch_clip: int = 64
    lr_text: float = 3e-4
    lr_projection: float = 1e-3
    lr_schedule: str = "cosine"
    seed: int = 4096
    mask_prob: float = 0.2
    section_aware: bool = False
    mask_mode: str = "bidirectional"
    pooling: str = "mean"
    mntp_shift: bool = False
    stage2_lora_only: bool = False
    supcon_tau: float = 0.07
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 128
    shared_dim: int = 64
    dropout: float = 0.1
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1

    def __post_init__(self):
        for name in (
            "epochs_mntp",
            "epochs_contrastive",
            "epochs_clip",
            "batch_mntp",
            "batch_contrastive",
            "batch_clip",
            "lr_text",
            "lr_projection",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"RunConfig.{name} must be positive")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must be in (0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.mask_mode not in ("bidirectional", "causal"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.pooling not in ("mean", "latent"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    def text_config(self, vocab_size: int) -> TextTowerConfig:
        return TextTowerConfig(
            vocab_size=vocab_size,
            layers=self.layers,
            model_dim=self.model_dim,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            max_len=self.max_len,
            mask_mode=self.mask_mode,
            pooling=self.pooling,
            dropout=self.dropout,
        )

    def vision_config(self) -> VisionTowerConfig:
        return VisionTowerConfig(dropout=self.dropout)

    def lora_config(self) -> LoraConfig:
        return LoraConfig(
            rank=self.lora_rank, alpha=self.lora_alpha, dropout=self.lora_dropout
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


def stream_rng(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step])


def _lr_scale(run: RunConfig, step: int, total_steps: int) -> float:
    """Cosine multiplier on the stage learning rate (1 at step 0, →0 at end)."""
    if run.lr_schedule == "constant" or total_steps <= 1:
        return 1.0
    frac = min(step, total_steps) / total_steps
    return 0.5 * (1.0 + math.cos(math.pi * frac))


def split_corpus(studies) -> tuple[list, list]:
    """Deterministic 90/10 train/validation split by study-id hash."""
    train, val = [], []
    for s in studies:
        h = int.from_bytes(hashlib.sha256(s.study_id.encode()).digest()[:4], "big")
        (val if h % 10 == 0 else train).append(s)
    return train, val


def corpus_vocab(studies) -> Vocabulary:
    """Vocabulary covering every text the pipeline or harness will encode."""
    from .grammar.render import render_report, status_sentence
    from .grammar.types import KINDS
    from .objectives import INSTR_SIMILAR, INSTR_STATUS, INSTR_SUMMARIZE

    texts = []
    for s in studies:
        texts.append(s.findings_text)
        texts.append(s.impression_text)
        texts.extend(s.variants.values())
        texts.extend(t for _, t in s.errors)
        texts.append(render_report(s.latent, "verbose")[0])
    statuses = ("new", "stable", "improved", "worsened", "present", "absent")
    for kind in KINDS:
        for status in statuses:
            texts.append(status_sentence(kind, status))
        texts.append(INSTR_STATUS.format(finding=kind.replace("_", " ")))
    texts.append(INSTR_SIMILAR)
    texts.append(INSTR_SUMMARIZE)
    for section in ("findings", "impression"):
        texts.append(INSTR_IMAGE.format(section=section))
    return build_vocab(texts)


def pad_batch(seqs) -> tuple[np.ndarray, list]:
    """Right-pad token sequences to a (B, T) id matrix plus their
    instruction spans."""
    T = max(len(s.ids) for s in seqs)
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    spans = []
    for b, s in enumerate(seqs):
        ids[b, : len(s.ids)] = s.ids
        spans.append(s.instruction_span)
    return ids, spans


class TrainLog:
    """JSON Lines training log: one record per step plus epoch summaries."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        self._fh = open(path, "a") if path else None

    def write(self, **record) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class StageResult:
    stage: str
    params: dict
    vocab: Vocabulary
    config: RunConfig
    step: int
    optimizer: AdamW
    log: list = field(default_factory=list)

    def save(self, path) -> None:
        arrays = dict(params_to_arrays(self.params))
        arrays.update(self.optimizer.state_arrays())
        save_checkpoint(path, self.stage, self.step, self.config.digest(), arrays)

    def final_val_loss(self) -> float:
        vals = [r["val_loss"] for r in self.log if "val_loss" in r]
        if not vals:
            raise ValueError("no validation records logged")
        return vals[-1]


def save_stage(result: StageResult, dirpath) -> None:
    """Persist a stage result as a run directory: config, vocabulary,
    checkpoint with optimizer state."""
    import os

    os.makedirs(dirpath, exist_ok=True)
    with open(os.path.join(dirpath, "config.json"), "w") as fh:
        fh.write(result.config.to_json() + "\n")
    result.vocab.save(os.path.join(dirpath, "vocab.txt"))
    result.save(os.path.join(dirpath, "model.cxal"))


def load_stage(dirpath) -> StageResult:
    import os

    from .checkpoint import load_checkpoint

    with open(os.path.join(dirpath, "config.json")) as fh:
        run = RunConfig.from_json(fh.read())
    vocab = Vocabulary.load(os.path.join(dirpath, "vocab.txt"))
    ck = load_checkpoint(os.path.join(dirpath, "model.cxal"))
    if ck.config_digest != run.digest():
        raise ValueError(f"{dirpath}: checkpoint config digest mismatch")
    if ck.stage == "clip":
        trainable = lambda n: n.startswith(CLIP_TRAINABLE_PREFIXES)  # noqa: E731
    else:
        trainable = lambda n: True  # noqa: E731
    params = ck.params(trainable)
    lr = run.lr_projection if ck.stage == "clip" else run.lr_text
    opt = AdamW(group_lrs={"": lr})
    opt.load_state_arrays(ck.optimizer_arrays())
    return StageResult(ck.stage, params, vocab, run, ck.step, opt)


def _check_loss_finite(value: float, stage: str, step: int, result: StageResult, out_path):
    if math.isfinite(value):
        return
    if out_path is not None:
        result.save(out_path)
    raise DivergenceError(
        f"{stage}: non-finite loss at step {step}"
        + (f"; last finite state saved to {out_path}" if out_path else "")
    )


def _epoch_order(seed: int, stage: str, epoch: int, n: int) -> np.ndarray:
    return stream_rng(seed, _STREAM_ORDER[stage], epoch).permutation(n)


def bucketed_batches(lengths, bs: int, rng: np.random.Generator, window: int = 4) -> list:
    """Batches of near-equal sequence length to cut padding waste.

    Items are length-sorted, shuffled within windows of `window` batches so
    in-batch negatives still vary across epochs, and the batch order is
    shuffled. Fully determined by `rng`.
    """
    order = np.argsort(lengths, kind="stable")
    batches = []
    w = window * bs
    for start in range(0, len(order), w):
        block = order[start : start + w]
        block = block[rng.permutation(len(block))]
        batches.extend(block[i : i + bs] for i in range(0, len(block), bs))
    return [batches[i] for i in rng.permutation(len(batches))]


# ---------------------------------------------------------------------------
# Stage 1: masked pretraining
# ---------------------------------------------------------------------------


def _mntp_step_loss(params, cfg_text, run, seqs, step, train=True):
    stream = _STREAM_MASK if train else _STREAM_VAL_MASK
    rng_mask = stream_rng(run.seed, stream, step)
    masked = [apply_mntp_mask(s, run.mask_prob, rng_mask) for s in seqs]
    ids, _ = pad_batch(masked)
    rng_drop = stream_rng(run.seed, _STREAM_DROPOUT, step)
    hidden = text_forward(params, cfg_text, ids, train=train, rng=rng_drop)
    logits = add(matmul(hidden, params["mntp.w"]), params["mntp.b"])
    positions, targets = [], []
    for b, s in enumerate(masked):
        positions.extend((b, p) for p in s.mask_positions)
        targets.extend(s.mask_targets)
    return mntp_loss(logits, targets, positions, shift=run.mntp_shift)


def _mntp_val_loss(params, cfg_text, run, val_texts, vocab) -> float:
    total, count = 0.0, 0
    bs = run.batch_mntp
    for start in range(0, len(val_texts), bs):
        chunk = val_texts[start : start + bs]
        seqs = [encode(t, vocab, max_len=run.max_len) for t in chunk]
        loss = _mntp_step_loss(params, cfg_text, run, seqs, step=start, train=False)
        total += float(loss.data) * len(chunk)
        count += len(chunk)
    return total / count


def train_mntp(
    studies,
    run: RunConfig,
    vocab: Vocabulary | None = None,
    log_path=None,
    ckpt_path=None,
    stop_after: int | None = None,
    resume: StageResult | None = None,
) -> StageResult:
    """Masked pretraining over the variant-mixed text pool.

    `stop_after` ends the run early (for split-run resume tests); `resume`
    continues from a previous partial result with the same config.
    """
    train_studies, val_studies = split_corpus(studies)
    vocab = vocab or corpus_vocab(studies)
    texts = mntp_text_pool(train_studies)
    val_texts = [s.findings_text for s in val_studies] + [
        s.impression_text for s in val_studies
    ]
    cfg_text = run.text_config(len(vocab))

    if resume is not None:
        if resume.config.digest() != run.digest():
            raise ValueError("resume refused: config digest mismatch")
        params, opt, start_step = resume.params, resume.optimizer, resume.step
    else:
        params = init_text_tower(cfg_text, stream_rng(run.seed, _STREAM_INIT_TEXT))
        opt = AdamW(group_lrs={"": run.lr_text})
        start_step = 0

    log = TrainLog(log_path)
    result = StageResult("mntp", params, vocab, run, start_step, opt, log.records)
    bs = run.batch_mntp
    all_seqs = [encode(t, vocab, max_len=run.max_len) for t in texts]
    lengths = [len(s.ids) for s in all_seqs]
    total_steps = run.epochs_mntp * math.ceil(len(all_seqs) / bs)
    step = 0
    try:
        for epoch in range(run.epochs_mntp):
            rng_epoch = stream_rng(run.seed, _STREAM_ORDER["mntp"], epoch)
            for batch_ids in bucketed_batches(lengths, bs, rng_epoch):
                if step < start_step:
                    step += 1
                    continue
                if stop_after is not None and step >= stop_after:
                    result.step = step
                    return result
                seqs = [all_seqs[j] for j in batch_ids]
                opt.zero_grad(params)
                loss = _mntp_step_loss(params, cfg_text, run, seqs, step)
                value = float(loss.data)
                _check_loss_finite(value, "mntp", step, result, ckpt_path)
                backward(loss)
                opt.lr_scale = _lr_scale(run, step, total_steps)
                opt.step(params)
                log.write(
                    step=step, stage="mntp", loss=value,
                    lr=run.lr_text * opt.lr_scale, tau=None,
                )
                step += 1
            val = _mntp_val_loss(params, cfg_text, run, val_texts, vocab)
            _check_loss_finite(val, "mntp", step, result, ckpt_path)
            log.write(stage="mntp", epoch=epoch, val_loss=val)
        result.step = step
        if ckpt_path is not None:
            result.save(ckpt_path)
        return result
    finally:
        log.close()


# ---------------------------------------------------------------------------
# Stage 2: supervised contrastive fine-tuning
# ---------------------------------------------------------------------------


def encode_pooled(
    params,
    cfg_text,
    run: RunConfig,
    seqs,
    lora=None,
    train=False,
    rng=None,
    normalize=True,
):
    """Forward + pool (+ L2 normalization) for a batch of token sequences."""
    ids, spans = pad_batch(seqs)
    hidden = text_forward(params, cfg_text, ids, lora=lora, train=train, rng=rng)
    elig = eligible_mask(ids, spans)
    pooled = pool(params, hidden, elig, run.pooling)
    return l2_normalize(pooled) if normalize else pooled


def _supcon_val_loss(params, cfg_text, run, val_pairs, vocab, lora=None) -> float:
    total, count = 0.0, 0
    bs = run.batch_contrastive
    for start in range(0, len(val_pairs) - 1, bs):
        batch = val_pairs[start : start + bs]
        if len(batch) < 2:
            continue
        a = [encode(p.anchor_text, vocab, instruction=p.instruction, max_len=run.max_len) for p in batch]
        pos = [encode(p.positive_text, vocab, max_len=run.max_len) for p in batch]
        ae = encode_pooled(params, cfg_text, run, a)
        pe = encode_pooled(params, cfg_text, run, pos)
        loss = supcon_loss(ae, pe, [p.label_key for p in batch], tau=run.supcon_tau)
        total += float(loss.data) * len(batch)
        count += len(batch)
    if count == 0:
        raise ValueError("validation split produced no contrastive pairs")
    return total / count


def train_contrastive(
    studies,
    run: RunConfig,
    init: StageResult | None = None,
    log_path=None,
    ckpt_path=None,
) -> StageResult:
    """Instruction-based supervised contrastive stage. Starts from an MNTP
    result unless `init` is None (cold-start ablation)."""
    train_studies, val_studies = split_corpus(studies)
    if init is not None:
        vocab, params = init.vocab, init.params
    else:
        vocab = corpus_vocab(studies)
        rng = stream_rng(run.seed, _STREAM_INIT_TEXT)
        params = init_text_tower(run.text_config(len(vocab)), rng)
    cfg_text = run.text_config(len(vocab))
    params = {n: p for n, p in params.items() if not n.startswith("mntp.")}

    lora = None
    if run.stage2_lora_only:
        lora = run.lora_config()
        params.update(init_lora(params, cfg_text, lora, stream_rng(run.seed, _STREAM_INIT_LORA)))
        set_trainable(params, lambda n: n.startswith(("lora.", "pool.")))
    else:
        set_trainable(params, lambda n: True)

    pairs = build_contrastive_pairs(train_studies, stream_rng(run.seed, _STREAM_PAIRS))
    val_pairs = build_contrastive_pairs(val_studies, stream_rng(run.seed, _STREAM_PAIRS, 1))
    anchor_seqs = [
        encode(p.anchor_text, vocab, instruction=p.instruction, max_len=run.max_len)
        for p in pairs
    ]
    positive_seqs = [encode(p.positive_text, vocab, max_len=run.max_len) for p in pairs]
    opt = AdamW(group_lrs={"": run.lr_text})
    log = TrainLog(log_path)
    result = StageResult("contrastive", params, vocab, run, 0, opt, log.records)
    bs = run.batch_contrastive
    total_steps = run.epochs_contrastive * math.ceil(len(pairs) / bs)
    step = 0
    try:
        for epoch in range(run.epochs_contrastive):
            order = _epoch_order(run.seed, "contrastive", epoch, len(pairs))
            for i in range(math.ceil(len(pairs) / bs)):
                ids = order[i * bs : (i + 1) * bs]
                if len(ids) < 2:
                    continue
                a = [anchor_seqs[j] for j in ids]
                pos = [positive_seqs[j] for j in ids]
                rng_drop = stream_rng(run.seed, _STREAM_DROPOUT, step)
                opt.zero_grad(params)
                ae = encode_pooled(params, cfg_text, run, a, lora=lora, train=True, rng=rng_drop)
                pe = encode_pooled(params, cfg_text, run, pos, lora=lora, train=True, rng=rng_drop)
                loss = supcon_loss(ae, pe, [pairs[j].label_key for j in ids], tau=run.supcon_tau)
                value = float(loss.data)
                _check_loss_finite(value, "contrastive", step, result, ckpt_path)
                backward(loss)
                opt.lr_scale = _lr_scale(run, step, total_steps)
                opt.step(params)
                log.write(
                    step=step, stage="contrastive", loss=value,
                    lr=run.lr_text * opt.lr_scale, tau=None,
                )
                step += 1
            val = _supcon_val_loss(params, cfg_text, run, val_pairs, vocab, lora=lora)
            _check_loss_finite(val, "contrastive", step, result, ckpt_path)
            log.write(stage="contrastive", epoch=epoch, val_loss=val)
        if run.stage2_lora_only:
            # fold the adapters so downstream stages see a plain tower
            from .towers import lora_merge

            merged = lora_merge(params, lora)
            params.clear()
            params.update(merged)
            set_trainable(params, lambda n: True)
        result.step = step
        if ckpt_path is not None:
            result.save(ckpt_path)
        return result
    finally:
        log.close()


# ---------------------------------------------------------------------------
# Stage 3: image-text alignment
# ---------------------------------------------------------------------------

CLIP_TRAINABLE_PREFIXES = ("lora.", "proj_text", "proj_img", "vision.", "clip.log_tau")


def clip_text_seq(study, vocab, run: RunConfig, section: str = "findings"):
    """Token sequence for a report on the alignment side."""
    text = study.findings_text if section == "findings" else study.impression_text
    if run.section_aware:
        return encode(
            text,
            vocab,
            instruction=INSTR_IMAGE.format(section=section),
            section=section,
            max_len=run.max_len,
        )
    return encode(text, vocab, max_len=run.max_len)


def _assert_regime(params) -> None:
    expected = {
        n for n in params if n.startswith(CLIP_TRAINABLE_PREFIXES)
    }
    actual = set(trainable_names(params))
    if actual != expected:
        raise RegimeViolationError(
            f"stage-3 trainable census mismatch: extra={sorted(actual - expected)} "
            f"missing={sorted(expected - actual)}"
        )


def _assert_frozen_untouched(params) -> None:
    touched = [
        n
        for n, p in params.items()
        if not n.startswith(CLIP_TRAINABLE_PREFIXES) and p.grad is not None
    ]
    if touched:
        raise RegimeViolationError(f"gradient reached frozen parameters: {touched}")


def _center_projections(params, cfg_text, cfg_vision, run, lora, items, limit=256):
    """Data-dependent init of the projection centering vectors.

    Both towers emit one dominant shared direction at init, so cosine
    similarities start near 1.0 for every pair — a neighborhood where the
    contrastive gradient vanishes (at exact collapse it is identically
    zero). Setting `mu` to the mean tower feature over a training prefix
    starts the heads decorrelated; `mu` stays trainable afterwards.
    """
    probe = items[:limit]
    t_rows, v_rows = [], []
    bs = run.batch_clip
    for start in range(0, len(probe), bs):
        chunk = probe[start : start + bs]
        seqs = [seq for seq, _ in chunk]
        images = np.stack([img for _, img in chunk])
        t_rows.append(
            encode_pooled(params, cfg_text, run, seqs, lora=lora, normalize=False).data
        )
        v_rows.append(vision_forward(params, cfg_vision, images).data)
    params["proj_text.mu"].data = np.concatenate(t_rows).mean(axis=0)
    params["proj_img.mu"].data = np.concatenate(v_rows).mean(axis=0)


def _clip_batch_loss(params, cfg_text, cfg_vision, run, lora, items, train, rng):
    seqs = [seq for seq, _ in items]
    images = np.stack([img for _, img in items])
    t_emb = encode_pooled(
        params, cfg_text, run, seqs, lora=lora, train=train, rng=rng, normalize=False
    )
    v_emb = vision_forward(params, cfg_vision, images, train=train, rng=rng)
    t_proj = project(t_emb, params["proj_text.w"], params["proj_text.mu"])
    v_proj = project(v_emb, params["proj_img.w"], params["proj_img.mu"])
    return clip_loss(v_proj, t_proj, params["clip.log_tau"])


def train_clip(
    studies,
    run: RunConfig,
    text_init: StageResult,
    log_path=None,
    ckpt_path=None,
    section_of=None,
) -> StageResult:
    """Image-text alignment: frozen text base, trainable LoRA adapters,
    projections, vision tower, and temperature.

    `section_of` maps a study id to "findings" or "impression"; by default
    every study pairs its image with the findings text.
    """
    train_studies, val_studies = split_corpus(studies)
    vocab, params = text_init.vocab, dict(text_init.params)
    params = {n: p for n, p in params.items() if not n.startswith("mntp.")}
    cfg_text = run.text_config(len(vocab))
    cfg_vision = run.vision_config()
    lora = run.lora_config()
    params.update(init_lora(params, cfg_text, lora, stream_rng(run.seed, _STREAM_INIT_LORA)))
    params.update(init_vision_tower(cfg_vision, stream_rng(run.seed, _STREAM_INIT_VISION)))
    rng_proj = stream_rng(run.seed, _STREAM_INIT_PROJ, 1)
    params.update(init_projection("proj_text", run.model_dim, run.shared_dim, rng_proj))
    params.update(init_projection("proj_img", cfg_vision.model_dim, run.shared_dim, rng_proj))
    params["clip.log_tau"] = init_log_tau()
    set_trainable(params, lambda n: n.startswith(CLIP_TRAINABLE_PREFIXES))
    _assert_regime(params)

    section_of = section_of or (lambda sid: "findings")

    def items_for(subset):
        return [
            (clip_text_seq(s, vocab, run, section_of(s.study_id)), s.image)
            for s in subset
        ]

    train_items = items_for(train_studies)
    val_items = items_for(val_studies)
    _center_projections(params, cfg_text, cfg_vision, run, lora, train_items)
    opt = AdamW(
        group_lrs={
            "lora.": run.lr_text,
            "proj_text": run.lr_projection,
            "proj_img": run.lr_projection,
            "vision.": run.lr_projection,
            "clip.log_tau": run.lr_projection,
        }
    )
    log = TrainLog(log_path)
    result = StageResult("clip", params, vocab, run, 0, opt, log.records)
    bs = run.batch_clip
    total_steps = run.epochs_clip * math.ceil(len(train_items) / bs)
    step = 0
    try:
        lengths = [len(seq.ids) for seq, _ in train_items]
        for epoch in range(run.epochs_clip):
            rng_epoch = stream_rng(run.seed, _STREAM_ORDER["clip"], epoch)
            for batch_ids in bucketed_batches(lengths, bs, rng_epoch):
                batch = [train_items[j] for j in batch_ids]
                if len(batch) < 2:
                    continue
                rng_drop = stream_rng(run.seed, _STREAM_DROPOUT, step)
                opt.zero_grad(params)
                _assert_regime(params)
                loss = _clip_batch_loss(
                    params, cfg_text, cfg_vision, run, lora, batch, True, rng_drop
                )
                value = float(loss.data)
                _check_loss_finite(value, "clip", step, result, ckpt_path)
                backward(loss)
                _assert_frozen_untouched(params)
                opt.lr_scale = _lr_scale(run, step, total_steps)
                opt.step(params)
                log_tau = float(params["clip.log_tau"].data[0])
                tau = 1.0 / float(inverse_tau(log_tau).data[0])
                log.write(
                    step=step, stage="clip", loss=value,
                    lr=run.lr_projection * opt.lr_scale, tau=tau,
                )
                step += 1
            val = _clip_val(params, cfg_text, cfg_vision, run, lora, val_items)
            log.write(stage="clip", epoch=epoch, val_loss=val["val_loss"], **{
                k: v for k, v in val.items() if k != "val_loss"
            })
        result.step = step
        if ckpt_path is not None:
            result.save(ckpt_path)
        return result
    finally:
        log.close()


def _clip_val(params, cfg_text, cfg_vision, run, lora, val_items) -> dict:
    """Validation loss plus recall@{1,5,10} of image→report retrieval."""
    bs = run.batch_clip
    total, count = 0.0, 0
    t_rows, v_rows = [], []
    for start in range(0, len(val_items), bs):
        batch = val_items[start : start + bs]
        if len(batch) >= 2:
            loss = _clip_batch_loss(
                params, cfg_text, cfg_vision, run, lora, batch, False, None
            )
            total += float(loss.data) * len(batch)
            count += len(batch)
        seqs = [seq for seq, _ in batch]
        images = np.stack([img for _, img in batch])
        t_emb = encode_pooled(params, cfg_text, run, seqs, lora=lora, normalize=False)
        v_emb = vision_forward(params, cfg_vision, images)
        t_rows.append(project(t_emb, params["proj_text.w"], params["proj_text.mu"]).data)
        v_rows.append(project(v_emb, params["proj_img.w"], params["proj_img.mu"]).data)
    t_mat = np.concatenate(t_rows)
    v_mat = np.concatenate(v_rows)
    sims = v_mat @ t_mat.T
    n = sims.shape[0]
    diag = sims[np.arange(n), np.arange(n)][:, None]
    # ties count against the query: a collapsed embedding must not score
    ranks = (sims > diag).sum(axis=1) + ((sims == diag).sum(axis=1) - 1)
    out = {"val_loss": total / max(count, 1)}
    for k in (1, 5, 10):
        out[f"recall@{k}"] = float((ranks < k).mean())
    return out
