"""AdamW, cosine learning-rate schedule, and the two-stage training loop.

Stage 1 optimizes the contrastive and matching terms only; stage 2 adds the
triplet, local-alignment, and masked-phrase terms. The momentum shadows are
updated after every optimizer step and are never touched by the optimizer.
Runs are bit-for-bit reproducible from the seed.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from . import losses as ls
from . import model as md
from . import numerics as nx
from .data import Batch, DataConfig, Dataset, make_batches
from .local_align import local_alignment_loss
from .numerics import Rng, Tensor
from .textproc import TextPipeline

LOG_COLUMNS = ("step", "lr", "itc", "itm", "tri", "biatt", "mpm", "total")


class NumericalError(RuntimeError):
    """Training hit NaN/Inf in a loss or gradient."""


@dataclasses.dataclass
class TrainConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 15
    base_lr: float = 1e-3        # cold-start desk value; see paper_scale_config
    warmup_lr: float = 1e-6
    warmup_frac: float = 0.1     # fraction of each stage spent ramping up
    batch_size: int = 8
    triplet_margin: float = 0.6
    momentum_coeff: float = 0.995
    queue_size: int = 256
    k_rerank: int = 32
    seed: int = 0
    weight_decay: float = 0.01
    max_grad_norm: float = 0.0   # 0 disables clipping
    triplet_direction: str = "standard"   # or "printed"
    neg_sampling: str = "hard"            # or "uniform"
    enable_triplet: bool = True
    enable_biatt: bool = True
    enable_mpm: bool = True

    def validate(self) -> None:
        if min(self.stage1_epochs, self.stage2_epochs) < 0:
            raise ValueError("epoch counts must be nonnegative")
        if min(self.base_lr, self.warmup_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.triplet_margin < 0:
            raise ValueError("triplet margin must be nonnegative")
        if not 0.0 <= self.momentum_coeff < 1.0:
            raise ValueError("momentum coefficient must lie in [0, 1)")
        if self.queue_size < 1 or self.batch_size < 1:
            raise ValueError("queue and batch sizes must be positive")
        if self.triplet_direction not in ("standard", "printed"):
            raise ValueError("triplet_direction must be standard or printed")
        if self.neg_sampling not in ("hard", "uniform"):
            raise ValueError("neg_sampling must be hard or uniform")


def paper_scale_config() -> TrainConfig:
    """The full-scale hyperparameters, for reference runs."""
    return TrainConfig(base_lr=1e-5, warmup_lr=1e-6, stage1_epochs=30,
                       stage2_epochs=15)


# ---------------------------------------------------------------------------
# optimizer


@dataclasses.dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: md.Params) -> "OptimState":
        return cls(m={n: np.zeros_like(t.data) for n, t in params.named()},
                   v={n: np.zeros_like(t.data) for n, t in params.named()})


def adamw_step(params: md.Params, state: OptimState, lr: float,
               weight_decay: float) -> None:
    """Decoupled weight decay (matrices only), then Adam with bias correction.

    Momentum shadows are not parameters and are never visited here.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.named():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient on parameter {name}")
        if weight_decay and p.data.ndim >= 2:
            p.data *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_gradients(params: md.Params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, p in params.named():
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in params.named():
            if p.grad is not None:
                p.grad *= scale
    return norm


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int,
              warmup_lr: float) -> float:
    """Linear ramp from warmup_lr to base_lr, then cosine decay to zero."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if warmup_steps > 0 and step < warmup_steps:
        return warmup_lr + (base_lr - warmup_lr) * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# training


@dataclasses.dataclass
class StepDiagnostics:
    attention_row_dev: float     # worst |row sum - 1| across every softmax row
    weight_sums: list            # per phrase: sum of the pooling weight vector


@dataclasses.dataclass
class TrainResult:
    params: md.Params
    momentum: md.MomentumState
    queue: ls.QueueState
    log_rows: list
    diagnostics: list
    checkpoints: dict


def momentum_params(state: md.MomentumState) -> md.Params:
    """The shadow tensors exposed with the live parameter names; sufficient
    for the unimodal encoders and coarse projections."""
    p = md.Params()
    p._tensors = dict(state.shadow)
    return p


def _coarse_embeddings_live(batch: Batch, params: md.Params,
                            cfg: md.ModelConfig):
    img_outs = [md.encode_image(x, params, cfg) for x in batch.images]
    txt_outs = [md.encode_text(ids, params, cfg) for ids in batch.token_ids]
    img = img_outs[0].cls
    img_rows = [nx.as_row(o.cls) for o in img_outs]
    txt_rows = [nx.as_row(o.cls) for o in txt_outs]
    img_mat = img_rows[0]
    for r in img_rows[1:]:
        img_mat = nx.concat_rows(img_mat, r)
    txt_mat = txt_rows[0]
    for r in txt_rows[1:]:
        txt_mat = nx.concat_rows(txt_mat, r)
    img_emb = nx.l2_normalize_rows(nx.matmul(img_mat, params["proj.img.w"]))
    txt_emb = nx.l2_normalize_rows(nx.matmul(txt_mat, params["proj.txt.w"]))
    return img_outs, txt_outs, img_emb, txt_emb


def _coarse_embeddings_momentum(batch: Batch, state: md.MomentumState,
                                cfg: md.ModelConfig):
    shadow = momentum_params(state)
    with nx.no_grad():
        img = np.vstack([md.encode_image(x, shadow, cfg).cls.data
                         for x in batch.images])
        txt = np.vstack([md.encode_text(ids, shadow, cfg).cls.data
                         for ids in batch.token_ids])
        img = img @ shadow["proj.img.w"].data
        txt = txt @ shadow["proj.txt.w"].data
        img /= np.maximum(np.linalg.norm(img, axis=1, keepdims=True), 1e-12)
        txt /= np.maximum(np.linalg.norm(txt, axis=1, keepdims=True), 1e-12)
    return img, txt


def train_step(batch: Batch, stage: int, params: md.Params,
               momentum: md.MomentumState, queue: ls.QueueState,
               model_cfg: md.ModelConfig, cfg: TrainConfig, rng: Rng):
    """One forward/backward pass; returns (total, breakdown, diagnostics).

    Gradients are left populated for the caller's optimizer step.
    """
    n = len(batch.images)
    devs: list = []
    with md.collect_attention_row_sums(devs):
        img_outs, txt_outs, img_emb, txt_emb = _coarse_embeddings_live(
            batch, params, model_cfg)
        mom_img, mom_txt = _coarse_embeddings_momentum(batch, momentum, model_cfg)
        tau = nx.exp(params["temp.log_tau"])
        itc, p_i2t, p_t2i = ls.itc_loss(img_emb, txt_emb, mom_img, mom_txt,
                                        queue, tau)

        coarse = img_emb.data @ txt_emb.data.T
        neg_txt, neg_img = ls.sample_negatives(batch.identities, coarse, rng,
                                               mode=cfg.neg_sampling)
        w_o = params["itm.w"]
        pos_logits = []
        pairs = []
        for i in range(n):
            fused = md.cross_encode(txt_outs[i], img_outs[i], params, model_cfg)
            logit = ls.fine_similarity(fused.cls, w_o)
            pos_logits.append(logit)
            pairs.append((logit, 1.0))
        neg_txt_logits, neg_img_logits = {}, {}
        for i, j in enumerate(neg_txt):  # image i with a non-matching text j
            fused = md.cross_encode(txt_outs[j], img_outs[i], params, model_cfg)
            logit = ls.fine_similarity(fused.cls, w_o)
            neg_txt_logits[i] = logit
            pairs.append((logit, 0.0))
        for j, i in enumerate(neg_img):  # text j with a non-matching image i
            fused = md.cross_encode(txt_outs[j], img_outs[i], params, model_cfg)
            logit = ls.fine_similarity(fused.cls, w_o)
            neg_img_logits[j] = logit
            pairs.append((logit, 0.0))
        itm = ls.itm_loss(pairs)

        tri = None
        if stage != 1 and cfg.enable_triplet and neg_txt:
            terms = None
            for i in range(n):
                term = ls.fusion_triplet_loss(
                    pos_logits[i], neg_img_logits[i], neg_txt_logits[i],
                    margin=cfg.triplet_margin, direction=cfg.triplet_direction)
                terms = term if terms is None else nx.add(terms, term)
            tri = nx.mul(terms, 1.0 / n)

        per_phrase = []
        weight_sums = []
        if stage != 1 and (cfg.enable_biatt or cfg.enable_mpm):
            for i in range(n):
                for phrase, masked in batch.phrase_pairs[i]:
                    phrase_ids = list(masked.token_ids)
                    phr_out = md.encode_text(phrase_ids, params, model_cfg)
                    need_trace = cfg.enable_biatt and \
                        model_cfg.biatt_phrase == "masked"
                    fused = md.cross_encode(
                        phr_out, img_outs[i], params, model_cfg,
                        trace_layer=model_cfg.bidiratt_layer if need_trace else None)
                    biatt_term = Tensor(0.0)
                    mpm_term = Tensor(0.0)
                    if cfg.enable_biatt:
                        if model_cfg.biatt_phrase == "clean":
                            clean_out = md.encode_text(list(phrase.token_ids),
                                                       params, model_cfg)
                            clean_fused = md.cross_encode(
                                clean_out, img_outs[i], params, model_cfg,
                                trace_layer=model_cfg.bidiratt_layer)
                            biatt_term, weights = local_alignment_loss(
                                img_outs[i], clean_out, clean_fused,
                                masked.mask_index + 1, params, model_cfg,
                                target_id=masked.target_id)
                        else:
                            biatt_term, weights = local_alignment_loss(
                                img_outs[i], phr_out, fused,
                                masked.mask_index + 1, params, model_cfg,
                                target_id=masked.target_id)
                        weight_sums.append(float(weights.w.sum()))
                    if cfg.enable_mpm:
                        mpm_term = ls.masked_phrase_loss(
                            fused, masked, params,
                            positions=model_cfg.mpm_positions)
                    per_phrase.append((biatt_term, mpm_term))

        total, breakdown = ls.total_loss(itc, itm, tri, per_phrase, stage,
                                         phrase_scale=1.0 / n,
                                         p_i2t=p_i2t, p_t2i=p_t2i)
    diag = StepDiagnostics(attention_row_dev=max(devs) if devs else 0.0,
                           weight_sums=weight_sums)
    return total, breakdown, diag


def _batches_per_epoch(records, batch_size: int) -> int:
    counts: dict[int, int] = {}
    for r in records:
        counts[r.identity] = counts.get(r.identity, 0) + 1
    remaining = list(counts.values())
    steps = 0
    while any(remaining):
        remaining.sort(reverse=True)
        for i in range(min(batch_size, len(remaining))):
            if remaining[i] > 0:
                remaining[i] -= 1
        steps += 1
    return steps


def train(model_cfg: md.ModelConfig, cfg: TrainConfig, dataset: Dataset,
          pipeline: TextPipeline, out_dir=None) -> TrainResult:
    """Run both stages; optionally write per-stage checkpoints and the CSV
    training log under ``out_dir``."""
    cfg.validate()
    model_cfg.validate()
    dcfg = dataset.config
    if (dcfg.patch_rows, dcfg.patch_cols, dcfg.patch_pixels) != \
            (model_cfg.patch_rows, model_cfg.patch_cols, model_cfg.patch_pixels):
        raise ValueError("model patch geometry does not match the dataset")

    rng = Rng(cfg.seed)
    init_rng, batch_rng, neg_rng = rng.child(), rng.child(), rng.child()
    params = md.init_params(model_cfg, init_rng)
    momentum = md.MomentumState.from_params(params, cfg.momentum_coeff)
    queue = ls.QueueState(cfg.queue_size, model_cfg.proj_dim)
    optim = OptimState.for_params(params)

    records = dataset.train_records()
    effective_batch = min(cfg.batch_size, len({r.identity for r in records}))
    per_epoch = _batches_per_epoch(records, effective_batch)
    log_rows: list = []
    diagnostics: list = []
    checkpoints: dict = {}
    global_step = 0

    for stage, epochs in ((1, cfg.stage1_epochs), (2, cfg.stage2_epochs)):
        total_steps = epochs * per_epoch
        warmup = int(round(cfg.warmup_frac * total_steps))
        stage_step = 0
        for _ in range(epochs):
            batches = make_batches(records, effective_batch, pipeline, batch_rng)
            for batch in batches:
                lr = cosine_lr(stage_step, total_steps, cfg.base_lr, warmup,
                               cfg.warmup_lr)
                try:
                    total, breakdown, diag = train_step(
                        batch, stage, params, momentum, queue, model_cfg, cfg,
                        neg_rng)
                except nx.NonFiniteError as e:
                    raise NumericalError(
                        f"non-finite loss at step {global_step}: {e}") from e
                if not math.isfinite(breakdown.total):
                    raise NumericalError(
                        f"non-finite loss at step {global_step}: {breakdown}")
                nx.backward(total)
                if cfg.max_grad_norm > 0:
                    clip_gradients(params, cfg.max_grad_norm)
                adamw_step(params, optim, lr, cfg.weight_decay)
                md.momentum_update(params, momentum)
                params.zero_grads()
                log_rows.append({"step": global_step, "lr": lr,
                                 "itc": breakdown.itc, "itm": breakdown.itm,
                                 "tri": breakdown.tri, "biatt": breakdown.biatt,
                                 "mpm": breakdown.mpm, "total": breakdown.total})
                diagnostics.append(diag)
                stage_step += 1
                global_step += 1
        if out_dir is not None:
            path = Path(out_dir) / f"stage{stage}.ckpt"
            md.save_checkpoint(path, md.params_state(params, momentum))
            checkpoints[stage] = path

    if out_dir is not None:
        write_log_csv(Path(out_dir) / "training_log.csv", log_rows)
    return TrainResult(params, momentum, queue, log_rows, diagnostics,
                       checkpoints)


def write_log_csv(path, log_rows) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for row in log_rows:
        lines.append(",".join(f"{row[c]:.12g}" if c != "step" else str(row[c])
                              for c in LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
