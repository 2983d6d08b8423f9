"""Finite-difference validation of every loss in the artifact.

Each check rebuilds a small forward graph with one named parameter replaced
by the probe tensor and compares the autodiff gradient against central
differences. The suite backs both the ``gradcheck`` CLI subcommand and the
acceptance tests.
"""

from __future__ import annotations

import numpy as np

from . import losses, model
from . import numerics as nx
from .numerics import Rng, Tensor
from .local_align import coarse_similarity, local_alignment_loss, weighted_pool
from .textproc import MaskedPhrase, TextPipeline, MASK_ID

TOLERANCE = 1e-6
SUITE_EPS = 1e-4  # roundoff dominates the deep graphs at smaller steps


def finite_diff_param(params: model.Params, name: str, build_loss,
                      eps: float = SUITE_EPS) -> float:
    """Central-difference check of d(loss)/d(params[name]).

    ``build_loss`` is a zero-argument callable that constructs the scalar
    loss from the current parameters; the named parameter is temporarily
    replaced by the probe leaf on every evaluation.
    """
    original = params[name]

    def f(x: Tensor) -> Tensor:
        params._tensors[name] = x
        try:
            return build_loss()
        finally:
            params._tensors[name] = original

    params.zero_grads()
    try:
        return nx.finite_diff_check(f, original, eps=eps)
    finally:
        params.zero_grads()


# ---------------------------------------------------------------------------
# toy fixtures


def _toy_config(vocab_size: int) -> model.ModelConfig:
    return model.ModelConfig(d=8, heads=2, n_self_layers=1, n_cross_layers=2,
                             bidiratt_layer=1, proj_dim=4, patch_rows=2,
                             patch_cols=2, patch_pixels=6, max_text_len=12,
                             vocab_size=vocab_size)


def _toy_setup(seed: int):
    pipeline = TextPipeline()
    cfg = _toy_config(len(pipeline.vocab))
    rng = Rng(seed)
    params = model.init_params(cfg, rng)
    # widen the init so gradients sit comfortably above the FD noise floor;
    # the vocabulary classifier stays at init scale or its softmax saturates
    # and the tail gradients fall back into the noise
    for name, t in params.named():
        if t.data.ndim >= 2 and name != "mpm.w2":
            t.data *= 12.0
    images = [rng.uniform((cfg.n_patches, cfg.patch_pixels)) for _ in range(2)]
    texts = [pipeline.encode("a red shirt and blue pants ."),
             pipeline.encode("a green coat and white shorts .")]
    return pipeline, cfg, params, rng, images, texts


def _masked_phrase(pipeline, rng) -> MaskedPhrase:
    phrase = pipeline.phrases("a red shirt")[0]
    ids = list(phrase.token_ids)
    pos = rng.integer(len(ids))
    target = ids[pos]
    ids[pos] = MASK_ID
    return MaskedPhrase(tuple(ids), pos, target)


def _coarse_embeddings(images, texts, params, cfg):
    img_rows, txt_rows = [], []
    for patches in images:
        cls = model.encode_image(patches, params, cfg).cls
        img_rows.append(nx.as_row(cls))
    for ids in texts:
        cls = model.encode_text(ids, params, cfg).cls
        txt_rows.append(nx.as_row(cls))
    img = img_rows[0]
    for r in img_rows[1:]:
        img = nx.concat_rows(img, r)
    txt = txt_rows[0]
    for r in txt_rows[1:]:
        txt = nx.concat_rows(txt, r)
    img = nx.l2_normalize_rows(nx.matmul(img, params["proj.img.w"]))
    txt = nx.l2_normalize_rows(nx.matmul(txt, params["proj.txt.w"]))
    return img, txt


# ---------------------------------------------------------------------------
# per-loss checks; each returns the max relative error over probed parameters


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def check_itc(seed: int) -> float:
    _, cfg, params, _, images, texts = _toy_setup(seed)
    mom = Rng(seed + 1)
    mom_img = _unit_rows(mom.normal((2, cfg.proj_dim)))
    mom_txt = _unit_rows(mom.normal((2, cfg.proj_dim)))
    queue_seed = seed + 2

    def build():
        # rebuilt per evaluation so the queue fill is identical every time
        local = Rng(queue_seed)
        queue = losses.QueueState(8, cfg.proj_dim)
        queue.enqueue(local.normal((3, cfg.proj_dim)), local.normal((3, cfg.proj_dim)))
        img, txt = _coarse_embeddings(images, texts, params, cfg)
        tau = nx.exp(params["temp.log_tau"])
        loss, _, _ = losses.itc_loss(img, txt, mom_img, mom_txt, queue, tau)
        return loss

    errs = [finite_diff_param(params, "temp.log_tau", build),
            finite_diff_param(params, "txt_self0.ln2.g", build),
            finite_diff_param(params, "img_self0.ffn.b2", build),
            finite_diff_param(params, "embed.patch.b", build)]
    return max(errs)


def check_itm(seed: int) -> float:
    _, cfg, params, _, images, texts = _toy_setup(seed)

    def build():
        img = model.encode_image(images[0], params, cfg)
        pos = model.cross_encode(model.encode_text(texts[0], params, cfg),
                                 img, params, cfg)
        neg = model.cross_encode(model.encode_text(texts[1], params, cfg),
                                 img, params, cfg)
        return losses.itm_loss([
            (losses.fine_similarity(pos.cls, params["itm.w"]), 1.0),
            (losses.fine_similarity(neg.cls, params["itm.w"]), 0.0),
        ])

    errs = [finite_diff_param(params, "itm.w", build),
            finite_diff_param(params, "cross1.ln3.g", build),
            finite_diff_param(params, "cross0.ffn.w2", build)]
    return max(errs)


def check_triplet(seed: int) -> float:
    _, cfg, params, _, images, texts = _toy_setup(seed)

    def build():
        img0 = model.encode_image(images[0], params, cfg)
        img1 = model.encode_image(images[1], params, cfg)
        txt0 = model.encode_text(texts[0], params, cfg)
        txt1 = model.encode_text(texts[1], params, cfg)
        w_o = params["itm.w"]
        pos = losses.fine_similarity(model.cross_encode(txt0, img0, params, cfg).cls, w_o)
        neg_i = losses.fine_similarity(model.cross_encode(txt0, img1, params, cfg).cls, w_o)
        neg_t = losses.fine_similarity(model.cross_encode(txt1, img0, params, cfg).cls, w_o)
        return losses.fusion_triplet_loss(pos, neg_i, neg_t, margin=0.6)

    errs = [finite_diff_param(params, "itm.w", build),
            finite_diff_param(params, "cross1.ln3.g", build),
            finite_diff_param(params, "cross1.ffn.b2", build)]
    return max(errs)


def check_local_align(seed: int) -> float:
    pipeline, cfg, params, rng, images, _ = _toy_setup(seed)
    masked = _masked_phrase(pipeline, rng)

    def build():
        img = model.encode_image(images[0], params, cfg)
        phr = model.encode_text(list(masked.token_ids), params, cfg)
        fused = model.cross_encode(phr, img, params, cfg,
                                   trace_layer=cfg.bidiratt_layer)
        loss, _ = local_alignment_loss(img, phr, fused, masked.mask_index + 1,
                                       params, cfg)
        return loss

    # the projections do not feed the attention trace, so the full loss is
    # checkable through them as-is; the cosine's worst gradient elements are
    # truncation-limited, hence the smaller step
    errs = [finite_diff_param(params, "proj.txt.w", build, eps=3e-5),
            finite_diff_param(params, "proj.img.w", build, eps=3e-5)]

    # encoder parameters do feed the trace; the pooling weights are constants
    # by definition, so the probe holds them at their unperturbed values
    with nx.no_grad():
        img0 = model.encode_image(images[0], params, cfg)
        phr0 = model.encode_text(list(masked.token_ids), params, cfg)
        fused0 = model.cross_encode(phr0, img0, params, cfg,
                                    trace_layer=cfg.bidiratt_layer)
        _, frozen = local_alignment_loss(img0, phr0, fused0,
                                         masked.mask_index + 1, params, cfg)

    def build_fixed_w():
        img = model.encode_image(images[0], params, cfg)
        phr = model.encode_text(list(masked.token_ids), params, cfg)
        pooled = weighted_pool(frozen.w, img)
        sim = coarse_similarity(pooled, phr.cls, params["proj.img.w"],
                                params["proj.txt.w"])
        return nx.sub(Tensor(1.0), sim)

    errs.append(finite_diff_param(params, "txt_self0.attn.h0.wv", build_fixed_w))
    errs.append(finite_diff_param(params, "img_self0.ln2.g", build_fixed_w))
    errs.append(finite_diff_param(params, "img_self0.ffn.b2", build_fixed_w))
    return max(errs)


def check_mpm(seed: int) -> float:
    pipeline, cfg, params, rng, images, _ = _toy_setup(seed)
    masked = _masked_phrase(pipeline, rng)

    def build():
        img = model.encode_image(images[0], params, cfg)
        phr = model.encode_text(list(masked.token_ids), params, cfg)
        fused = model.cross_encode(phr, img, params, cfg)
        return losses.masked_phrase_loss(fused, masked, params)

    errs = [finite_diff_param(params, "mpm.b2", build),
            finite_diff_param(params, "mpm.b1", build),
            finite_diff_param(params, "mpm.w2", build),
            finite_diff_param(params, "cross1.ln3.g", build)]
    return max(errs)


def check_total(seed: int) -> float:
    pipeline, cfg, params, rng, images, texts = _toy_setup(seed)
    masked = _masked_phrase(pipeline, rng)
    mom = Rng(seed + 3)
    mom_img = _unit_rows(mom.normal((2, cfg.proj_dim)))
    mom_txt = _unit_rows(mom.normal((2, cfg.proj_dim)))

    def build():
        queue = losses.QueueState(8, cfg.proj_dim)
        img_emb, txt_emb = _coarse_embeddings(images, texts, params, cfg)
        tau = nx.exp(params["temp.log_tau"])
        itc, p_i2t, p_t2i = losses.itc_loss(img_emb, txt_emb, mom_img, mom_txt,
                                            queue, tau)
        img0 = model.encode_image(images[0], params, cfg)
        img1 = model.encode_image(images[1], params, cfg)
        txt0 = model.encode_text(texts[0], params, cfg)
        txt1 = model.encode_text(texts[1], params, cfg)
        w_o = params["itm.w"]
        pos = losses.fine_similarity(model.cross_encode(txt0, img0, params, cfg).cls, w_o)
        neg_i = losses.fine_similarity(model.cross_encode(txt0, img1, params, cfg).cls, w_o)
        neg_t = losses.fine_similarity(model.cross_encode(txt1, img0, params, cfg).cls, w_o)
        itm = losses.itm_loss([(pos, 1.0), (neg_i, 0.0), (neg_t, 0.0)])
        tri = losses.fusion_triplet_loss(pos, neg_i, neg_t, margin=0.6)
        phr = model.encode_text(list(masked.token_ids), params, cfg)
        fused = model.cross_encode(phr, img0, params, cfg,
                                   trace_layer=cfg.bidiratt_layer)
        biatt, _ = local_alignment_loss(img0, phr, fused, masked.mask_index + 1,
                                        params, cfg)
        mpm = losses.masked_phrase_loss(fused, masked, params)
        total, _ = losses.total_loss(itc, itm, tri, [(biatt, mpm)], stage=2,
                                     p_i2t=p_i2t, p_t2i=p_t2i)
        return total

    errs = [finite_diff_param(params, "itm.w", build),
            finite_diff_param(params, "cross1.ln3.g", build),
            finite_diff_param(params, "temp.log_tau", build),
            finite_diff_param(params, "mpm.b2", build)]
    return max(errs)


CHECKS = {
    "itc": check_itc,
    "itm": check_itm,
    "triplet": check_triplet,
    "local_align": check_local_align,
    "mpm": check_mpm,
    "total": check_total,
}


def run_suite(seeds) -> dict:
    """Max relative FD error per loss over the given seeds."""
    return {name: max(fn(seed) for seed in seeds)
            for name, fn in CHECKS.items()}
