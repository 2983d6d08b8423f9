import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from phrasealign import local_align as la
from phrasealign import model as md
from phrasealign import numerics as nx
from phrasealign.numerics import Rng, Tensor


def stochastic_rows(raw):
    e = np.exp(raw - raw.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def fake_trace(attn_rows, values, heads=1, layer=1, grad=False):
    """Trace with identical per-head matrices, optionally graph leaves."""
    attn = [Tensor(np.asarray(attn_rows, dtype=float), requires_grad=grad)
            for _ in range(heads)]
    vals = [Tensor(np.asarray(values, dtype=float), requires_grad=grad)
            for _ in range(heads)]
    qs = [Tensor(np.zeros((len(attn_rows), np.asarray(values).shape[1])))
          for _ in range(heads)]
    return md.AttentionTrace(layer, attn, vals, qs)


# ---------------------------------------------------------------------------
# forward attention


def test_forward_attention_reads_requested_row():
    trace = fake_trace([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]], np.zeros((3, 2)))
    (fa,) = la.forward_attention(trace, 0)
    assert np.array_equal(fa, [0.7, 0.2, 0.1])
    (fa1,) = la.forward_attention(trace, 1)
    assert np.array_equal(fa1, [0.1, 0.8, 0.1])


def test_forward_attention_rows_sum_to_one():
    rng = Rng(0)
    trace = fake_trace(stochastic_rows(rng.normal((4, 6))), rng.normal((6, 3)),
                       heads=2)
    for fa in la.forward_attention(trace, 2):
        assert abs(fa.sum() - 1.0) <= 1e-9


def test_forward_attention_requires_trace():
    with pytest.raises(ValueError, match="trace"):
        la.forward_attention(None)


# ---------------------------------------------------------------------------
# score


def test_score_hand_value():
    trace = fake_trace([[1.0, 0.0]], [[1.0, 2.0], [3.0, 4.0]])
    (s,) = la.score_per_head(trace, 0, Tensor([[1.0], [1.0]]))
    assert s.item() == pytest.approx(3.0)


def test_score_zero_projection():
    trace = fake_trace([[0.3, 0.7]], [[1.0, 2.0], [3.0, 4.0]])
    (s,) = la.score_per_head(trace, 0, Tensor([[0.0], [0.0]]))
    assert s.item() == 0.0


def test_score_linear_in_projection():
    trace = fake_trace([[0.3, 0.7]], [[1.0, 2.0], [3.0, 4.0]])
    w = Rng(1).normal((2, 1))
    (s1,) = la.score_per_head(trace, 0, Tensor(w))
    (s2,) = la.score_per_head(trace, 0, Tensor(2.0 * w))
    assert s2.item() == pytest.approx(2.0 * s1.item())


# ---------------------------------------------------------------------------
# backward attention


def test_backward_attention_hand_value():
    trace = fake_trace([[1.0, 0.0]], [[1.0, 2.0], [3.0, 4.0]])
    (ba,) = la.backward_attention(trace, Tensor([[1.0], [1.0]]))
    assert np.array_equal(ba, [3.0, 7.0])


def test_backward_attention_zero_values():
    trace = fake_trace([[0.5, 0.5]], np.zeros((2, 3)))
    (ba,) = la.backward_attention(trace, Tensor(np.ones((3, 1))))
    assert np.array_equal(ba, [0.0, 0.0])


@pytest.mark.parametrize("seed", range(5))
def test_backward_attention_equals_autodiff(seed):
    rng = Rng(seed)
    n_img, dh = 5, 4
    a = Tensor(stochastic_rows(rng.normal((3, n_img))), requires_grad=True)
    v = Tensor(rng.normal((n_img, dh)))
    ws = Tensor(rng.normal((dh, 1)))
    trace = md.AttentionTrace(1, [a], [v], [Tensor(np.zeros((3, dh)))])
    (s,) = la.score_per_head(trace, 2, ws)
    nx.backward(s)
    (closed,) = la.backward_attention(trace, ws)
    autodiff = a.grad[2]
    denom = np.maximum(np.abs(autodiff), 1e-12)
    assert (np.abs(closed - autodiff) / denom).max() < 1e-10
    # rows other than the scored one receive no gradient at all
    assert np.array_equal(a.grad[0], np.zeros(n_img))


# ---------------------------------------------------------------------------
# bidirectional weights


def test_weights_neutral_backward_returns_forward():
    fa = [np.array([0.2, 0.5, 0.3])]
    ba = [np.ones(3)]
    w = la.bidirectional_weights(fa, ba)
    assert np.allclose(w, fa[0])


def test_weights_hand_value():
    w = la.bidirectional_weights([np.array([0.5, 0.5])], [np.array([1.0, 3.0])])
    assert np.allclose(w, [0.25, 0.75])


def test_weights_all_negative_backward_falls_back():
    fa = [np.array([0.1, 0.6, 0.3])]
    ba = [np.array([-1.0, -2.0, -0.5])]
    w = la.bidirectional_weights(fa, ba)
    assert np.allclose(w, fa[0])


@given(raw=hnp.arrays(np.float64, (2, 6), elements=st.floats(-10, 10)),
       ba=hnp.arrays(np.float64, (2, 6), elements=st.floats(-100, 100)))
def test_weights_are_probability_vector(raw, ba):
    fa = stochastic_rows(raw)
    w = la.bidirectional_weights(list(fa), list(ba))
    assert np.all(w >= 0.0)
    assert abs(w.sum() - 1.0) <= 1e-9


def test_weights_invariant_to_value_scale():
    rng = Rng(3)
    fa = [stochastic_rows(rng.normal((1, 9)))[0] for _ in range(4)]
    v = [rng.normal((9, 4)) for _ in range(4)]
    ws = rng.normal(4)
    ba = [vi @ ws for vi in v]
    ba_scaled = [17.3 * b for b in ba]
    w1 = la.bidirectional_weights(fa, ba)
    w2 = la.bidirectional_weights(fa, ba_scaled)
    assert np.abs(w1 - w2).max() <= 1e-9
    assert w1.argmax() == w2.argmax()


# ---------------------------------------------------------------------------
# pooling


def image_output(rows):
    return md.EncoderOutput(Tensor(np.asarray(rows, dtype=float)))


def test_pool_one_hot_selects_patch():
    img = image_output(Rng(0).normal((5, 3)))
    w = np.array([0.0, 0.0, 0.0, 1.0, 0.0])  # CLS + 4 patches; patch 3
    pooled = la.weighted_pool(w, img)
    assert np.allclose(pooled.data, img.reps.data[3])


def test_pool_uniform_is_patch_mean():
    img = image_output(Rng(1).normal((5, 3)))
    w = np.full(5, 0.2)
    pooled = la.weighted_pool(w, img)
    assert np.allclose(pooled.data, img.reps.data[1:].mean(axis=0))


def test_pool_identical_rows_any_weights():
    row = Rng(2).normal(4)
    img = image_output(np.vstack([np.zeros(4)] + [row] * 6))
    w = np.array([0.1, 0.3, 0.2, 0.1, 0.1, 0.1, 0.1])
    pooled = la.weighted_pool(w, img)
    assert np.allclose(pooled.data, row)


def test_pool_rejects_unnormalized():
    img = image_output(np.zeros((3, 2)))
    with pytest.raises(ValueError, match="sum"):
        la.weighted_pool(np.array([1.0, 1.0, 1.0]), img)


def test_pool_in_convex_hull():
    rng = Rng(4)
    img = image_output(rng.normal((6, 2)))
    raw = rng.uniform(6) + 0.01
    w = raw / raw.sum()
    pooled = la.weighted_pool(w, img)
    patches = img.reps.data[1:]
    assert pooled.data.min() >= patches.min(axis=0).min() - 1e-12
    assert pooled.data.max() <= patches.max(axis=0).max() + 1e-12


# ---------------------------------------------------------------------------
# coarse similarity and loss


def test_similarity_identical_is_one():
    eye = Tensor(np.eye(3))
    v = Tensor(np.array([1.0, 2.0, 3.0]))
    assert la.coarse_similarity(v, v, eye, eye).item() == pytest.approx(1.0)


def test_similarity_orthogonal_is_zero():
    eye = Tensor(np.eye(2))
    a, b = Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.0, 1.0]))
    assert la.coarse_similarity(a, b, eye, eye).item() == pytest.approx(0.0)


def test_similarity_scale_invariant():
    rng = Rng(5)
    pa, pb = Tensor(rng.normal((4, 3))), Tensor(rng.normal((4, 3)))
    a, b = Tensor(rng.normal(4)), Tensor(rng.normal(4))
    base = la.coarse_similarity(a, b, pa, pb).item()
    scaled = la.coarse_similarity(nx.mul(a, 7.0), nx.mul(b, 0.3), pa, pb).item()
    assert scaled == pytest.approx(base, abs=1e-12)


def test_similarity_zero_vector_warns_returns_zero(caplog):
    eye = Tensor(np.eye(2))
    z, v = Tensor(np.zeros(2)), Tensor(np.ones(2))
    with caplog.at_level("WARNING"):
        out = la.coarse_similarity(z, v, eye, eye)
    assert out.item() == 0.0
    assert any("zero vector" in r.message for r in caplog.records)


def aligned_loss_setup(sign):
    # identical patch rows make pooling trivial; identity projections make
    # the phrase row align (or anti-align) exactly
    row = np.array([1.0, -2.0, 0.5])
    img = image_output(np.vstack([np.zeros(3)] + [row] * 4))
    phrase = md.EncoderOutput(Tensor(np.vstack([sign * row, row])))
    rng = Rng(0)
    trace = fake_trace(stochastic_rows(rng.normal((2, 5))), rng.normal((5, 2)),
                       heads=2)
    fusion = md.FusionOutput(Tensor(np.zeros((2, 3))), trace)
    params = md.Params()
    params.add("score.w", rng.normal((2, 1)))
    params.add("proj.img.w", np.eye(3))
    params.add("proj.txt.w", np.eye(3))
    cfg = md.ModelConfig(d=3, heads=2, vocab_size=8, patch_rows=2, patch_cols=2,
                         patch_pixels=3)
    return img, phrase, fusion, params, cfg


def test_loss_zero_when_aligned():
    img, phrase, fusion, params, cfg = aligned_loss_setup(+1.0)
    loss, weights = la.local_alignment_loss(img, phrase, fusion, 1, params, cfg)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)
    assert abs(weights.w.sum() - 1.0) <= 1e-9


def test_loss_two_when_anti_aligned():
    img, phrase, fusion, params, cfg = aligned_loss_setup(-1.0)
    loss, _ = la.local_alignment_loss(img, phrase, fusion, 1, params, cfg)
    assert loss.item() == pytest.approx(2.0, abs=1e-12)


def test_loss_within_range_on_random_setups():
    rng = Rng(9)
    for _ in range(10):
        img = image_output(rng.normal((5, 3)))
        phrase = md.EncoderOutput(Tensor(rng.normal((3, 3))))
        trace = fake_trace(stochastic_rows(rng.normal((3, 5))),
                           rng.normal((5, 2)), heads=2)
        fusion = md.FusionOutput(Tensor(np.zeros((3, 3))), trace)
        params = md.Params()
        params.add("score.w", rng.normal((2, 1)))
        params.add("proj.img.w", rng.normal((3, 4)))
        params.add("proj.txt.w", rng.normal((3, 4)))
        cfg = md.ModelConfig(d=3, heads=2, vocab_size=8, patch_rows=2,
                             patch_cols=2, patch_pixels=3, proj_dim=4)
        loss, _ = la.local_alignment_loss(img, phrase, fusion, 1, params, cfg)
        assert 0.0 <= loss.item() <= 2.0


def test_loss_requires_trace():
    img, phrase, fusion, params, cfg = aligned_loss_setup(1.0)
    fusion_no_trace = md.FusionOutput(fusion.reps, None)
    with pytest.raises(ValueError, match="trace"):
        la.local_alignment_loss(img, phrase, fusion_no_trace, 1, params, cfg)


# ---------------------------------------------------------------------------
# heatmap export


def test_heatmap_csv_lines():
    w = la.BidirectionalWeights(
        w_fa=np.linspace(0, 1, 5), w_ba=np.linspace(1, 2, 5),
        w=np.array([0.0, 0.25, 0.25, 0.25, 0.25]), s_per_head=[0.5])
    lines = la.heatmap_csv_lines(w, 2, 2)
    assert lines[0] == "patch,row,col,w,w_fa,w_ba"
    assert len(lines) == 5
    assert lines[1].startswith("1,0,0,0.25,")
    assert lines[4].startswith("4,1,1,0.25,")


def test_pgm_output(tmp_path):
    w = np.array([0.0, 0.1, 0.2, 0.3, 0.4])
    la.write_pgm(tmp_path / "w.pgm", w, 2, 2)
    raw = (tmp_path / "w.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    pixels = raw[len(b"P5\n2 2\n255\n"):]
    assert len(pixels) == 4
    assert pixels[0] == 0 and pixels[3] == 255
