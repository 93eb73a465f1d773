import numpy as np
import pytest

from eadk import autodiff as ad
from eadk.detector import (
    DetectorConfig,
    TokenLayout,
    attention,
    decode,
    encode_image,
    enhance,
    extract_detections,
    forward,
    init_embedding_table,
    init_weights,
    select_queries,
    text_inputs,
)
from eadk.errors import ContractError
from eadk.losses import total_loss
from eadk.matching import build_cost_matrix, hungarian

TINY = DetectorConfig(image_size=16, patch_size=8, model_dim=8, enhancer_layers=1, decoder_layers=1, heads=2,
                      num_queries=4, ffn_dim=16)


@pytest.fixture(scope="module")
def default_weights():
    return init_weights(DetectorConfig(), seed=0).freeze()


def test_config_validation():
    with pytest.raises(ContractError):
        DetectorConfig(image_size=60)
    with pytest.raises(ContractError):
        DetectorConfig(model_dim=30, heads=4)
    with pytest.raises(ContractError):
        DetectorConfig(num_queries=65)


# -- table and layout ----------------------------------------------------------
def test_table_shape_and_determinism():
    t = init_embedding_table(2, 4, 64, seed=3)
    assert t.W.shape == (10, 64)
    assert np.array_equal(t.W.data, init_embedding_table(2, 4, 64, seed=3).W.data)
    assert not np.array_equal(t.W.data, init_embedding_table(2, 4, 64, seed=4).W.data)


def test_table_statistics():
    w = init_embedding_table(2, 4, 64, seed=0, sigma=0.02).W.data
    assert abs(w.mean()) < 0.05 * 0.02 * 3
    assert abs(w.std() - 0.02) < 0.05 * 0.02


def test_layout_rows_positions_and_mask():
    lay = TokenLayout(2, 4)
    assert lay.num_tokens == 10
    assert lay.token_slice(0) == slice(1, 5) and lay.token_slice(1) == slice(5, 9)
    assert lay.token_class.tolist() == [-1, 0, 0, 0, 0, 1, 1, 1, 1, -1]
    assert lay.position_ids.tolist() == [0, 0, 1, 2, 3, 0, 1, 2, 3, 0]
    m = lay.attention_mask
    assert m[1:5, 1:5].all() and not m[1:5, 5:9].any() and not m[5:9, 1:5].any()
    assert m[0].tolist() == [True] + [False] * 9 and m[9].tolist() == [False] * 9 + [True]
    with pytest.raises(ContractError):
        lay.token_slice(2)


# -- encoder -------------------------------------------------------------------
def test_encode_shapes_and_zero_image(default_weights):
    tokens = encode_image(np.zeros((64, 64, 3)), default_weights)
    assert tokens.shape == (1, 64, 64)
    expected = default_weights["patch.b"].data + default_weights._pos
    assert np.array_equal(tokens.data[0], expected)
    with pytest.raises(ContractError):
        encode_image(np.zeros((32, 32, 3)), default_weights)


def test_patch_swap_permutes_token_rows_without_context():
    cfg = DetectorConfig(patch_context=0)
    w = init_weights(cfg, seed=1)
    img = np.random.default_rng(0).random((64, 64, 3))
    swapped = img.copy()
    swapped[0:8, 0:8], swapped[24:32, 40:48] = img[24:32, 40:48], img[0:8, 0:8]
    a = encode_image(img, w).data[0] - w._pos
    b = encode_image(swapped, w).data[0] - w._pos
    p, q = 0, 3 * 8 + 5
    perm = np.arange(64)
    perm[[p, q]] = perm[[q, p]]
    assert np.allclose(a[perm], b, atol=1e-13)


def test_patch_context_only_touches_neighbouring_tokens(default_weights):
    img = np.random.default_rng(1).random((64, 64, 3))
    changed = img.copy()
    changed[24:32, 40:48] = 0.0  # cell (row 3, col 5)
    diff = np.abs(encode_image(img, default_weights).data[0] - encode_image(changed, default_weights).data[0]).max(1)
    touched = {r * 8 + c for r in (2, 3, 4) for c in (4, 5, 6)}
    assert all(diff[i] > 0 for i in touched)
    assert all(diff[i] == 0 for i in range(64) if i not in touched)


# -- enhancer ------------------------------------------------------------------
def test_enhance_shapes_and_finite():
    w = init_weights(TINY, seed=2)
    table = init_embedding_table(2, 2, 8, seed=0)
    img = ad.tensor(np.random.default_rng(2).uniform(-10, 10, (3, 4, 8)))
    i_out, t_out = enhance(img, table, w)
    assert i_out.shape == (3, 4, 8) and t_out.shape == (3, 6, 8)
    assert np.all(np.isfinite(i_out.data)) and np.all(np.isfinite(t_out.data))


def _text_self_attention(table, w):
    txt = text_inputs(table, w, 1)
    return attention(txt, txt, txt, w, "enh0.txt_self", w.config.heads, mask=table.layout.attention_mask).data[0]


def test_block_mask_isolates_classes():
    w = init_weights(TINY, seed=3)
    table = init_embedding_table(2, 2, 8, seed=1, sigma=1.0)
    base = _text_self_attention(table, w)
    zeroed = table.copy()
    zeroed.W.data[table.layout.token_slice(1)] = 0.0
    after = _text_self_attention(zeroed, w)
    rows = table.layout.token_slice(0)
    assert np.array_equal(base[rows], after[rows])
    assert not np.allclose(base[table.layout.token_slice(1)], after[table.layout.token_slice(1)])


def test_attention_weights_respect_block_mask():
    w = init_weights(TINY, seed=4)
    table = init_embedding_table(2, 2, 8, seed=2, sigma=1.0)
    trace = {}
    forward(np.random.default_rng(3).random((16, 16, 3)), table, w, trace=trace)
    attn = trace["enh0.txt_self"]  # (B, heads, N_T, N_T)
    cls = table.layout.token_class
    for a in range(2):
        for b in range(2):
            if a != b:
                assert np.all(attn[:, :, cls == a][:, :, :, cls == b] < 1e-300)


# -- query selection -------------------------------------------------------------
def test_select_queries_examples():
    lay = TokenLayout(1, 1)
    txt = np.array([[[0.0], [1.0], [0.0]]])  # dummy, class token, dummy
    img = np.array([[[0.2], [0.9], [0.5]]])
    assert sorted(select_queries(img, txt, 2, lay)[0].tolist()) == [1, 2]
    assert select_queries(np.ones((1, 5, 1)), txt, 3, lay)[0].tolist() == [0, 1, 2]
    with pytest.raises(ContractError):
        select_queries(img, txt, 4, lay)


def test_select_queries_against_sort_and_scaling():
    rng = np.random.default_rng(5)
    lay = TokenLayout(3, 2)
    for _ in range(30):
        img, txt = rng.normal(size=(2, 20, 6)), rng.normal(size=(2, lay.num_tokens, 6))
        idx = select_queries(img, txt, 7, lay)
        scores = np.einsum("bpd,btd->bpt", img, txt)[..., lay.class_token_mask].max(-1)
        for b in range(2):
            ref = sorted(range(20), key=lambda p: (-scores[b, p], p))[:7]
            assert idx[b].tolist() == ref
        assert np.array_equal(select_queries(img, txt * 3.7, 7, lay), idx)


# -- decoder ---------------------------------------------------------------------
def test_decode_shape_and_symmetry():
    w = init_weights(TINY, seed=6)
    rng = np.random.default_rng(6)
    q = np.tile(rng.normal(size=(1, 1, 8)), (1, 3, 1))
    out = decode(ad.tensor(q), ad.tensor(rng.normal(size=(1, 4, 8))), ad.tensor(rng.normal(size=(1, 6, 8))), w)
    assert out.shape == (1, 3, 8)
    assert np.allclose(out.data[0, 0], out.data[0, 1], atol=0) and np.allclose(out.data[0, 0], out.data[0, 2], atol=0)


def test_decode_gradient_wrt_text_features():
    w = init_weights(TINY, seed=7).freeze()
    rng = np.random.default_rng(7)
    q, img = ad.tensor(rng.normal(size=(1, 3, 8))), ad.tensor(rng.normal(size=(1, 4, 8)))
    proj = rng.normal(size=(1, 3, 8))
    assert ad.grad_check(lambda t: (decode(q, img, t, w) * proj).sum(), rng.normal(size=(1, 6, 8))) < 1e-4


# -- forward ---------------------------------------------------------------------
def test_forward_shapes_and_ranges(default_weights):
    table = init_embedding_table(2, 4, 64, seed=0)
    out = forward(np.random.default_rng(8).random((64, 64, 3)), table, default_weights)
    assert out.probs.shape == (1, 16, 10)
    assert np.all((out.probs.data > 0) & (out.probs.data < 1))
    assert np.all((out.boxes.data >= 0) & (out.boxes.data <= 1))
    assert out.query_indices.shape == (1, 16)


def test_forward_is_deterministic_and_sensitive(default_weights):
    img = np.random.default_rng(9).random((2, 64, 64, 3))
    table = init_embedding_table(2, 4, 64, seed=1)
    a = forward(img, table, default_weights)
    b = forward(img, table, default_weights)
    assert np.array_equal(a.probs.data, b.probs.data) and np.array_equal(a.boxes.data, b.boxes.data)
    bumped = table.copy()
    bumped.W.data[2] += 0.05
    c = forward(img, bumped, default_weights)
    assert np.abs(c.probs.data - a.probs.data).max() > 0


def test_frozen_weights_receive_no_gradient():
    w = init_weights(TINY, seed=10).freeze()
    table = init_embedding_table(2, 2, 8, seed=3)
    out = forward(np.random.default_rng(10).random((16, 16, 3)), table, w)
    grads = ad.backward(out.probs.sum() + out.boxes.sum())
    assert list(grads) == [table.W]
    assert all(t.grad is None for t in w.params.values())


def test_end_to_end_table_gradient():
    """The keystone oracle: d total_loss / d table against central differences."""
    w = init_weights(TINY, seed=11).freeze()
    table = init_embedding_table(2, 2, 8, seed=4, sigma=0.5)
    img = np.random.default_rng(11).random((16, 16, 3))
    gts = np.array([[0.3, 0.3, 0.3, 0.2], [0.7, 0.6, 0.2, 0.4]])
    classes = np.array([0, 1])
    with ad.no_grad():
        out = forward(img, table, w)
    a = hungarian(build_cost_matrix(out.probs.data[0], out.boxes.data[0], gts, classes, table.layout))

    def loss(W):
        t = type(table)(W, table.layout)
        o = forward(img, t, w)
        return total_loss(o.probs[0], o.boxes[0], gts, classes, a, table.layout).total

    assert ad.grad_check(loss, table.W.data) < 1e-4


# -- detections ------------------------------------------------------------------
def test_extract_detections_examples():
    lay = TokenLayout(2, 4)
    probs = np.full((1, 10), 0.05)
    probs[0, 1:5] = [0.9, 0.2, 0.1, 0.1]
    dets = extract_detections(probs, np.full((1, 4), 0.5), lay)
    assert len(dets) == 1 and dets[0][0] == 0 and dets[0][1] == 0.9
    assert extract_detections(np.full((3, 10), 0.2), np.full((3, 4), 0.5), lay, score_thr=0.25) == []


def test_extract_detections_top_k_against_sort():
    rng = np.random.default_rng(12)
    lay = TokenLayout(3, 2)
    probs = rng.random((300, lay.num_tokens))
    boxes = rng.random((300, 4))
    dets = extract_detections(probs, boxes, lay, max_dets=100)
    scores = np.stack([probs[:, lay.token_slice(c)].max(1) for c in range(3)], 1)
    best = scores.max(1)
    ref = sorted(range(300), key=lambda i: (-best[i], i))[:100]
    assert [d[1] for d in dets] == [best[i] for i in ref]
    assert all(np.array_equal(d[2], boxes[i]) for d, i in zip(dets, ref))
    # dummies never count
    probs[:, 0] = probs[:, -1] = 1.0
    assert max(d[1] for d in extract_detections(probs, boxes, lay)) < 1.0
