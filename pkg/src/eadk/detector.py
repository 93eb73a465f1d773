"""Toy open-vocabulary detector with a trainable text-embedding table.

Pipeline (all batched over images):

    patches -> encode_image -> enhance(image, text) -> select_queries
            -> decode -> (token probabilities, boxes)

The text branch has no encoder: a (C*T + 2) x D table of free vectors
stands in for prompt features.  Row 0 and the last row are start/end
dummies; class ``c`` owns rows ``1 + c*T ... c*T + T``.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .errors import ContractError

MASK_FILL = -1e9
# Variance floor of the table-row LayerNorm.  Rows far below unit variance
# (the small default init) pass almost linearly instead of being blown up to
# unit scale, so their gradients are not inflated by 1/std and the first
# AdamW steps cannot lock the table in place.
TEXT_NORM_EPS = 1.0


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    patch_size: int = 8
    patch_context: int = 4  # extra pixels each patch token sees on every side
    model_dim: int = 64
    enhancer_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    num_queries: int = 16
    ffn_dim: int = 128
    anchor_size: float = 0.2
    refine_boxes: bool = False  # every decoder layer refines the previous layer's box

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError("image_size must be divisible by patch_size")
        if self.model_dim % self.heads:
            raise ContractError("model_dim must be divisible by heads")
        if self.patch_context < 0:
            raise ContractError("patch_context must be >= 0")
        if self.num_queries > self.num_patches:
            raise ContractError("num_queries cannot exceed the number of patches")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid**2

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class TokenLayout:
    """Row bookkeeping for a table with ``num_classes`` blocks of ``tokens_per_class``."""

    num_classes: int
    tokens_per_class: int

    def __post_init__(self):
        if self.num_classes < 1 or self.tokens_per_class < 1:
            raise ContractError("need at least one class and one token per class")

    @property
    def num_tokens(self):
        return self.num_classes * self.tokens_per_class + 2

    def token_slice(self, c):
        if not 0 <= c < self.num_classes:
            raise ContractError(f"class index {c} outside layout with {self.num_classes} classes")
        start = 1 + c * self.tokens_per_class
        return slice(start, start + self.tokens_per_class)

    @property
    def token_class(self):
        """Class owning each row; -1 for the two dummies."""
        out = np.full(self.num_tokens, -1, dtype=np.intp)
        out[1:-1] = np.repeat(np.arange(self.num_classes), self.tokens_per_class)
        return out

    @property
    def class_token_mask(self):
        return self.token_class >= 0

    @property
    def position_ids(self):
        pos = np.zeros(self.num_tokens, dtype=np.intp)
        pos[1:-1] = np.tile(np.arange(self.tokens_per_class), self.num_classes)
        return pos

    @property
    def attention_mask(self):
        """Boolean (N_T, N_T): True where row token may attend to column token."""
        cls = self.token_class
        same = cls[:, None] == cls[None, :]
        dummy = cls < 0
        return np.where(dummy[:, None] | dummy[None, :], np.eye(self.num_tokens, dtype=bool), same)


class EmbeddingTable:
    """The trainable (C*T + 2) x D text-embedding matrix."""

    def __init__(self, W, layout):
        W = W if isinstance(W, ad.Tensor) else ad.Tensor(W, requires_grad=True)
        if W.shape[0] != layout.num_tokens:
            raise ContractError(f"table has {W.shape[0]} rows, layout needs {layout.num_tokens}")
        self.W = W
        self.layout = layout

    @property
    def num_classes(self):
        return self.layout.num_classes

    @property
    def tokens_per_class(self):
        return self.layout.tokens_per_class

    @property
    def dim(self):
        return self.W.shape[1]

    def copy(self):
        return EmbeddingTable(ad.Tensor(self.W.data.copy(), requires_grad=self.W.requires_grad), self.layout)


def init_embedding_table(num_classes, tokens_per_class, dim, seed=0, sigma=0.02):
    """Fresh table with rows drawn i.i.d. from Normal(0, sigma^2)."""
    layout = TokenLayout(num_classes, tokens_per_class)
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, sigma, size=(layout.num_tokens, dim))
    return EmbeddingTable(ad.Tensor(W, requires_grad=True, name="table"), layout)


# -- positional encodings --------------------------------------------
def sine_encoding(positions, dim, temperature=10000.0):
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = 1.0 / (temperature ** (np.arange(half) / half))
    ang = positions[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def image_position_encoding(grid, dim):
    """2-D sinusoidal encoding: half the channels for rows, half for columns."""
    ys, xs = np.divmod(np.arange(grid * grid), grid)
    # wavelengths from 2*pi patches up to a few times the grid width
    t = 4.0 * grid
    return np.concatenate([sine_encoding(ys, dim // 2, t), sine_encoding(xs, dim // 2, t)], axis=1)


def patch_anchors(config):
    """cxcywh anchor box centred on every patch."""
    g = config.grid
    ys, xs = np.divmod(np.arange(g * g), g)
    s = config.anchor_size
    return np.stack([(xs + 0.5) / g, (ys + 0.5) / g, np.full(g * g, s), np.full(g * g, s)], axis=1)


# -- weights -------------------------------------------------------------
def _attn_shapes(prefix, d):
    return [(f"{prefix}.{n}", s) for n, s in (("wq", (d, d)), ("bq", (d,)), ("wk", (d, d)), ("bk", (d,)),
                                              ("wv", (d, d)), ("bv", (d,)), ("wo", (d, d)), ("bo", (d,)))]


def _ffn_shapes(prefix, d, f):
    return [(f"{prefix}.w1", (d, f)), (f"{prefix}.b1", (f,)), (f"{prefix}.w2", (f, d)), (f"{prefix}.b2", (d,))]


def _norm_shapes(prefix, d):
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]


def parameter_shapes(config):
    d, f = config.model_dim, config.ffn_dim
    p = config.patch_size + 2 * config.patch_context
    shapes = [("patch.w", (p * p * 3, d)), ("patch.b", (d,))]
    shapes += _norm_shapes("text_in", d)
    for i in range(config.enhancer_layers):
        pre = f"enh{i}"
        for name in ("img_self", "txt_self", "img_cross", "txt_cross"):
            shapes += _attn_shapes(f"{pre}.{name}", d)
        shapes += _ffn_shapes(f"{pre}.img_ffn", d, f) + _ffn_shapes(f"{pre}.txt_ffn", d, f)
        for name in ("n_img1", "n_txt1", "n_img2", "n_txt2", "n_img3", "n_txt3"):
            shapes += _norm_shapes(f"{pre}.{name}", d)
    for i in range(config.decoder_layers):
        pre = f"dec{i}"
        for name in ("self", "img_cross", "txt_cross"):
            shapes += _attn_shapes(f"{pre}.{name}", d)
        shapes += _ffn_shapes(f"{pre}.ffn", d, f)
        for name in ("n1", "n2", "n3", "n4"):
            shapes += _norm_shapes(f"{pre}.{name}", d)
    shapes += [("box.w1", (d, d)), ("box.b1", (d,)), ("box.w2", (d, d)), ("box.b2", (d,)),
               ("box.w3", (d, 4)), ("box.b3", (4,))]
    return shapes


class DetectorWeights:
    """Named parameter tensors plus the architecture they belong to."""

    def __init__(self, config, params):
        self.config = config
        self.params = OrderedDict(params)
        expected = dict(parameter_shapes(config))
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ContractError(f"weights do not match config (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ContractError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        self._pos = image_position_encoding(config.grid, config.model_dim)
        self._anchor_logits = _logit(patch_anchors(config))

    def __getitem__(self, name):
        return self.params[name]

    @property
    def frozen(self):
        return not any(t.requires_grad for t in self.params.values())

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
        return self

    def unfreeze(self):
        for t in self.params.values():
            t.requires_grad = True
        return self

    def arrays(self):
        return OrderedDict((k, t.data) for k, t in self.params.items())

    def copy(self):
        return DetectorWeights(
            self.config,
            [(k, ad.Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)) for k, t in self.params.items()],
        )


def init_weights(config=None, seed=0):
    config = config or DetectorConfig()
    rng = np.random.default_rng(seed)
    # the two norms feeding the contrastive head start small so that
    # X_I X_T^T begins with unit-scale logits instead of ~sqrt(D)
    head_norms = {f"dec{i}.n4.gain" for i in range(config.decoder_layers)}
    head_norms.add(f"enh{config.enhancer_layers - 1}.n_txt3.gain")
    params = []
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[1]
        if name in head_norms:
            data = np.full(shape, config.model_dim**-0.25)
        elif leaf == "gain":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        elif name == "box.w3":
            data = np.zeros(shape)  # start every box at its anchor
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        params.append((name, ad.Tensor(data, requires_grad=True, name=name)))
    return DetectorWeights(config, params)


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


# -- building blocks -----------------------------------------------------
def _linear(x, w, b):
    return x @ w + b


def _norm(x, weights, prefix):
    return ad.layer_norm(x, weights[f"{prefix}.gain"], weights[f"{prefix}.bias"])


def _ffn(x, weights, prefix):
    h = ad.relu(_linear(x, weights[f"{prefix}.w1"], weights[f"{prefix}.b1"]))
    return _linear(h, weights[f"{prefix}.w2"], weights[f"{prefix}.b2"])


def attention(query, key, value, weights, prefix, heads, mask=None, trace=None):
    """Multi-head attention; ``mask`` is a boolean (Lq, Lk) of allowed pairs."""
    b, lq, d = query.shape
    lk = key.shape[1]
    dh = d // heads

    def split(x, n, w, bias):
        return _linear(x, weights[f"{prefix}.{w}"], weights[f"{prefix}.{bias}"]).reshape(b, n, heads, dh).transpose(
            0, 2, 1, 3
        )

    q = split(query, lq, "wq", "bq")
    k = split(key, lk, "wk", "bk")
    v = split(value, lk, "wv", "bv")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + np.where(mask, 0.0, MASK_FILL)
    attn = ad.softmax(scores, axis=-1)
    if trace is not None:
        trace[prefix] = attn.data
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, lq, d)
    return _linear(out, weights[f"{prefix}.wo"], weights[f"{prefix}.bo"])


# -- pipeline stages -------------------------------------------------------
def _as_batch(images, config):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    s = config.image_size
    if images.ndim != 4 or images.shape[1:] != (s, s, 3):
        raise ContractError(f"expected images of shape (H, W, 3) = ({s}, {s}, 3), got {images.shape[-3:]}")
    return images


def patchify(images, patch, context=0):
    """(B, H, W, 3) -> (B, P, (patch + 2 context)^2 * 3) windows at stride ``patch``.

    Windows reach ``context`` pixels past their cell; the border is zero padded.
    """
    b, h, w, _ = images.shape
    g_h, g_w = h // patch, w // patch
    if context:
        images = np.pad(images, ((0, 0), (context, context), (context, context), (0, 0)))
    k = patch + 2 * context
    win = np.lib.stride_tricks.sliding_window_view(images, (k, k), axis=(1, 2))[:, ::patch, ::patch]
    # win: (B, g_h, g_w, 3, k, k)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, g_h * g_w, k * k * 3)


def encode_image(images, weights):
    """Linear patch embedding plus fixed sinusoidal positions -> (B, P, D)."""
    images = _as_batch(images, weights.config)
    patches = patchify(images, weights.config.patch_size, weights.config.patch_context)
    return _linear(ad.Tensor(patches), weights["patch.w"], weights["patch.b"]) + weights._pos


def text_inputs(table, weights, batch):
    """Normalized table rows plus the sine code of each token's position id."""
    txt = ad.layer_norm(table.W, weights["text_in.gain"], weights["text_in.bias"], eps=TEXT_NORM_EPS)
    txt = txt + sine_encoding(table.layout.position_ids, weights.config.model_dim)
    return txt.reshape(1, *txt.shape) if batch == 1 else ad.concat([txt.reshape(1, *txt.shape)] * batch, axis=0)


def enhance(img_tokens, table, weights, trace=None):
    """Fuse image and text tokens; returns enhanced (image, text) features."""
    cfg = weights.config
    b = img_tokens.shape[0]
    layout = table.layout
    txt = text_inputs(table, weights, b)
    mask = layout.attention_mask
    img = img_tokens
    for i in range(cfg.enhancer_layers):
        pre = f"enh{i}"
        img_q = img + weights._pos
        img = _norm(img + attention(img_q, img_q, img, weights, f"{pre}.img_self", cfg.heads, trace=trace),
                    weights, f"{pre}.n_img1")
        txt = _norm(txt + attention(txt, txt, txt, weights, f"{pre}.txt_self", cfg.heads, mask=mask, trace=trace),
                    weights, f"{pre}.n_txt1")
        img_x = _norm(img + attention(img, txt, txt, weights, f"{pre}.img_cross", cfg.heads, trace=trace),
                      weights, f"{pre}.n_img2")
        txt_x = _norm(txt + attention(txt, img, img, weights, f"{pre}.txt_cross", cfg.heads, trace=trace),
                      weights, f"{pre}.n_txt2")
        img = _norm(img_x + _ffn(img_x, weights, f"{pre}.img_ffn"), weights, f"{pre}.n_img3")
        txt = _norm(txt_x + _ffn(txt_x, weights, f"{pre}.txt_ffn"), weights, f"{pre}.n_txt3")
    return img, txt


def query_scores(img_feats, text_feats, layout):
    """Per image token: max over class tokens of the feature dot product."""
    img = getattr(img_feats, "data", img_feats)
    txt = getattr(text_feats, "data", text_feats)
    sims = np.matmul(img, np.swapaxes(txt, -1, -2))[..., layout.class_token_mask]
    return sims.max(axis=-1)


def select_queries(img_feats, text_feats, num_queries, layout):
    """Indices (B, N_I) of the highest-scoring image tokens; ties keep the lower index."""
    scores = query_scores(img_feats, text_feats, layout)
    if scores.ndim == 1:
        scores = scores[None]
    if num_queries > scores.shape[-1]:
        raise ContractError(f"cannot select {num_queries} queries from {scores.shape[-1]} image tokens")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[:, :num_queries]


def decode(queries, img_feats, text_feats, weights, trace=None, query_pos=0.0, all_layers=False):
    """Refine query features against image and text memories -> (B, N_I, D).

    ``query_pos`` (B, N_I, D) is the position code of each query's source
    token; it is added to queries and image keys in the positional attentions.
    With ``all_layers`` the output of every layer is returned as a list.
    """
    cfg = weights.config
    q = queries
    img_k = img_feats + weights._pos
    outputs = []
    for i in range(cfg.decoder_layers):
        pre = f"dec{i}"
        qp = q + query_pos
        q = _norm(q + attention(qp, qp, q, weights, f"{pre}.self", cfg.heads, trace=trace), weights, f"{pre}.n1")
        q = _norm(q + attention(q + query_pos, img_k, img_feats, weights, f"{pre}.img_cross", cfg.heads, trace=trace),
                  weights, f"{pre}.n2")
        q = _norm(q + attention(q, text_feats, text_feats, weights, f"{pre}.txt_cross", cfg.heads, trace=trace),
                  weights, f"{pre}.n3")
        q = _norm(q + _ffn(q, weights, f"{pre}.ffn"), weights, f"{pre}.n4")
        outputs.append(q)
    return outputs if all_layers else q


def box_offsets(query_feats, weights):
    """The 3-layer box MLP; its output is an offset in logit space."""
    h = ad.relu(_linear(query_feats, weights["box.w1"], weights["box.b1"]))
    h = ad.relu(_linear(h, weights["box.w2"], weights["box.b2"]))
    return _linear(h, weights["box.w3"], weights["box.b3"])


def box_head(query_feats, anchor_logits, weights):
    return ad.sigmoid(box_offsets(query_feats, weights) + anchor_logits)


@dataclass
class DetectionOutput:
    probs: ad.Tensor  # (B, N_I, N_T), sigmoid of logits
    boxes: ad.Tensor  # (B, N_I, 4) cxcywh
    query_indices: np.ndarray  # (B, N_I)
    logits: ad.Tensor = None
    aux: list = field(default_factory=list)  # (logits, boxes) of earlier decoder layers

    def __len__(self):
        return self.probs.shape[0]


def forward(images, table, weights, trace=None):
    """Run the detector on a batch of images (or a single H x W x 3 image)."""
    cfg = weights.config
    if table.dim != cfg.model_dim:
        raise ContractError(f"table dim {table.dim} does not match model_dim {cfg.model_dim}")
    tokens = encode_image(images, weights)
    img, txt = enhance(tokens, table, weights, trace=trace)
    idx = select_queries(img, txt, cfg.num_queries, table.layout)
    queries = ad.take_along(img, idx[:, :, None], axis=1)
    layers = decode(queries, img, txt, weights, trace=trace, query_pos=weights._pos[idx], all_layers=True)
    txt_t = txt.transpose(0, 2, 1)
    ref = weights._anchor_logits[idx]
    aux = []
    for i, x in enumerate(layers):
        last = i == len(layers) - 1
        if not (last or cfg.refine_boxes):
            continue
        z = box_offsets(x, weights) + ref
        if not last:
            aux.append((x @ txt_t, ad.sigmoid(z)))
            ref = z.data  # refinement starts from the previous box without backpropagating into it
    logits = x @ txt_t
    return DetectionOutput(ad.sigmoid(logits), ad.sigmoid(z), idx, logits, aux)


def extract_detections(probs, boxes, layout, score_thr=0.0, max_dets=100):
    """Turn one image's outputs into ``(class, score, cxcywh box)`` triples.

    Class score is the max over that class's token probabilities; each query
    reports its best class if the score reaches ``score_thr``.
    """
    probs = np.asarray(getattr(probs, "data", probs), dtype=np.float64)
    boxes = np.asarray(getattr(boxes, "data", boxes), dtype=np.float64)
    class_scores = np.stack([probs[:, layout.token_slice(c)].max(axis=1) for c in range(layout.num_classes)], axis=1)
    best = class_scores.argmax(axis=1)
    score = class_scores[np.arange(len(best)), best]
    keep = np.flatnonzero(score >= score_thr)
    keep = keep[np.argsort(-score[keep], kind="stable")][:max_dets]
    return [(int(best[i]), float(score[i]), boxes[i].copy()) for i in keep]
