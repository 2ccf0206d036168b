"""Toy touch-line transformer.

Visual grid patches and utterance tokens are embedded, concatenated and run
through a pre-norm transformer encoder. A decoder over learnable object and
gesture queries reads the fused memory; small heads then predict boxes,
token-span distributions, gesture keypoint pairs and is-a-line logits.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scenes import MAX_TEXT_LEN, NUM_CHANNELS, VOCAB


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    n_object_queries: int = 15
    n_gesture_queries: int = 5
    max_text_len: int = MAX_TEXT_LEN
    vocab_size: int = len(VOCAB)
    grid_size: int = 16
    in_channels: int = NUM_CHANNELS
    patch: int = 2
    contrastive_dim: int = 32
    # width of the Gaussian prior tying object queries to their anchors; 0 disables it
    anchor_sigma: float = 0.1
    # heads that carry the prior; the rest attend freely (0 means all heads)
    anchor_heads: int = 0
    point_input: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.grid_size % self.patch:
            raise ValueError("grid_size must be divisible by patch")
        if not 0 <= self.anchor_heads <= self.n_heads:
            raise ValueError("anchor_heads must lie in [0, n_heads]")

    @property
    def n_visual(self) -> int:
        return (self.grid_size // self.patch) ** 2

    @property
    def n_queries(self) -> int:
        return self.n_object_queries + self.n_gesture_queries


@dataclass
class Predictions:
    boxes: Tensor            # (B, Qo, 4) cx, cy, w, h in (0, 1)
    token_logits: Tensor     # (B, Qo, M + 1), last slot = no object
    gesture_pairs: Tensor    # (B, Qg, 4) proximal xy, distal xy in (0, 1)
    gesture_logits: Tensor   # (B, Qg, 2), column 1 = is-a-line
    query_embed: Tensor      # (B, Qo, Dc) unit-norm, for the contrastive loss
    text_embed: Tensor       # (B, M, Dc) unit-norm

    @property
    def token_dists(self) -> np.ndarray:
        return ad._softmax(self.token_logits.data, -1)

    def __len__(self):
        return self.boxes.shape[0]


# ---------------------------------------------------------------------------
# parameters

POINT_SCALE = 4.0
# keeps sparse patch content from being drowned by position at init
POS_INIT_SCALE = 0.1


def _sine_2d(n: int, d: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table for an n x n grid, used to seed the learned one."""
    quarter = d // 4
    freqs = 1.0 / (10.0 ** (np.arange(quarter) / max(quarter - 1, 1)))
    pos = (np.arange(n) + 0.5) / n * 2 * math.pi
    yy, xx = np.meshgrid(pos, pos, indexing="ij")
    parts = []
    for coord in (xx.reshape(-1), yy.reshape(-1)):
        ang = coord[:, None] / freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    out = np.concatenate(parts, axis=1)
    return np.pad(out, ((0, 0), (0, d - out.shape[1])))


def anchor_points(n: int) -> np.ndarray:
    """(n, 2) lattice of reference points, rows of equal length, row-major."""
    rows = max(1, int(math.floor(math.sqrt(n * 0.6))))
    cols = int(math.ceil(n / rows))
    xs = (np.arange(cols) + 0.5) / cols
    ys = (np.arange(rows) + 0.5) / rows
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)[:n]


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    d, f = cfg.d_model, cfg.ffn_dim

    def linear(name, fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        p[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        p[f"{name}.b"] = np.zeros(fan_out)

    def norm(name):
        p[f"{name}.g"] = np.ones(d)
        p[f"{name}.b"] = np.zeros(d)

    def block(prefix, cross):
        norm(f"{prefix}.ln1")
        linear(f"{prefix}.self.qkv", d, 3 * d)
        linear(f"{prefix}.self.out", d, d)
        if cross:
            norm(f"{prefix}.ln_x")
            linear(f"{prefix}.cross.q", d, d)
            linear(f"{prefix}.cross.kv", d, 2 * d)
            linear(f"{prefix}.cross.out", d, d)
        norm(f"{prefix}.ln2")
        linear(f"{prefix}.ff1", d, f)
        linear(f"{prefix}.ff2", f, d)

    linear("visual_proj", cfg.patch ** 2 * cfg.in_channels, d)
    p["visual_pos"] = POS_INIT_SCALE * _sine_2d(cfg.grid_size // cfg.patch, d)
    p["text_embed"] = rng.uniform(-1.0, 1.0, size=(cfg.vocab_size, d))
    p["text_pos"] = rng.uniform(-0.5, 0.5, size=(cfg.max_text_len, d))
    for i in range(cfg.enc_layers):
        block(f"enc{i}", cross=False)
    norm("enc_norm")
    p["queries"] = rng.uniform(-1.0, 1.0, size=(cfg.n_queries, d))
    for i in range(cfg.dec_layers):
        block(f"dec{i}", cross=True)
    norm("dec_norm")
    for head, out in (("box", 4), ("kp", 4)):
        linear(f"{head}.0", d + (2 if head == "box" and cfg.point_input else 0), d)
        linear(f"{head}.1", d, d)
        linear(f"{head}.2", d, out)
    # per-query center offsets in logit space; part of the box head
    a = anchor_points(cfg.n_object_queries)
    p["box.anchor"] = np.log(a / (1 - a))
    linear("token_head", d, cfg.max_text_len + 1)
    linear("gesture_head", d, 2)
    linear("align_query", d, cfg.contrastive_dim)
    linear("align_text", d, cfg.contrastive_dim)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


# ---------------------------------------------------------------------------
# forward

def patchify(grids: np.ndarray, patch: int) -> np.ndarray:
    """(B, G, G, C) -> (B, (G/patch)^2, patch*patch*C), row-major over patches."""
    b, g, _, c = grids.shape
    n = g // patch
    x = grids.reshape(b, n, patch, n, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, n * n, patch * patch * c)


def _linear(P, name, x):
    return ad.add(ad.matmul(x, P[f"{name}.w"]), P[f"{name}.b"])


def _ln(P, name, x):
    return ad.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, n_heads: int, with_weights: bool = False, bias=None):
    qh, kh, vh = _heads(q, n_heads), _heads(k, n_heads), _heads(v, n_heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    logits = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), scale)
    if bias is not None:
        logits = ad.add(logits, ad.expand(bias, logits.shape[:1]))
    att = ad.softmax(logits, axis=-1)
    out = _merge(ad.matmul(att, vh))
    return (out, att) if with_weights else out


def _self_attention(P, prefix, x, n_heads):
    d = x.shape[-1]
    qkv = _linear(P, f"{prefix}.qkv", x)
    q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
    return _linear(P, f"{prefix}.out", _attend(q, k, v, n_heads))


def _cross_attention(P, prefix, x, memory, n_heads, with_weights=False, bias=None):
    d = x.shape[-1]
    q = _linear(P, f"{prefix}.q", x)
    kv = _linear(P, f"{prefix}.kv", memory)
    out, att = _attend(q, kv[..., :d], kv[..., d:], n_heads, with_weights=True, bias=bias)
    out = _linear(P, f"{prefix}.out", out)
    return (out, att) if with_weights else out


def patch_centers(cfg) -> np.ndarray:
    """(n_visual, 2) normalized x, y centers of the visual tokens, in patchify order."""
    n = cfg.grid_size // cfg.patch
    c = (np.arange(n) + 0.5) / n
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)


def anchor_bias(cfg, anchor_logits: Tensor) -> Tensor | None:
    """(H, Q, n_visual + M) additive cross-attention prior.

    Object query q gets ``-|anchor_q - patch|^2 / (2 sigma^2)`` on visual
    tokens and 0 on text tokens; gesture queries are unconstrained. The prior is
    differentiable in the anchors, so they move with training.
    """
    if cfg.anchor_sigma <= 0:
        return None
    qo, nv = cfg.n_object_queries, cfg.n_visual
    a = ad.sigmoid(anchor_logits)                                # (Qo, 2)
    centers = patch_centers(cfg)
    d2 = None
    for c in range(2):
        diff = ad.sub(ad.expand_last(a[:, c:c + 1], nv), Tensor(centers[:, c]))
        d2 = ad.mul(diff, diff) if d2 is None else ad.add(d2, ad.mul(diff, diff))
    obj = ad.concat([ad.mul(d2, -1.0 / (2 * cfg.anchor_sigma ** 2)),
                     Tensor(np.zeros((qo, cfg.max_text_len)))], axis=1)
    full = ad.concat([obj, Tensor(np.zeros((cfg.n_gesture_queries, nv + cfg.max_text_len)))], axis=0)
    h = cfg.anchor_heads or cfg.n_heads
    per_head = [ad.reshape(full, (1,) + full.shape)] * h
    if h < cfg.n_heads:
        per_head.append(Tensor(np.zeros((cfg.n_heads - h,) + full.shape)))
    return ad.concat(per_head, axis=0)                           # (H, Q, T)


def _attention_point(att: Tensor, cfg) -> Tensor:
    """Head-averaged, visually renormalized attention centroid per query, centered on 0."""
    nv = cfg.n_visual
    a = ad.mean(att[:, :, :, :nv], axis=1)                       # (B, Q, nv)
    mass = ad.sum_(a, axis=-1, keepdims=True)
    pt = ad.matmul(a, Tensor(patch_centers(cfg)))                # (B, Q, 2)
    pt = ad.mul(pt, ad.expand_last(ad.reciprocal(mass), 2))
    return ad.mul(ad.add(pt, -0.5), POINT_SCALE)


def _ffn(P, prefix, x):
    return _linear(P, f"{prefix}.ff2", ad.relu(_linear(P, f"{prefix}.ff1", x)))


def _mlp(P, name, x):
    x = ad.relu(_linear(P, f"{name}.0", x))
    x = ad.relu(_linear(P, f"{name}.1", x))
    return _linear(P, f"{name}.2", x)


def _l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    n = ad.sqrt(ad.add(ad.sum_(ad.mul(x, x), axis=-1, keepdims=True), eps))
    return ad.mul(x, ad.expand_last(ad.reciprocal(n), x.shape[-1]))


def forward(P: dict[str, Tensor], cfg: ModelConfig, grids: np.ndarray, tokens: np.ndarray) -> Predictions:
    """Run the model on a batch.

    ``grids`` is (B, G, G, C) from :func:`touchline.scenes.rasterize` and
    ``tokens`` is (B, M) padded token ids.
    """
    grids = np.asarray(grids, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    if grids.ndim != 4 or grids.shape[1:] != (cfg.grid_size, cfg.grid_size, cfg.in_channels):
        raise ad.ShapeMismatch(f"visual grid {grids.shape} does not match config")
    if tokens.ndim != 2 or tokens.shape[1] > cfg.max_text_len or tokens.shape[0] != grids.shape[0]:
        raise ad.ShapeMismatch(f"text tokens {tokens.shape} do not match config/batch")
    if tokens.shape[1] < cfg.max_text_len:
        tokens = np.pad(tokens, ((0, 0), (0, cfg.max_text_len - tokens.shape[1])))
    b, h = grids.shape[0], cfg.n_heads

    vis = _linear(P, "visual_proj", Tensor(patchify(grids, cfg.patch)))
    vis = ad.add(vis, ad.expand(P["visual_pos"], (b,)))
    txt = ad.add(ad.embedding(P["text_embed"], tokens), ad.expand(P["text_pos"], (b,)))
    x = ad.concat([vis, txt], axis=1)
    for i in range(cfg.enc_layers):
        x = ad.add(x, _self_attention(P, f"enc{i}.self", _ln(P, f"enc{i}.ln1", x), h))
        x = ad.add(x, _ffn(P, f"enc{i}", _ln(P, f"enc{i}.ln2", x)))
    memory = _ln(P, "enc_norm", x)

    y = ad.expand(P["queries"], (b,))
    prior = anchor_bias(cfg, P["box.anchor"])
    for i in range(cfg.dec_layers):
        y = ad.add(y, _self_attention(P, f"dec{i}.self", _ln(P, f"dec{i}.ln1", y), h))
        upd, att = _cross_attention(P, f"dec{i}.cross", _ln(P, f"dec{i}.ln_x", y), memory, h, True, prior)
        y = ad.add(y, upd)
        y = ad.add(y, _ffn(P, f"dec{i}", _ln(P, f"dec{i}.ln2", y)))
    y = _ln(P, "dec_norm", y)

    qo = cfg.n_object_queries
    obj, ges = y[:, :qo], y[:, qo:]
    text_mem = memory[:, cfg.n_visual:]
    box_in = obj
    if cfg.point_input:
        # the box MLP also sees where its query looked in the last cross-attention
        box_in = ad.concat([obj, _attention_point(att[:, :, :qo], cfg)], axis=-1)
    offset = ad.concat([P["box.anchor"], Tensor(np.zeros((qo, 2)))], axis=1)
    return Predictions(
        boxes=ad.sigmoid(ad.add(_mlp(P, "box", box_in), ad.expand(offset, (b,)))),
        token_logits=_linear(P, "token_head", obj),
        gesture_pairs=ad.sigmoid(_mlp(P, "kp", ges)),
        gesture_logits=_linear(P, "gesture_head", ges),
        query_embed=_l2_normalize(_linear(P, "align_query", obj)),
        text_embed=_l2_normalize(_linear(P, "align_text", text_mem)),
    )


def select_best(token_dists: np.ndarray, boxes: np.ndarray, gesture_logits: np.ndarray,
                gesture_pairs: np.ndarray):
    """Pick the highest-scoring box and gesture pair for one scene.

    Box score is ``1 - p(no object)``; gesture score is the is-a-line softmax
    column. ``np.argmax`` keeps the lowest index on ties.
    """
    box_scores = 1.0 - token_dists[:, -1]
    gest_scores = ad._softmax(gesture_logits, -1)[:, 1]
    i, j = int(np.argmax(box_scores)), int(np.argmax(gest_scores))
    return boxes[i], gesture_pairs[j], i, j


def select_best_batch(pred: Predictions):
    """Vectorized :func:`select_best` over a batch; returns (boxes, pairs, box_idx, pair_idx)."""
    box_idx = np.argmax(1.0 - pred.token_dists[..., -1], axis=1)
    gest_idx = np.argmax(ad._softmax(pred.gesture_logits.data, -1)[..., 1], axis=1)
    ar = np.arange(len(pred))
    return pred.boxes.data[ar, box_idx], pred.gesture_pairs.data[ar, gest_idx], box_idx, gest_idx


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"TLCKPT01"


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, Tensor], meta: dict | None = None) -> None:
    names = sorted(params)
    entries, offset = [], 0
    for n in names:
        size = int(params[n].data.size)
        entries.append({"name": n, "shape": list(params[n].shape), "offset": offset, "count": size})
        offset += size
    header = json.dumps({"config": asdict(cfg), "params": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a touchline checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = np.frombuffer(fh.read(), dtype="<f8")
    cfg = ModelConfig(**header["config"])
    params = {}
    for e in header["params"]:
        arr = blob[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
        params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
    return cfg, params, header.get("meta", {})
