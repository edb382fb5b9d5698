"""Patch-conditioned detection transformer.

A small frozen convolutional backbone feeds a transformer encoder; object
queries, conditioned on pooled patch features and optionally restricted by a
block-diagonal attention mask, are decoded into per-query (class, box,
reconstruction) triples. The same network runs in two modes: patch
localization pretraining (2-way classification) and plain detection
fine-tuning (K real classes plus a no-object class).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import MASK_NEG, Tensor

MIN_BACKBONE_SIDE = 8  # three stride-2 stages need at least one output pixel

# Spotlight width multiplier per attention head, tight to wide. The tight
# head pins down a location; the wide ones average the surrounding region.
SPOTLIGHT_HEAD_SCALES = (2.0, 1.0, 0.5, 0.25)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 256
    num_queries: int = 16
    max_patches: int = 4
    c_backbone: int = 64
    k_classes: int = 3
    freeze_backbone: bool = True
    use_attention_mask: bool = True
    use_query_shuffle: bool = False
    use_reconstruction: bool = True
    aux_losses: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 4 != 0:
            raise ValueError("d_model must be divisible by 4 for 2-D positional encodings")
        if self.num_queries % self.max_patches != 0:
            raise ValueError("num_queries must be divisible by max_patches")
        if self.dec_layers < 1:
            raise ValueError("need at least one decoder layer")
        if min(self.enc_layers, self.ffn_dim, self.c_backbone, self.k_classes) < 0:
            raise ValueError("negative dimension in config")


@dataclass
class PredictionSet:
    class_logits: Tensor  # (N, K')
    boxes: Tensor  # (N, 4) in (0, 1) via sigmoid
    rec_features: Tensor  # (N, C_backbone)


@dataclass
class PretrainForward:
    preds: list  # PredictionSet per decoder layer, last entry is final
    patch_features: np.ndarray  # (M, C_backbone), detached targets
    permutation: np.ndarray  # (N,) query embedding shuffle
    groups: np.ndarray  # (N,) group index of each query position


def build_attention_mask(n, m):
    """Block-diagonal self-attention mask: 0 within a group, MASK_NEG across."""
    if m < 1 or n % m != 0:
        raise ValueError(f"group count {m} must divide query count {n}")
    group = group_of_query(n, m)
    mask = np.where(group[:, None] == group[None, :], 0.0, MASK_NEG)
    return mask


def group_of_query(n, m):
    """Group index of each query position: contiguous runs of n/m."""
    return np.repeat(np.arange(m), n // m)


def shuffle_queries(n, seed, enabled):
    """Permutation of embedding indices; identity when shuffling is off."""
    if not enabled:
        return np.arange(n)
    return np.random.default_rng(seed).permutation(n)


def assign_groups(query_embeds, patch_feats, permutation):
    """Decoder input i = query_embed[pi(i)] + patch_feats[group(i)].

    Group structure is positional; the permutation only changes which learned
    embedding serves which position.
    """
    n = query_embeds.data.shape[0]
    m = patch_feats.data.shape[0]
    if n % m != 0:
        raise ValueError(f"group count {m} must divide query count {n}")
    permuted = T.embedding_lookup(query_embeds, permutation)
    spread = T.embedding_lookup(patch_feats, group_of_query(n, m))
    return T.add(permuted, spread)


def _axis_encoding(length, dim):
    # Positions are cell centers normalized to [0, 2pi], so the encoding of
    # "one third across the image" is the same vector at every feature-map
    # size the resize policy can produce.
    pos = 2.0 * np.pi * (np.arange(length, dtype=np.float64)[:, None] + 0.5) / length
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / (10000.0 ** (2.0 * i / dim))
    enc = np.empty((length, dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc


_PE_CACHE = {}


def pe_2d(h, w, d_model):
    """Fixed 2-D sine positional encoding, one half per spatial axis."""
    key = (h, w, d_model)
    hit = _PE_CACHE.get(key)
    if hit is not None:
        return hit
    half = d_model // 2
    ey = _axis_encoding(h, half)
    ex = _axis_encoding(w, half)
    grid = np.concatenate([
        np.repeat(ey[:, None, :], w, axis=1),
        np.repeat(ex[None, :, :], h, axis=0),
    ], axis=-1)
    out = grid.reshape(h * w, d_model)
    _PE_CACHE[key] = out
    return out


_IM2COL_CACHE = {}


def _im2col_indices(c, hp, wp, k, stride):
    key = (c, hp, wp, k, stride)
    hit = _IM2COL_CACHE.get(key)
    if hit is not None:
        return hit
    out_h = (hp - k) // stride + 1
    out_w = (wp - k) // stride + 1
    ys = stride * np.arange(out_h)[:, None] + np.arange(k)[None, :]
    xs = stride * np.arange(out_w)[:, None] + np.arange(k)[None, :]
    grid = ys[:, None, :, None] * wp + xs[None, :, None, :]  # (oh, ow, k, k)
    chan = (np.arange(c) * hp * wp)[None, None, :, None, None]
    idx = (grid[:, :, None, :, :] + chan).reshape(out_h * out_w, c * k * k)
    _IM2COL_CACHE[key] = (idx, out_h, out_w)
    return idx, out_h, out_w


def conv2d(x, weight, bias, stride=2, pad=1, kernel=3):
    """3x3 strided convolution via im2col; x is (C_in, H, W)."""
    c_in, h, w = x.data.shape
    xp = T.pad2d(x, pad)
    hp, wp = h + 2 * pad, w + 2 * pad
    idx, out_h, out_w = _im2col_indices(c_in, hp, wp, kernel, stride)
    cols = T.getitem(T.reshape(xp, (c_in * hp * wp,)), idx)
    y = T.linear(cols, weight, bias)  # (out_h*out_w, C_out)
    return T.reshape(T.transpose(y), (weight.data.shape[1], out_h, out_w))


def image_to_tensor(image):
    """uint8 (H, W, 3) raster to a constant (3, H, W) tensor in [-1, 1]."""
    x = image.astype(np.float64) / 255.0
    return Tensor(np.transpose((x - 0.5) / 0.5, (2, 0, 1)))


class Model:
    """Weights plus forward passes; parameters live in a flat named table."""

    def __init__(self, config, seed=0):
        self.config = config
        self.params = {}
        rng = np.random.default_rng(seed)
        c = config.c_backbone
        stages = [(3, max(c // 4, 4)), (max(c // 4, 4), max(c // 2, 4)),
                  (max(c // 2, 4), c)]
        self._backbone_stages = stages
        for i, (cin, cout) in enumerate(stages):
            self._linear_param(rng, f"backbone.stage{i}", cin * 9, cout)
        self._linear_param(rng, "input_proj", c, config.d_model)
        self._param("query_embed",
                    rng.normal(size=(config.num_queries, config.d_model)))
        # Each query gets a spatial anchor for its cross-attention prior.
        # Within every query group the anchors tile the image on a square
        # grid, so any patch location starts near some query's spotlight.
        group = config.num_queries // config.max_patches
        side = int(np.ceil(np.sqrt(group)))
        within = np.arange(config.num_queries) % group
        self._param("anchor.x", (within % side + 0.5) / side)
        self._param("anchor.y", (within // side + 0.5) / side)
        self._param("anchor.w", np.full(config.num_queries, 2.2))
        self._param("anchor.gamma", np.array(6.0))
        for i in range(config.enc_layers):
            self._attention_params(rng, f"enc{i}.attn")
            self._ln_param(f"enc{i}.ln1")
            self._ffn_params(rng, f"enc{i}.ffn")
            self._ln_param(f"enc{i}.ln2")
        for i in range(config.dec_layers):
            self._attention_params(rng, f"dec{i}.self")
            self._ln_param(f"dec{i}.ln1")
            self._attention_params(rng, f"dec{i}.cross")
            self._ln_param(f"dec{i}.ln2")
            self._ffn_params(rng, f"dec{i}.ffn")
            self._ln_param(f"dec{i}.ln3")
        d = config.d_model
        self._linear_param(rng, "head.cls_pretext", d, 2)
        self._linear_param(rng, "head.cls_detect", d, config.k_classes + 1)
        self._linear_param(rng, "head.box1", d, d)
        self._linear_param(rng, "head.box2", d, d)
        self._linear_param(rng, "head.box3", d, 4)
        self._linear_param(rng, "head.rec", d, c)
        self.set_backbone_frozen(config.freeze_backbone)

    # -- parameter table ----------------------------------------------------

    def _param(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True)

    def _linear_param(self, rng, name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        self._param(f"{name}.w", rng.uniform(-bound, bound, (fan_in, fan_out)))
        self._param(f"{name}.b", np.zeros(fan_out))

    def _ln_param(self, name):
        d = self.config.d_model
        self._param(f"{name}.g", np.ones(d))
        self._param(f"{name}.b", np.zeros(d))

    def _attention_params(self, rng, name):
        d = self.config.d_model
        for piece in ("wq", "wk", "wv", "wo"):
            bound = 1.0 / np.sqrt(d)
            self._param(f"{name}.{piece}", rng.uniform(-bound, bound, (d, d)))
        for piece in ("bq", "bk", "bv", "bo"):
            self._param(f"{name}.{piece}", np.zeros(d))

    def _ffn_params(self, rng, name):
        self._linear_param(rng, f"{name}.lin1", self.config.d_model,
                           self.config.ffn_dim)
        self._linear_param(rng, f"{name}.lin2", self.config.ffn_dim,
                           self.config.d_model)

    def set_backbone_frozen(self, frozen):
        self.backbone_frozen = frozen
        for name, p in self.params.items():
            if name.startswith("backbone."):
                p.requires_grad = not frozen

    def parameters(self):
        return self.params

    def trainable_parameters(self):
        return {name: p for name, p in self.params.items()
                if not (self.backbone_frozen and name.startswith("backbone."))}

    # -- building blocks ----------------------------------------------------

    def backbone_forward(self, image):
        """Three stride-2 conv+relu stages: (H, W, 3) uint8 -> (C, H/8, W/8)."""
        h, w = image.shape[:2]
        if min(h, w) < MIN_BACKBONE_SIDE:
            raise ValueError(
                f"image {h}x{w} is below the backbone minimum of "
                f"{MIN_BACKBONE_SIDE} pixels per side")
        x = image_to_tensor(image)
        for i in range(3):
            x = T.relu(conv2d(x, self.params[f"backbone.stage{i}.w"],
                              self.params[f"backbone.stage{i}.b"]))
        return x

    def patch_feature(self, patch):
        return T.global_average_pool(self.backbone_forward(patch))

    def _attention(self, name, q_in, k_in, v_in, mask=None, prior=None):
        p = self.params
        d = self.config.d_model
        dh = d // self.config.n_heads
        q = T.linear(q_in, p[f"{name}.wq"], p[f"{name}.bq"])
        k = T.linear(k_in, p[f"{name}.wk"], p[f"{name}.bk"])
        v = T.linear(v_in, p[f"{name}.wv"], p[f"{name}.bv"])
        heads = []
        for i in range(self.config.n_heads):
            cols = (slice(None), slice(i * dh, (i + 1) * dh))
            qh, kh, vh = T.getitem(q, cols), T.getitem(k, cols), T.getitem(v, cols)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))
            if prior is not None:
                bias = prior[i] if isinstance(prior, (list, tuple)) else prior
                scores = T.add(scores, bias)
            attn = T.softmax_masked(scores, mask)
            heads.append(T.matmul(attn, vh))
        merged = T.concat(heads, axis=-1)
        return T.linear(merged, p[f"{name}.wo"], p[f"{name}.bo"])

    def _cross_prior(self, fh, fw, content_sim=None):
        """Per-head, per-query attention priors over the (fh, fw) cell grid.

        Query q's cross-attention logits get -(w(q)*s)^2 * dist^2 to its
        anchor, a spotlight that breaks the query symmetry from the first
        step: each query starts looking at its own region instead of
        everywhere, which is what lets the matcher settle and the box head
        learn a positional readout. The per-head scale s spreads the heads
        from tight to wide, so one head reads a precise location while
        another averages the surrounding region; a wide read is what makes
        object extent visible to the box head. With content_sim set (N x HW
        patch-to-cell similarities), every head also gets the gamma-scaled
        pointer toward cells that look like the query's patch. Anchors,
        widths and gamma are ordinary trainable parameters.
        """
        n = self.config.num_queries
        ys = (np.arange(fh) + 0.5) / fh
        xs = (np.arange(fw) + 0.5) / fw
        cell_x = Tensor(np.tile(xs, fh)[None, :])
        cell_y = Tensor(np.repeat(ys, fw)[None, :])
        ax = T.reshape(self.params["anchor.x"], (n, 1))
        ay = T.reshape(self.params["anchor.y"], (n, 1))
        w = T.reshape(self.params["anchor.w"], (n, 1))
        dx = T.sub(cell_x, ax)
        dy = T.sub(cell_y, ay)
        dist2 = T.add(T.mul(dx, dx), T.mul(dy, dy))
        pointer = None
        if content_sim is not None:
            pointer = T.mul(self.params["anchor.gamma"], content_sim)
        priors = []
        for i in range(self.config.n_heads):
            s = SPOTLIGHT_HEAD_SCALES[min(i, len(SPOTLIGHT_HEAD_SCALES) - 1)]
            ws = T.scale(w, s)
            head_prior = T.neg(T.mul(T.mul(ws, ws), dist2))
            if pointer is not None:
                head_prior = T.add(head_prior, pointer)
            priors.append(head_prior)
        return priors

    def _ln(self, name, x):
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _ffn(self, name, x):
        p = self.params
        hidden = T.relu(T.linear(x, p[f"{name}.lin1.w"], p[f"{name}.lin1.b"]))
        return T.linear(hidden, p[f"{name}.lin2.w"], p[f"{name}.lin2.b"])

    def encode_tokens(self, tokens, pe=None):
        """Post-norm self-attention stack over (L, d_model) tokens.

        When pe is given it is re-added to the attention queries and keys
        at every layer, so position stays addressable at depth instead of
        having to survive the residual stream alone.
        """
        x = tokens
        for i in range(self.config.enc_layers):
            qk = x if pe is None else T.add(x, pe)
            x = self._ln(f"enc{i}.ln1",
                         T.add(x, self._attention(f"enc{i}.attn", qk, qk, x)))
            x = self._ln(f"enc{i}.ln2", T.add(x, self._ffn(f"enc{i}.ffn", x)))
        return x

    def encode(self, feature_map):
        """Project (C, H, W) features to tokens, add 2-D sine PE, encode."""
        c, h, w = feature_map.data.shape
        flat = T.transpose(T.reshape(feature_map, (c, h * w)))
        proj = T.linear(flat, self.params["input_proj.w"], self.params["input_proj.b"])
        pe = Tensor(pe_2d(h, w, self.config.d_model))
        tokens = T.add(proj, pe)
        return self.encode_tokens(tokens, pe)

    def decode(self, memory, decoder_inputs, mask=None, memory_pe=None,
               grid_hw=None, content_sim=None):
        """Masked self-attention / cross-attention / FFN stack.

        The mask applies to decoder self-attention only; returns every
        layer's output so auxiliary losses can supervise each depth. The
        initial decoder inputs double as per-query conditioning: they are
        re-added to the self-attention queries/keys and the cross-attention
        queries at every layer, mirroring how memory_pe is re-added to the
        cross-attention keys. With grid_hw set, cross-attention logits carry
        the per-query anchor prior for that cell grid; content_sim (N x HW
        patch-to-cell similarities) adds the gamma-scaled content pointer.
        """
        x = decoder_inputs
        qpos = decoder_inputs
        prior = None
        if grid_hw is not None:
            prior = self._cross_prior(*grid_hw, content_sim=content_sim)
        outs = []
        for i in range(self.config.dec_layers):
            qk = T.add(x, qpos)
            x = self._ln(f"dec{i}.ln1",
                         T.add(x, self._attention(f"dec{i}.self", qk, qk, x, mask)))
            keys = memory if memory_pe is None else T.add(memory, memory_pe)
            x = self._ln(f"dec{i}.ln2",
                         T.add(x, self._attention(f"dec{i}.cross",
                                                  T.add(x, qpos), keys, memory,
                                                  prior=prior)))
            x = self._ln(f"dec{i}.ln3", T.add(x, self._ffn(f"dec{i}.ffn", x)))
            outs.append(x)
        return outs

    def heads(self, decoder_out, mode):
        """Per-query predictions: class logits, sigmoid boxes, reconstruction."""
        p = self.params
        cls_name = "head.cls_pretext" if mode == "pretext" else "head.cls_detect"
        logits = T.linear(decoder_out, p[f"{cls_name}.w"], p[f"{cls_name}.b"])
        h1 = T.relu(T.linear(decoder_out, p["head.box1.w"], p["head.box1.b"]))
        h2 = T.relu(T.linear(h1, p["head.box2.w"], p["head.box2.b"]))
        boxes = T.sigmoid(T.linear(h2, p["head.box3.w"], p["head.box3.b"]))
        rec = T.linear(decoder_out, p["head.rec.w"], p["head.rec.b"])
        return PredictionSet(class_logits=logits, boxes=boxes, rec_features=rec)

    # -- full passes ---------------------------------------------------------

    def forward_pretrain(self, sample):
        """Patch localization pass; predictions per decoder layer plus targets."""
        cfg = self.config
        m = len(sample.patches)
        n = cfg.num_queries
        if m > cfg.max_patches:
            raise ValueError(f"{m} patches exceed configured maximum {cfg.max_patches}")
        if n % m != 0:
            raise ValueError(f"group count {m} must divide query count {n}")
        feats = [self.patch_feature(p) for p in sample.patches]
        stacked = T.concat([T.reshape(f, (1, cfg.c_backbone)) for f in feats], axis=0)
        # Patches share the encoder's backbone-to-d_model projection, so patch
        # tokens and image tokens land in the same feature space.
        proj = T.linear(stacked, self.params["input_proj.w"], self.params["input_proj.b"])
        pi = shuffle_queries(n, sample.seed, cfg.use_query_shuffle)
        decoder_inputs = assign_groups(self.params["query_embed"], proj, pi)
        mask = build_attention_mask(n, m) if cfg.use_attention_mask else None
        fmap = self.backbone_forward(sample.image)
        memory = self.encode(fmap)
        fh, fw = fmap.data.shape[1], fmap.data.shape[2]
        pe = Tensor(pe_2d(fh, fw, cfg.d_model))
        # Content pointer: cosine similarity between each group's raw patch
        # feature and every raw feature-map cell. The backbone sees the crop
        # and its source cells alike, so the similarity row peaks where the
        # patch came from; fed to the decoder as a cross-attention prior it
        # hands every query a usable initial guess of where to look.
        cells = T.transpose(T.reshape(fmap, (cfg.c_backbone, fh * fw)))
        sim = T.matmul(T.l2_normalize(stacked),
                       T.transpose(T.l2_normalize(cells)))
        expand = np.zeros((n, m))
        expand[np.arange(n), group_of_query(n, m)] = 1.0
        outs = self.decode(memory, decoder_inputs, mask, memory_pe=pe,
                           grid_hw=(fh, fw),
                           content_sim=T.matmul(Tensor(expand), sim))
        return PretrainForward(
            preds=[self.heads(o, "pretext") for o in outs],
            patch_features=stacked.data.copy(),
            permutation=pi,
            groups=group_of_query(n, m),
        )

    def forward_detect(self, image):
        """Plain detection pass: no patch conditioning, no mask, no shuffle."""
        fmap = self.backbone_forward(image)
        memory = self.encode(fmap)
        fh, fw = fmap.data.shape[1], fmap.data.shape[2]
        pe = Tensor(pe_2d(fh, fw, self.config.d_model))
        outs = self.decode(memory, self.params["query_embed"], mask=None,
                           memory_pe=pe, grid_hw=(fh, fw))
        return [self.heads(o, "detect") for o in outs]


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, then (name, rank, dims, float64 payload)

CHECKPOINT_MAGIC = b"UPDT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params):
    """Write a parameter table; values may be Tensors or numpy arrays."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, value in params.items():
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(
                value.data if isinstance(value, Tensor) else value, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read a parameter table back as an ordered name -> float64 array dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            out[name] = arr.reshape(dims).copy()
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after parameter table")
    return out


def load_into_model(model, arrays):
    """Copy a loaded table into a model; names and shapes must match exactly."""
    have = set(model.params)
    got = set(arrays)
    if have != got:
        missing = sorted(have - got)
        extra = sorted(got - have)
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, arr in arrays.items():
        p = model.params[name]
        if p.data.shape != arr.shape:
            raise ValueError(
                f"checkpoint shape mismatch for {name}: "
                f"{arr.shape} vs {p.data.shape}")
        p.data = arr.astype(np.float64, copy=True)
