"""Tiny multimodal transformer over image patches and text tokens.

One shared pre-norm transformer processes a sequence laid out as
[prompt | image | segment_1 | ... | segment_M]. Image positions attend each
other bidirectionally; text is causal; segments (one local/BOS anchor plus a
response) are mutually isolated so grid predictions stay independent.

There are two forward paths that must agree numerically: a Tensor path used
for training (autograd) and a numpy path used for cached incremental decoding.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import Vocabulary
from .tensor import Tensor, trunc_normal

KIND_PROMPT, KIND_IMAGE, KIND_LOCAL, KIND_RESPONSE, KIND_PAD = 0, 1, 2, 3, 4

LN_EPS = 1e-5


class LengthExceeded(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (64, 64)
    patch: int = 8
    dim: int = 128
    layers: int = 4
    heads: int = 4
    vocab_size: int = 0          # filled from the Vocabulary when 0
    max_len: int = 512
    mask_tokens_side: int = 4    # N; masks use N^2 query tokens
    grid_side: int = 4           # K; multi-prediction tasks use K^2 grids
    max_prompt: int = 16
    max_segment: int = 48
    # what grid anchors interpolate from: "patch" = pre-transformer patch
    # embeddings, "encoded" = final-layer image hiddens (contextualized)
    anchor_source: str = "patch"

    def validate(self) -> None:
        h, w = self.image_size
        if h % self.patch or w % self.patch:
            raise ValueError("image size must be divisible by patch size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.mask_tokens_side not in (1, 2, 4, 5):
            raise ValueError("mask_tokens_side must be one of 1, 2, 4, 5")
        if self.anchor_source not in ("patch", "encoded"):
            raise ValueError("anchor_source must be 'patch' or 'encoded'")

    @property
    def patches_hw(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch, self.image_size[1] // self.patch)

    @property
    def n_patches(self) -> int:
        hp, wp = self.patches_hw
        return hp * wp

    def digest(self) -> str:
        payload = json.dumps(vars(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class GridSpec:
    """K x K lattice of local-prompt points (cell centers, pixel coords)."""

    k: int
    height: int
    width: int
    budget: int | None = None

    def __post_init__(self):
        if self.budget is None:
            self.budget = self.m
        if not 1 <= self.budget <= self.m:
            raise ValueError("budget must be in [1, K^2]")

    @property
    def m(self) -> int:
        return self.k * self.k

    def centers(self) -> np.ndarray:
        """(M, 2) array of (x, y) centers, row-major over the lattice."""
        xs = (np.arange(self.k) + 0.5) * self.width / self.k
        ys = (np.arange(self.k) + 0.5) * self.height / self.k
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


@dataclass
class Segment:
    """One isolated subsequence: an anchor plus its (teacher-forced) response.

    ``tokens`` are the target tokens including the final EOS; inputs at the
    segment's positions are [anchor, tokens[:-1]] and targets are tokens.
    The anchor is a grid-local embedding (grid_index >= 0) or a BOS token.
    """

    tokens: list[int]
    grid_index: int = -1

    def __len__(self) -> int:
        return len(self.tokens)  # anchor + len(tokens) - 1 inputs


@dataclass
class SequenceLayout:
    prompt: list[int]
    segments: list[Segment]
    kinds: np.ndarray = field(init=False)
    seg_ids: np.ndarray = field(init=False)
    n_image: int = 0

    def finalize(self, cfg: ModelConfig) -> "SequenceLayout":
        self.n_image = cfg.n_patches
        total = len(self.prompt) + self.n_image + sum(len(s) for s in self.segments)
        if total > cfg.max_len:
            raise LengthExceeded(f"sequence length {total} > max {cfg.max_len}")
        if len(self.prompt) > cfg.max_prompt:
            raise LengthExceeded("prompt too long")
        kinds = [KIND_PROMPT] * len(self.prompt) + [KIND_IMAGE] * self.n_image
        segs = [-1] * (len(self.prompt) + self.n_image)
        for i, seg in enumerate(self.segments):
            if len(seg) > cfg.max_segment:
                raise LengthExceeded("segment too long")
            kinds += [KIND_LOCAL] + [KIND_RESPONSE] * (len(seg) - 1)
            segs += [i] * len(seg)
        self.kinds = np.array(kinds, dtype=np.int8)
        self.seg_ids = np.array(segs, dtype=np.int32)
        return self

    @property
    def length(self) -> int:
        return len(self.kinds)

    def image_slice(self) -> slice:
        return slice(len(self.prompt), len(self.prompt) + self.n_image)


@dataclass
class AttentionMask:
    allowed: np.ndarray   # (T, T) bool
    kinds: np.ndarray     # (T,) position kind codes
    seg_ids: np.ndarray   # (T,) segment index, -1 outside segments

    def additive(self, dtype=np.float32) -> np.ndarray:
        return np.where(self.allowed, 0.0, T.MASK_NEG).astype(dtype)


def build_attention_mask(kinds: np.ndarray, seg_ids: np.ndarray) -> AttentionMask:
    """Causal base + bidirectional image block + cross-segment isolation."""
    n = len(kinds)
    qi = np.arange(n)[:, None]
    ki = np.arange(n)[None, :]
    allowed = qi >= ki
    is_img = kinds == KIND_IMAGE
    allowed |= is_img[:, None] & is_img[None, :]
    in_seg_q = (seg_ids >= 0)[:, None]
    in_seg_k = (seg_ids >= 0)[None, :]
    cross = in_seg_q & in_seg_k & (seg_ids[:, None] != seg_ids[None, :])
    allowed &= ~cross
    is_pad = kinds == KIND_PAD
    allowed &= ~is_pad[None, :]
    allowed &= ~is_pad[:, None]
    allowed |= np.eye(n, dtype=bool) & is_pad[:, None]
    return AttentionMask(allowed, kinds, seg_ids)


def layout_mask(layout: SequenceLayout) -> AttentionMask:
    return build_attention_mask(layout.kinds, layout.seg_ids)


# ---------------------------------------------------------------------------


@dataclass
class BatchForward:
    hidden: Tensor          # (B, T, d) final-layernormed hidden states
    layouts: list[SequenceLayout]

    def h_v(self, b: int, cfg: ModelConfig) -> Tensor:
        sl = self.layouts[b].image_slice()
        hp, wp = cfg.patches_hw
        return self.hidden[b, sl].reshape(hp, wp, -1)


class KvCache:
    """Per-layer key/value arrays for a committed prefix, batch-major."""

    def __init__(self, keys: list[np.ndarray], values: list[np.ndarray],
                 key_mask: np.ndarray):
        self.keys = keys          # each (B, heads, L, dh)
        self.values = values
        self.key_mask = key_mask  # (B, L) bool

    @property
    def batch(self) -> int:
        return self.key_mask.shape[0]

    @property
    def length(self) -> int:
        return self.key_mask.shape[1]

    def duplicate(self, m: int) -> "KvCache":
        return KvCache(
            [np.repeat(k, m, axis=0) for k in self.keys],
            [np.repeat(v, m, axis=0) for v in self.values],
            np.repeat(self.key_mask, m, axis=0),
        )

    def select(self, rows: list[int]) -> "KvCache":
        idx = np.asarray(rows)
        return KvCache([k[idx] for k in self.keys], [v[idx] for v in self.values],
                       self.key_mask[idx])

    def append(self, new_keys: list[np.ndarray], new_values: list[np.ndarray],
               valid: np.ndarray) -> None:
        self.keys = [np.concatenate([k, nk], axis=2)
                     for k, nk in zip(self.keys, new_keys)]
        self.values = [np.concatenate([v, nv], axis=2)
                       for v, nv in zip(self.values, new_values)]
        self.key_mask = np.concatenate([self.key_mask, valid[:, None]], axis=1)


@dataclass
class PrefixState:
    cache: KvCache
    h_v: np.ndarray        # (H_p, W_p, d) or batched (B, H_p, W_p, d)
    patch_tokens: np.ndarray  # (P, d) pre-transformer image tokens (w/ pos)
    prefix_len: int


class Model:
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0):
        cfg.validate()
        if cfg.vocab_size == 0:
            cfg.vocab_size = len(vocab)
        if cfg.vocab_size != len(vocab):
            raise ValueError("config vocab size disagrees with vocabulary")
        self.cfg = cfg
        self.vocab = vocab
        self.params: dict[str, Tensor] = {}
        self._init_params(seed)

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def _init_params(self, seed: int) -> None:
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        d = cfg.dim
        p3 = cfg.patch * cfg.patch * 3
        self._add("patch.w", trunc_normal(rng, (p3, d)))
        self._add("patch.b", np.zeros(d, dtype=np.float32))
        self._add("pos.image", trunc_normal(rng, (cfg.n_patches, d)))
        self._add("pos.prompt", trunc_normal(rng, (cfg.max_prompt, d)))
        self._add("pos.seg", trunc_normal(rng, (cfg.max_segment, d)))
        self._add("embed.tok", trunc_normal(rng, (cfg.vocab_size, d)))
        for i in range(cfg.layers):
            pre = f"blk{i}."
            self._add(pre + "ln1.w", np.ones(d, dtype=np.float32))
            self._add(pre + "ln1.b", np.zeros(d, dtype=np.float32))
            for nm in ("wq", "wk", "wv", "wo"):
                self._add(pre + "attn." + nm, trunc_normal(rng, (d, d)))
            for nm in ("bq", "bk", "bv", "bo"):
                self._add(pre + "attn." + nm, np.zeros(d, dtype=np.float32))
            self._add(pre + "ln2.w", np.ones(d, dtype=np.float32))
            self._add(pre + "ln2.b", np.zeros(d, dtype=np.float32))
            self._add(pre + "mlp.w1", trunc_normal(rng, (d, 4 * d)))
            self._add(pre + "mlp.b1", np.zeros(4 * d, dtype=np.float32))
            self._add(pre + "mlp.w2", trunc_normal(rng, (4 * d, d)))
            self._add(pre + "mlp.b2", np.zeros(d, dtype=np.float32))
        self._add("ln_f.w", np.ones(d, dtype=np.float32))
        self._add("ln_f.b", np.zeros(d, dtype=np.float32))
        self._add("head.w", trunc_normal(rng, (d, cfg.vocab_size)))
        self._add("head.b", np.zeros(cfg.vocab_size, dtype=np.float32))

    def save(self, path) -> None:
        save_checkpoint(path, {k: v.data for k, v in self.params.items()},
                        self.cfg.digest())

    @classmethod
    def load(cls, path, cfg: ModelConfig, vocab: Vocabulary,
             check_digest: bool = True) -> "Model":
        digest, tensors = load_checkpoint(path)
        model = cls(cfg, vocab)
        if check_digest and digest != cfg.digest():
            raise ValueError(
                f"checkpoint digest {digest} does not match config {cfg.digest()}")
        for k, p in model.params.items():
            if k not in tensors:
                raise ValueError(f"checkpoint missing parameter {k!r}")
            if tensors[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k!r}")
            p.data = tensors[k].astype(p.data.dtype)
        return model

    def to_dtype(self, dtype) -> "Model":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    # -- Tensor (training) path ----------------------------------------------

    def _ln(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc * (var + LN_EPS) ** -0.5 * w + b

    def patch_embed(self, images: np.ndarray) -> Tensor:
        """(B, H, W, 3) -> (B, P, d) patch tokens with 2-D positions added."""
        cfg = self.cfg
        images = np.asarray(images, dtype=self.params["patch.w"].dtype)
        if images.ndim == 3:
            images = images[None]
        h, w = cfg.image_size
        if images.shape[1:] != (h, w, 3):
            raise T.ShapeMismatch(f"expected {h}x{w}x3 image, got {images.shape[1:]}")
        p = cfg.patch
        hp, wp = cfg.patches_hw
        b = images.shape[0]
        patches = images.reshape(b, hp, p, wp, p, 3).transpose(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(b, hp * wp, p * p * 3)
        out = Tensor(patches) @ self.params["patch.w"] + self.params["patch.b"]
        return out + self.params["pos.image"]

    def interpolate_grid_features(self, patch_tokens: Tensor, grid: GridSpec,
                                  indices: np.ndarray | None = None) -> Tensor:
        """Bilinear interpolation of the patch-token lattice at grid centers.

        patch_tokens: (B, P, d); returns (B, len(indices), d).
        """
        cfg = self.cfg
        hp, wp = cfg.patches_hw
        centers = grid.centers()
        if indices is not None:
            centers = centers[np.asarray(indices)]
        u = np.clip(centers[:, 0] / cfg.patch - 0.5, 0, wp - 1)
        v = np.clip(centers[:, 1] / cfg.patch - 0.5, 0, hp - 1)
        x0 = np.floor(u).astype(int)
        y0 = np.floor(v).astype(int)
        x1 = np.minimum(x0 + 1, wp - 1)
        y1 = np.minimum(y0 + 1, hp - 1)
        fx = (u - x0).astype(np.float32)
        fy = (v - y0).astype(np.float32)
        idx00 = y0 * wp + x0
        idx01 = y0 * wp + x1
        idx10 = y1 * wp + x0
        idx11 = y1 * wp + x1
        w00 = ((1 - fx) * (1 - fy))[None, :, None]
        w01 = (fx * (1 - fy))[None, :, None]
        w10 = ((1 - fx) * fy)[None, :, None]
        w11 = (fx * fy)[None, :, None]
        t = patch_tokens
        return (t[:, idx00] * w00 + t[:, idx01] * w01
                + t[:, idx10] * w10 + t[:, idx11] * w11)

    def _block(self, i: int, x: Tensor, add_mask: np.ndarray) -> Tensor:
        cfg = self.cfg
        p = self.params
        pre = f"blk{i}."
        b, t, d = x.shape
        nh, dh = cfg.heads, cfg.dim // cfg.heads
        h = self._ln(x, p[pre + "ln1.w"], p[pre + "ln1.b"])
        q = (h @ p[pre + "attn.wq"] + p[pre + "attn.bq"]) \
            .reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        k = (h @ p[pre + "attn.wk"] + p[pre + "attn.bk"]) \
            .reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        v = (h @ p[pre + "attn.wv"] + p[pre + "attn.bv"]) \
            .reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        att = T.masked_attention(q, k, v, add_mask)
        att = att.transpose(0, 2, 1, 3).reshape(b, t, d)
        x = x + att @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
        h = self._ln(x, p[pre + "ln2.w"], p[pre + "ln2.b"])
        h = (h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]).gelu()
        return x + h @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]

    def _prompt_embedding(self, prompt: list[int]) -> Tensor | None:
        """(1, n_prompt, d) prompt embeddings, or None for an empty prompt."""
        if not prompt:
            return None
        ids = np.asarray(prompt)
        emb = self.params["embed.tok"].take_rows(ids) \
            + self.params["pos.prompt"][: len(ids)]
        return emb.reshape(1, len(ids), self.cfg.dim)

    def encode_image_hiddens(self, prompt_emb: Tensor | None,
                             patch_tokens: Tensor) -> Tensor:
        """Final-layernormed image hiddens (B, P, d) of a prompt+image pass.

        Image positions never attend to response segments, so these hiddens
        equal the image rows of a full-layout forward with the same prompt.
        """
        cfg = self.cfg
        n_prompt = 0 if prompt_emb is None else prompt_emb.shape[1]
        x = patch_tokens if prompt_emb is None \
            else T.concat([prompt_emb, patch_tokens], axis=1)
        kinds = np.array([KIND_PROMPT] * n_prompt + [KIND_IMAGE] * cfg.n_patches,
                         dtype=np.int8)
        mask = build_attention_mask(kinds, np.full(len(kinds), -1, dtype=np.int32))
        hidden = self.transformer(x, mask.additive()[None, None])
        return hidden[:, n_prompt:n_prompt + cfg.n_patches]

    def embed_layout(self, layout: SequenceLayout, patch_tokens: Tensor,
                     grid: GridSpec | None,
                     anchor_feats: Tensor | None = None) -> Tensor:
        """Input embeddings (1, T, d) for a single layout. patch_tokens (1,P,d).

        Grid anchors interpolate from ``anchor_feats`` when given (the
        encoded-anchor path), otherwise from the raw patch tokens.
        """
        cfg = self.cfg
        feats = anchor_feats if anchor_feats is not None else patch_tokens
        parts = []
        prompt_emb = self._prompt_embedding(layout.prompt)
        if prompt_emb is not None:
            parts.append(prompt_emb)
        parts.append(patch_tokens)
        for seg in layout.segments:
            if seg.grid_index >= 0:
                if grid is None:
                    raise ValueError("layout has local anchors but no grid")
                anchor = self.interpolate_grid_features(
                    feats, grid, np.array([seg.grid_index]))
            else:
                anchor = self.params["embed.tok"] \
                    .take_rows(np.array([self.vocab.bos])).reshape(1, 1, cfg.dim)
            pieces = [anchor + self.params["pos.seg"][0]]
            if len(seg.tokens) > 1:
                ids = np.asarray(seg.tokens[:-1])
                emb = self.params["embed.tok"].take_rows(ids) \
                    + self.params["pos.seg"][1: 1 + len(ids)]
                pieces.append(emb.reshape(1, len(ids), cfg.dim))
            parts.append(T.concat(pieces, axis=1))
        return T.concat(parts, axis=1)

    def transformer(self, x: Tensor, add_mask: np.ndarray) -> Tensor:
        """All blocks plus final layernorm. x: (B, T, d) input embeddings."""
        for i in range(self.cfg.layers):
            x = self._block(i, x, add_mask)
        return self._ln(x, self.params["ln_f.w"], self.params["ln_f.b"])

    def interpolate_rows(self, patch_tokens: Tensor, grid: GridSpec,
                         batch_idx: np.ndarray, grid_idx: np.ndarray) -> Tensor:
        """Per-row bilinear lookups: row r reads grid point grid_idx[r] from
        sample batch_idx[r]. patch_tokens: (B, P, d) -> (len(rows), d)."""
        cfg = self.cfg
        hp, wp = cfg.patches_hw
        centers = grid.centers()[np.asarray(grid_idx)]
        u = np.clip(centers[:, 0] / cfg.patch - 0.5, 0, wp - 1)
        v = np.clip(centers[:, 1] / cfg.patch - 0.5, 0, hp - 1)
        x0 = np.floor(u).astype(int)
        y0 = np.floor(v).astype(int)
        x1 = np.minimum(x0 + 1, wp - 1)
        y1 = np.minimum(y0 + 1, hp - 1)
        fx = (u - x0).astype(np.float32)[:, None]
        fy = (v - y0).astype(np.float32)[:, None]
        bb = np.asarray(batch_idx)
        t = patch_tokens
        return (t[bb, y0 * wp + x0] * ((1 - fx) * (1 - fy))
                + t[bb, y0 * wp + x1] * (fx * (1 - fy))
                + t[bb, y1 * wp + x0] * ((1 - fx) * fy)
                + t[bb, y1 * wp + x1] * (fx * fy))

    def forward_layout(self, layout: SequenceLayout, image: np.ndarray,
                       grid: GridSpec | None = None,
                       mask: AttentionMask | None = None) -> BatchForward:
        """Full forward of one sample; hidden is post-final-layernorm."""
        patch_tokens = self.patch_embed(image)
        anchor_feats = None
        if self.cfg.anchor_source == "encoded" \
                and any(s.grid_index >= 0 for s in layout.segments):
            anchor_feats = self.encode_image_hiddens(
                self._prompt_embedding(layout.prompt), patch_tokens)
        x = self.embed_layout(layout, patch_tokens, grid, anchor_feats)
        if mask is None:
            mask = layout_mask(layout)
        add_mask = mask.additive()[None, None]
        hidden = self.transformer(x, add_mask)
        return BatchForward(hidden, [layout])

    def logits_at(self, hidden_rows: Tensor) -> Tensor:
        return hidden_rows @ self.params["head.w"] + self.params["head.b"]

    def forward(self, layout: SequenceLayout, image: np.ndarray,
                grid: GridSpec | None = None,
                mask: AttentionMask | None = None):
        """Single-sample contract: (logits at text positions, h_v, h_t)."""
        fwd = self.forward_layout(layout, image, grid, mask)
        hidden = fwd.hidden[0]
        text_idx = np.flatnonzero(layout.kinds != KIND_IMAGE)
        h_t = hidden.take_rows(text_idx)
        logits = self.logits_at(h_t)
        hp, wp = self.cfg.patches_hw
        h_v = hidden[layout.image_slice()].reshape(hp, wp, self.cfg.dim)
        return logits, h_v, h_t

    # -- numpy (inference) path ----------------------------------------------

    def _np(self, name: str) -> np.ndarray:
        return self.params[name].data

    @staticmethod
    def _np_ln(x, w, b):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + LN_EPS) * w + b

    @staticmethod
    def _np_gelu(x):
        c = math.sqrt(2.0 / math.pi)
        return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))

    def _np_patch_tokens(self, image: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        p = cfg.patch
        hp, wp = cfg.patches_hw
        img = np.asarray(image, dtype=self._np("patch.w").dtype)
        patches = img.reshape(hp, p, wp, p, 3).transpose(0, 2, 1, 3, 4)
        patches = patches.reshape(hp * wp, p * p * 3)
        return patches @ self._np("patch.w") + self._np("patch.b") \
            + self._np("pos.image")

    def np_interpolate(self, patch_tokens: np.ndarray, grid: GridSpec,
                       indices: np.ndarray | None = None) -> np.ndarray:
        t = Tensor(patch_tokens[None])
        out = self.interpolate_grid_features(t, grid, indices)
        return out.data[0]

    def np_anchor_features(self, prefix: "PrefixState") -> np.ndarray:
        """(P, d) feature lattice that grid anchors interpolate from."""
        if self.cfg.anchor_source == "encoded":
            return prefix.h_v.reshape(self.cfg.n_patches, self.cfg.dim)
        return prefix.patch_tokens

    def encode_prefix(self, prompt_ids: list[int], image: np.ndarray) -> PrefixState:
        """Run prompt+image through the transformer, capturing KV caches."""
        cfg = self.cfg
        patch_tokens = self._np_patch_tokens(image)
        n_prompt = len(prompt_ids)
        if n_prompt:
            prompt_emb = self._np("embed.tok")[np.asarray(prompt_ids)] \
                + self._np("pos.prompt")[:n_prompt]
            x = np.concatenate([prompt_emb, patch_tokens], axis=0)
        else:
            x = patch_tokens
        t = x.shape[0]
        kinds = np.array([KIND_PROMPT] * n_prompt + [KIND_IMAGE] * cfg.n_patches,
                         dtype=np.int8)
        mask = build_attention_mask(kinds, np.full(t, -1, dtype=np.int32))
        add = mask.additive(x.dtype)
        nh, dh = cfg.heads, cfg.dim // cfg.heads
        keys, values = [], []
        x = x[None]
        for i in range(cfg.layers):
            pre = f"blk{i}."
            h = self._np_ln(x, self._np(pre + "ln1.w"), self._np(pre + "ln1.b"))
            q = (h @ self._np(pre + "attn.wq") + self._np(pre + "attn.bq")) \
                .reshape(1, t, nh, dh).transpose(0, 2, 1, 3)
            k = (h @ self._np(pre + "attn.wk") + self._np(pre + "attn.bk")) \
                .reshape(1, t, nh, dh).transpose(0, 2, 1, 3)
            v = (h @ self._np(pre + "attn.wv") + self._np(pre + "attn.bv")) \
                .reshape(1, t, nh, dh).transpose(0, 2, 1, 3)
            keys.append(k)
            values.append(v)
            scores = q @ k.swapaxes(-1, -2) / math.sqrt(dh) + add
            w = _np_softmax(scores)
            att = (w @ v).transpose(0, 2, 1, 3).reshape(1, t, cfg.dim)
            x = x + att @ self._np(pre + "attn.wo") + self._np(pre + "attn.bo")
            h = self._np_ln(x, self._np(pre + "ln2.w"), self._np(pre + "ln2.b"))
            h = self._np_gelu(h @ self._np(pre + "mlp.w1") + self._np(pre + "mlp.b1"))
            x = x + h @ self._np(pre + "mlp.w2") + self._np(pre + "mlp.b2")
        hidden = self._np_ln(x, self._np("ln_f.w"), self._np("ln_f.b"))[0]
        hp, wp = cfg.patches_hw
        h_v = hidden[n_prompt:n_prompt + cfg.n_patches].reshape(hp, wp, cfg.dim)
        cache = KvCache(keys, values, np.ones((1, t), dtype=bool))
        return PrefixState(cache, h_v, patch_tokens, t)

    def decode_step(self, cache: KvCache, x_emb: np.ndarray,
                    valid: np.ndarray | None = None):
        """One incremental step; x_emb (B, d) input embeddings.

        Appends this step's keys/values to the cache. Rows with valid=False
        are padding: their KV entries are masked for future steps.
        Returns (logits (B, V), hidden (B, d)).
        """
        cfg = self.cfg
        b, d = x_emb.shape
        nh = cfg.heads
        dh = d // nh
        if valid is None:
            valid = np.ones(b, dtype=bool)
        x = x_emb[:, None, :]
        key_add = np.where(cache.key_mask[:, None, None, :], 0.0, T.MASK_NEG)
        new_keys, new_values = [], []
        for i in range(cfg.layers):
            pre = f"blk{i}."
            h = self._np_ln(x, self._np(pre + "ln1.w"), self._np(pre + "ln1.b"))
            q = (h @ self._np(pre + "attn.wq") + self._np(pre + "attn.bq")) \
                .reshape(b, 1, nh, dh).transpose(0, 2, 1, 3)
            k_new = (h @ self._np(pre + "attn.wk") + self._np(pre + "attn.bk")) \
                .reshape(b, 1, nh, dh).transpose(0, 2, 1, 3)
            v_new = (h @ self._np(pre + "attn.wv") + self._np(pre + "attn.bv")) \
                .reshape(b, 1, nh, dh).transpose(0, 2, 1, 3)
            new_keys.append(k_new)
            new_values.append(v_new)
            k_all = np.concatenate([cache.keys[i], k_new], axis=2)
            v_all = np.concatenate([cache.values[i], v_new], axis=2)
            scores = q @ k_all.swapaxes(-1, -2) / math.sqrt(dh)
            scores[..., :-1] += key_add
            w = _np_softmax(scores)
            att = (w @ v_all).transpose(0, 2, 1, 3).reshape(b, 1, d)
            x = x + att @ self._np(pre + "attn.wo") + self._np(pre + "attn.bo")
            h = self._np_ln(x, self._np(pre + "ln2.w"), self._np(pre + "ln2.b"))
            h = self._np_gelu(h @ self._np(pre + "mlp.w1") + self._np(pre + "mlp.b1"))
            x = x + h @ self._np(pre + "mlp.w2") + self._np(pre + "mlp.b2")
        cache.append(new_keys, new_values, np.asarray(valid, dtype=bool))
        hidden = self._np_ln(x, self._np("ln_f.w"), self._np("ln_f.b"))[:, 0, :]
        logits = hidden @ self._np("head.w") + self._np("head.b")
        return logits, hidden


def _np_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)
