"""Autoregressive decoding over cached prefixes.

The image+prompt prefix is encoded once; its key/value cache is duplicated
across grid points so every subsequence advances one token per forward pass
in parallel. Attention-mask isolation makes this exactly equivalent to
decoding each grid point on its own. Beam search runs per anchor with the
beams sharing the prefix cache as batch rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import Vocabulary
from .model import GridSpec, KvCache, Model, PrefixState


@dataclass
class SubsequenceResult:
    """One decoded subsequence (response tokens include the final EOS)."""

    tokens: list[int]
    logprob: float
    first_prob: float
    hiddens: np.ndarray          # (steps, d): hidden at each input position
    grid_index: int = -1
    center: tuple[float, float] | None = None

    @property
    def positive(self) -> bool:
        return len(self.tokens) > 1  # more than a bare EOS


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _default_forbidden(vocab: Vocabulary) -> list[int]:
    return [vocab.pad, vocab.bos]


def _input_embedding(model: Model, token_id: int, step: int) -> np.ndarray:
    return model._np("embed.tok")[token_id] + model._np("pos.seg")[step]


def greedy_decode_grid(model: Model, prefix: PrefixState, grid: GridSpec,
                       indices: np.ndarray | None = None,
                       max_len: int | None = None,
                       forbidden: list[int] | None = None) -> list[SubsequenceResult]:
    """Decode all selected grid subsequences in parallel, one step per forward."""
    vocab = model.vocab
    cfg = model.cfg
    if indices is None:
        indices = np.arange(grid.m)[: grid.budget]
    indices = np.asarray(indices)
    if max_len is None:
        max_len = cfg.max_segment - 1
    if forbidden is None:
        forbidden = _default_forbidden(vocab)
    m = len(indices)
    centers = grid.centers()[indices]

    anchors = model.np_interpolate(model.np_anchor_features(prefix), grid,
                                   indices)
    x = anchors + model._np("pos.seg")[0]
    cache = prefix.cache.duplicate(m)

    tokens: list[list[int]] = [[] for _ in range(m)]
    logprobs = np.zeros(m)
    first_probs = np.zeros(m)
    hiddens: list[list[np.ndarray]] = [[] for _ in range(m)]
    active = np.ones(m, dtype=bool)
    pad_emb = model._np("embed.tok")[vocab.pad]

    for step in range(max_len):
        logits, hidden = model.decode_step(cache, x.astype(np.float32), valid=active)
        logp = _log_softmax(logits.astype(np.float64))
        logp[:, forbidden] = -np.inf
        nxt = logp.argmax(axis=-1)
        for r in range(m):
            if not active[r]:
                continue
            hiddens[r].append(hidden[r])
            tok = int(nxt[r])
            tokens[r].append(tok)
            logprobs[r] += logp[r, tok]
            if step == 0:
                first_probs[r] = math.exp(logp[r, tok])
            if tok == vocab.eos:
                active[r] = False
        if not active.any():
            break
        x = np.where(
            active[:, None],
            model._np("embed.tok")[np.where(active, nxt, vocab.pad)]
            + model._np("pos.seg")[min(step + 1, cfg.max_segment - 1)],
            pad_emb,
        )

    out = []
    for r in range(m):
        toks = tokens[r]
        if not toks or toks[-1] != vocab.eos:
            toks = toks + [vocab.eos]  # length cap hit; close the sequence
        out.append(SubsequenceResult(
            tokens=toks, logprob=float(logprobs[r]),
            first_prob=float(first_probs[r]),
            hiddens=np.stack(hiddens[r]) if hiddens[r] else np.zeros((0, cfg.dim)),
            grid_index=int(indices[r]), center=tuple(centers[r])))
    return out


@dataclass
class _Beam:
    tokens: list[int] = field(default_factory=list)
    logprob: float = 0.0
    finished: bool = False
    hiddens: list[np.ndarray] = field(default_factory=list)
    first_prob: float = 0.0


def beam_decode(model: Model, prefix: PrefixState, anchor_emb: np.ndarray,
                beam_width: int = 1, max_len: int | None = None,
                length_normalize: bool = True,
                forbidden: list[int] | None = None,
                grid_index: int = -1,
                center: tuple[float, float] | None = None) -> SubsequenceResult:
    """Beam search for one anchor. Pruning ranks by summed log-probability;
    the final hypothesis is picked length-normalized unless disabled.
    Width 1 reduces to greedy decoding."""
    vocab = model.vocab
    cfg = model.cfg
    if max_len is None:
        max_len = cfg.max_segment - 1
    if forbidden is None:
        forbidden = _default_forbidden(vocab)
    b = beam_width
    cache = prefix.cache.duplicate(b)
    beams = [_Beam() if i == 0 else _Beam(logprob=-np.inf) for i in range(b)]
    x = np.tile(anchor_emb + model._np("pos.seg")[0], (b, 1))
    pad_emb = model._np("embed.tok")[vocab.pad]

    for step in range(max_len):
        valid = np.array([not bm.finished and np.isfinite(bm.logprob)
                          for bm in beams])
        logits, hidden = model.decode_step(cache, x.astype(np.float32), valid=valid)
        logp = _log_softmax(logits.astype(np.float64))
        logp[:, forbidden] = -np.inf
        # candidates: (score, parent_row, token or None for already-finished)
        cands: list[tuple[float, int, int | None]] = []
        for r, bm in enumerate(beams):
            if bm.finished:
                cands.append((bm.logprob, r, None))
                continue
            if not np.isfinite(bm.logprob):
                continue
            top = np.argsort(logp[r])[::-1][:b]
            for tok in top:
                cands.append((bm.logprob + logp[r, tok], r, int(tok)))
        cands.sort(key=lambda c: c[0], reverse=True)
        cands = cands[:b]

        new_beams, parents, next_tokens = [], [], []
        for score, r, tok in cands:
            src = beams[r]
            if tok is None:
                new_beams.append(src)
                parents.append(r)
                next_tokens.append(vocab.pad)
                continue
            nb = _Beam(tokens=src.tokens + [tok], logprob=score,
                       finished=(tok == vocab.eos),
                       hiddens=src.hiddens + [hidden[r]],
                       first_prob=(math.exp(logp[r, tok]) if step == 0
                                   else src.first_prob))
            new_beams.append(nb)
            parents.append(r)
            next_tokens.append(tok)
        while len(new_beams) < b:
            new_beams.append(_Beam(logprob=-np.inf, finished=True))
            parents.append(0)
            next_tokens.append(vocab.pad)
        cache = cache.select(parents)
        beams = new_beams
        if all(bm.finished or not np.isfinite(bm.logprob) for bm in beams):
            break
        x = np.stack([
            pad_emb if beams[r].finished or not np.isfinite(beams[r].logprob)
            else _input_embedding(model, next_tokens[r],
                                  min(step + 1, cfg.max_segment - 1))
            for r in range(b)])

    live = [bm for bm in beams if np.isfinite(bm.logprob) and bm.tokens]
    if not live:
        return SubsequenceResult([vocab.eos], 0.0, 0.0,
                                 np.zeros((0, cfg.dim)), grid_index, center)

    def rank(bm: _Beam) -> float:
        if length_normalize:
            return bm.logprob / max(len(bm.tokens), 1)
        return bm.logprob

    best = max(live, key=rank)
    toks = best.tokens
    if toks[-1] != vocab.eos:
        toks = toks + [vocab.eos]
    return SubsequenceResult(
        tokens=toks, logprob=best.logprob, first_prob=best.first_prob,
        hiddens=np.stack(best.hiddens) if best.hiddens else np.zeros((0, cfg.dim)),
        grid_index=grid_index, center=center)


def decode_single(model: Model, prompt_ids: list[int], image: np.ndarray,
                  beam_width: int = 1, length_normalize: bool = True,
                  max_len: int | None = None):
    """Single-prediction decode anchored on a BOS embedding."""
    prefix = model.encode_prefix(prompt_ids, image)
    anchor = model._np("embed.tok")[model.vocab.bos]
    res = beam_decode(model, prefix, anchor, beam_width,
                      max_len=max_len, length_normalize=length_normalize)
    return res, prefix


def decode_grid(model: Model, prompt_ids: list[int], image: np.ndarray,
                grid: GridSpec, indices: np.ndarray | None = None,
                beam_width: int = 1, length_normalize: bool = True,
                max_len: int | None = None):
    """Multi-prediction decode over grid anchors sharing one encoded prefix."""
    prefix = model.encode_prefix(prompt_ids, image)
    if indices is None:
        indices = np.arange(grid.m)[: grid.budget]
    indices = np.asarray(indices)
    if beam_width <= 1:
        results = greedy_decode_grid(model, prefix, grid, indices, max_len)
    else:
        centers = grid.centers()
        results = []
        for idx in indices:
            anchor = model.np_interpolate(model.np_anchor_features(prefix),
                                          grid, np.array([idx]))[0]
            results.append(beam_decode(
                model, prefix, anchor, beam_width, max_len=max_len,
                length_normalize=length_normalize, grid_index=int(idx),
                center=tuple(centers[idx])))
    return results, prefix


def positive_rate(results: list[SubsequenceResult]) -> float:
    if not results:
        return 0.0
    return sum(r.positive for r in results) / len(results)


def mask_query_hiddens(result: SubsequenceResult,
                       mask_positions: list[int]) -> np.ndarray:
    """Hidden states where a <MASK> token was the *input*: response index i
    is fed at step i+1, so its query embedding is hiddens[i + 1]."""
    rows = [result.hiddens[i + 1] for i in mask_positions]
    return np.stack(rows)
