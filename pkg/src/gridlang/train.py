"""Target construction and optimization.

Ground-truth objects are matched to grid points by minimum-total
center-distance (Hungarian), grids are subsampled with positive priority,
and every task is reduced to next-token cross-entropy plus focal+dice on
retrieved masks (and MSE for the dense regression heads).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .codec import (CLASS_NAMES, COLOR_NAMES, BoxAnn, Vocabulary,
                    serialize_box, serialize_mask_request)
from .model import (KIND_IMAGE, KIND_LOCAL, KIND_PAD, KIND_PROMPT,
                    KIND_RESPONSE, GridSpec, Model, Segment,
                    build_attention_mask)
from .optim import AdamW, cosine_lr
from .retrieval import bilinear_resize, pixel_shuffle, retrieve
from .synth import (DEPTH_MAX, DEPTH_MIN, RleMask, Sample, augment,
                    copy_paste, instance_color, rle_decode)
from .tensor import Tensor, cross_entropy, scatter_rows


class TooManyObjects(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class Assignment:
    grid_to_object: np.ndarray  # (M,) object index per grid, -1 for negatives
    cost: float


def _object_center(obj) -> tuple[float, float]:
    if isinstance(obj, BoxAnn):
        return obj.center
    if isinstance(obj, RleMask):
        mask = rle_decode(obj)
        ys, xs = np.nonzero(mask)
        return (float(xs.min() + xs.max() + 1) / 2,
                float(ys.min() + ys.max() + 1) / 2)
    raise TypeError(f"cannot take a center of {type(obj).__name__}")


def assign(objects: list, grid: GridSpec, repeat_k: int = 1) -> Assignment:
    """Minimum-total-distance matching of object centers to grid centers.

    With repeat_k > 1 every object is duplicated k times before matching, so
    k distinct grids carry it. Ties break toward the lowest grid index.
    """
    n = len(objects)
    if n * repeat_k > grid.m:
        raise TooManyObjects(
            f"{n} objects x repeat {repeat_k} exceed {grid.m} grid points")
    grid_to_object = np.full(grid.m, -1, dtype=np.int64)
    if n == 0:
        return Assignment(grid_to_object, 0.0)
    centers = np.array([_object_center(o) for o in objects])
    centers = np.repeat(centers, repeat_k, axis=0)
    gc = grid.centers()
    cost = np.linalg.norm(centers[:, None, :] - gc[None, :, :], axis=-1)
    # deterministic tie-break: prefer lower grid indices
    tie = cost + np.arange(grid.m)[None, :] * 1e-9
    rows, cols = linear_sum_assignment(tie)
    for r, c in zip(rows, cols):
        grid_to_object[c] = r // repeat_k
    return Assignment(grid_to_object, float(cost[rows, cols].sum()))


def sample_grids(a: Assignment, budget: int,
                 rng: np.random.Generator) -> np.ndarray:
    """All positive grids first (by index), then random distinct negatives."""
    if budget > len(a.grid_to_object):
        raise ValueError("budget exceeds grid size")
    positives = np.flatnonzero(a.grid_to_object >= 0)
    if len(positives) >= budget:
        return positives[:budget]
    negatives = np.flatnonzero(a.grid_to_object < 0)
    extra = rng.choice(negatives, size=budget - len(positives), replace=False)
    return np.concatenate([positives, np.sort(extra)])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    ce: float = 0.0
    focal: float = 0.0
    dice: float = 0.0
    reg: float = 0.0
    lam: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def total(self) -> float:
        lc, lf, ld = self.lam
        return lc * self.ce + lf * self.focal + ld * self.dice + self.reg

    def validate(self) -> None:
        vals = (self.ce, self.focal, self.dice, self.reg)
        if not all(math.isfinite(v) and v >= 0 for v in vals[:3]):
            raise NonFiniteLoss(f"bad loss components {vals}")


def seg_loss(s_up: Tensor, gt: np.ndarray, gamma: float = 2.0,
             alpha: float = 0.25, eps: float = 1.0) -> tuple[Tensor, Tensor]:
    """Focal + soft-dice between score map s_up and a binary target."""
    if s_up.shape != gt.shape:
        raise T.ShapeMismatch(f"scores {s_up.shape} vs target {gt.shape}")
    t = np.asarray(gt, dtype=np.float32)
    p = s_up.sigmoid()
    log_p = (-s_up).softplus() * -1.0      # log sigmoid(s)
    log_q = s_up.softplus() * -1.0         # log (1 - sigmoid(s))
    focal = ((1.0 - p) ** gamma * log_p * (-alpha) * t
             + p ** gamma * log_q * (-(1.0 - alpha)) * (1.0 - t))
    focal = focal.mean()
    inter = (p * t).sum()
    dice = 1.0 - (inter * 2.0 + eps) / (p.sum() + float(t.sum()) + eps)
    return focal, dice


def downsample_mask(gt: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-average a binary map to ``size`` then threshold at 0.5."""
    h, w = gt.shape
    th, tw = size
    f = np.asarray(gt, dtype=np.float64)
    if h % th == 0 and w % tw == 0:
        f = f.reshape(th, h // th, tw, w // tw).mean(axis=(1, 3))
    else:
        f = bilinear_resize(f, size)
    return f >= 0.5


def downsample_field(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Block-average a float map (optionally with channels) to ``size``."""
    h, w = x.shape[:2]
    th, tw = size
    if h % th or w % tw:
        raise T.ShapeMismatch("field size must be divisible by target size")
    tail = x.shape[2:]
    return x.reshape(th, h // th, tw, w // tw, *tail).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

@dataclass
class SegTarget:
    b: int
    offsets: np.ndarray  # input positions inside the segment region
    kind: str            # "mask" | "depth" | "normals"
    gt: np.ndarray


@dataclass
class SampleSpec:
    prompt: list[int]
    segments: list[Segment]
    # (segment index, response indices of query tokens, kind, ground truth)
    supervision: list[tuple[int, list[int], str, np.ndarray]] = field(
        default_factory=list)


@dataclass
class Batch:
    images: np.ndarray
    prompt_ids: np.ndarray       # (B, n_prompt)
    seg_tok_ids: np.ndarray      # (B, Ts)
    tok_use: np.ndarray          # (B, Ts) 1 where a token embedding applies
    pos_idx: np.ndarray          # (B, Ts)
    pos_use: np.ndarray
    local_bb: np.ndarray
    local_tt: np.ndarray         # positions relative to the segment region
    local_gg: np.ndarray
    add_mask: np.ndarray         # (B, 1, T, T)
    targets: np.ndarray          # (B, T)
    seg_targets: list[SegTarget]
    grid: GridSpec | None
    n_prompt: int


def _mask_response(class_id: int, n_mask: int, vocab: Vocabulary) -> list[int]:
    return serialize_mask_request(CLASS_NAMES[class_id], n_mask, vocab) + [vocab.eos]


def _query_offsets(tokens: list[int], query_ids: set[int]) -> list[int]:
    """Input positions (within the segment) whose fed token is a query token."""
    inputs = tokens[:-1]  # position j+1 feeds tokens[j]
    return [j + 1 for j, t in enumerate(inputs) if t in query_ids]


def build_detect(sample: Sample, vocab: Vocabulary, grid: GridSpec,
                 rng: np.random.Generator, repeat_k: int, budget: int) -> SampleSpec:
    h, w = sample.size
    n = max(len(sample.boxes), 1)
    k_eff = max(1, min(repeat_k, grid.m // n))
    a = assign(sample.boxes, grid, k_eff)
    indices = sample_grids(a, min(budget, grid.m), rng)
    segments = []
    for gi in indices:
        obj = a.grid_to_object[gi]
        if obj >= 0:
            box = sample.boxes[obj]
            tokens = serialize_box(box, CLASS_NAMES[box.class_id],
                                   float(w), float(h), vocab) + [vocab.eos]
        else:
            tokens = [vocab.eos]
        segments.append(Segment(tokens, grid_index=int(gi)))
    return SampleSpec(vocab.encode_all(["detect"]), segments)


def build_outline(sample: Sample, vocab: Vocabulary, grid: GridSpec,
                  rng: np.random.Generator, repeat_k: int, budget: int,
                  n_mask: int, sup_size: tuple[int, int]) -> SampleSpec:
    n = max(len(sample.boxes), 1)
    k_eff = max(1, min(repeat_k, grid.m // n))
    a = assign(sample.boxes, grid, k_eff)
    indices = sample_grids(a, min(budget, grid.m), rng)
    segments, supervision = [], []
    for si, gi in enumerate(indices):
        obj = a.grid_to_object[gi]
        if obj >= 0:
            tokens = _mask_response(sample.boxes[obj].class_id, n_mask, vocab)
            offs = _query_offsets(tokens, {vocab.mask})
            gt = downsample_mask(rle_decode(sample.instance_masks[obj]), sup_size)
            supervision.append((si, offs, "mask", gt))
        else:
            tokens = [vocab.eos]
        segments.append(Segment(tokens, grid_index=int(gi)))
    return SampleSpec(vocab.encode_all(["outline"]), segments, supervision)


def build_segment(sample: Sample, vocab: Vocabulary, rng: np.random.Generator,
                  n_mask: int, sup_size: tuple[int, int],
                  absent_prob: float = 0.25) -> SampleSpec:
    present = sorted({b.class_id for b in sample.boxes})
    absent = [c for c in range(len(CLASS_NAMES)) if c not in present]
    if absent and (not present or rng.random() < absent_prob):
        cid = int(rng.choice(absent))
        tokens = [vocab.eos]
        supervision = []
    else:
        cid = int(rng.choice(present))
        tokens = _mask_response(cid, n_mask, vocab)
        gt = downsample_mask(sample.semantic_map == cid, sup_size)
        supervision = [(0, _query_offsets(tokens, {vocab.mask}), "mask", gt)]
    prompt = vocab.encode_all(["segment", CLASS_NAMES[cid]])
    return SampleSpec(prompt, [Segment(tokens, grid_index=-1)], supervision)


def build_refer(sample: Sample, vocab: Vocabulary, rng: np.random.Generator,
                n_mask: int, sup_size: tuple[int, int]) -> SampleSpec:
    idx = int(rng.integers(len(sample.boxes)))
    cid = sample.boxes[idx].class_id
    color = instance_color(sample, idx)
    # referring phrases must be unambiguous: among same (color, class) pick
    # the largest instance as the canonical referent
    candidates = [i for i, b in enumerate(sample.boxes)
                  if b.class_id == cid and instance_color(sample, i) == color]
    areas = [rle_decode(sample.instance_masks[i]).sum() for i in candidates]
    idx = candidates[int(np.argmax(areas))]
    tokens = _mask_response(cid, n_mask, vocab)
    gt = downsample_mask(rle_decode(sample.instance_masks[idx]), sup_size)
    prompt = vocab.encode_all(["refer", "the", COLOR_NAMES[color],
                               CLASS_NAMES[cid]])
    return SampleSpec(prompt, [Segment(tokens, grid_index=-1)],
                      [(0, _query_offsets(tokens, {vocab.mask}), "mask", gt)])


def build_depth(sample: Sample, vocab: Vocabulary,
                patch_size: tuple[int, int]) -> SampleSpec:
    tokens = [vocab.depth, vocab.eos]
    gt = downsample_field(sample.depth_map, patch_size)
    return SampleSpec(vocab.encode_all(["depth"]),
                      [Segment(tokens, grid_index=-1)],
                      [(0, _query_offsets(tokens, {vocab.depth}), "depth", gt)])


def build_normals(sample: Sample, vocab: Vocabulary,
                  patch_size: tuple[int, int]) -> SampleSpec:
    nx, ny, nz = vocab.normal_xyz
    tokens = [nx, ny, nz, vocab.eos]
    gt = downsample_field(sample.normal_map, patch_size)
    gt = gt / np.maximum(np.linalg.norm(gt, axis=-1, keepdims=True), 1e-8)
    gt = gt.transpose(2, 0, 1)  # channels first, matching the query order
    return SampleSpec(vocab.encode_all(["normals"]),
                      [Segment(tokens, grid_index=-1)],
                      [(0, _query_offsets(tokens, set(vocab.normal_xyz)),
                        "normals", gt)])


def build_spec(task: str, sample: Sample, model: Model,
               rng: np.random.Generator, grid: GridSpec, repeat_k: int,
               budget: int) -> SampleSpec:
    cfg = model.cfg
    vocab = model.vocab
    n_side = cfg.mask_tokens_side
    hp, wp = cfg.patches_hw
    sup = (hp * n_side, wp * n_side)
    if task == "detect":
        return build_detect(sample, vocab, grid, rng, repeat_k, budget)
    if task == "instseg":
        return build_outline(sample, vocab, grid, rng, repeat_k, budget,
                             n_side * n_side, sup)
    if task == "semseg":
        return build_segment(sample, vocab, rng, n_side * n_side, sup)
    if task == "refer":
        return build_refer(sample, vocab, rng, n_side * n_side, sup)
    if task == "depth":
        return build_depth(sample, vocab, (hp, wp))
    if task == "normals":
        return build_normals(sample, vocab, (hp, wp))
    raise ValueError(f"unknown task {task!r}")


def assemble_batch(model: Model, samples: list[Sample], task: str,
                   rng: np.random.Generator, grid: GridSpec,
                   repeat_k: int = 1, budget: int = 8) -> Batch:
    """Teacher-forced batch for one task (prompt length uniform per task)."""
    cfg = model.cfg
    vocab = model.vocab
    specs = [build_spec(task, s, model, rng, grid, repeat_k, budget)
             for s in samples]
    b = len(samples)
    n_prompt = len(specs[0].prompt)
    p = cfg.n_patches
    ts = max(sum(len(seg) for seg in sp.segments) for sp in specs)
    t_total = n_prompt + p + ts

    images = np.stack([s.image for s in samples])
    prompt_ids = np.array([sp.prompt for sp in specs], dtype=np.int64)
    seg_tok_ids = np.full((b, ts), vocab.pad, dtype=np.int64)
    tok_use = np.zeros((b, ts), dtype=np.float32)
    pos_idx = np.zeros((b, ts), dtype=np.int64)
    pos_use = np.zeros((b, ts), dtype=np.float32)
    targets = np.full((b, t_total), -1, dtype=np.int64)
    local_bb, local_tt, local_gg = [], [], []
    seg_targets: list[SegTarget] = []
    masks = np.empty((b, t_total, t_total), dtype=np.float32)

    for bi, sp in enumerate(specs):
        kinds = [KIND_PROMPT] * n_prompt + [KIND_IMAGE] * p
        seg_ids = [-1] * (n_prompt + p)
        seg_starts = []
        off = 0
        for si, seg in enumerate(sp.segments):
            seg_starts.append(off)
            ln = len(seg)
            pos_idx[bi, off:off + ln] = np.arange(ln)
            pos_use[bi, off:off + ln] = 1.0
            if seg.grid_index >= 0:
                local_bb.append(bi)
                local_tt.append(off)
                local_gg.append(seg.grid_index)
            else:
                seg_tok_ids[bi, off] = vocab.bos
                tok_use[bi, off] = 1.0
            if ln > 1:
                seg_tok_ids[bi, off + 1:off + ln] = seg.tokens[:-1]
                tok_use[bi, off + 1:off + ln] = 1.0
            targets[bi, n_prompt + p + off:n_prompt + p + off + ln] = seg.tokens
            kinds += [KIND_LOCAL] + [KIND_RESPONSE] * (ln - 1)
            seg_ids += [si] * ln
            off += ln
        pad = ts - off
        kinds += [KIND_PAD] * pad
        seg_ids += [-1] * pad
        am = build_attention_mask(np.array(kinds, dtype=np.int8),
                                  np.array(seg_ids, dtype=np.int32))
        masks[bi] = am.additive()
        for si, offs, kind, gt in sp.supervision:
            rows = seg_starts[si] + np.asarray(offs)
            seg_targets.append(SegTarget(bi, rows, kind, gt))

    return Batch(images=images, prompt_ids=prompt_ids, seg_tok_ids=seg_tok_ids,
                 tok_use=tok_use, pos_idx=pos_idx, pos_use=pos_use,
                 local_bb=np.array(local_bb, dtype=np.int64),
                 local_tt=np.array(local_tt, dtype=np.int64),
                 local_gg=np.array(local_gg, dtype=np.int64),
                 add_mask=masks[:, None], targets=targets,
                 seg_targets=seg_targets, grid=grid, n_prompt=n_prompt)


# ---------------------------------------------------------------------------
# forward + loss
# ---------------------------------------------------------------------------

def compute_loss(model: Model, batch: Batch,
                 lam: tuple[float, float, float] = (1.0, 1.0, 1.0)):
    """Total loss Tensor plus a LossReport of its components."""
    cfg = model.cfg
    p = model.params
    bsz, ts = batch.seg_tok_ids.shape
    n_prompt = batch.n_prompt
    np_patches = cfg.n_patches
    d = cfg.dim
    hp, wp = cfg.patches_hw

    patch = model.patch_embed(batch.images)  # (B, P, d)
    prompt_emb = p["embed.tok"].take_rows(batch.prompt_ids.reshape(-1)) \
        .reshape(bsz, n_prompt, d) + p["pos.prompt"][:n_prompt]
    seg_x = p["embed.tok"].take_rows(batch.seg_tok_ids.reshape(-1)) \
        .reshape(bsz, ts, d) * batch.tok_use[:, :, None]
    seg_x = seg_x + p["pos.seg"].take_rows(batch.pos_idx.reshape(-1)) \
        .reshape(bsz, ts, d) * batch.pos_use[:, :, None]
    if len(batch.local_bb):
        if cfg.anchor_source == "encoded":
            anchor_feats = model.encode_image_hiddens(
                prompt_emb if n_prompt else None, patch)
        else:
            anchor_feats = patch
        loc = model.interpolate_rows(anchor_feats, batch.grid, batch.local_bb,
                                     batch.local_gg)
        seg_x = seg_x + scatter_rows(loc, (batch.local_bb, batch.local_tt),
                                     (bsz, ts, d))
    x = T.concat([prompt_emb, patch, seg_x], axis=1)
    hidden = model.transformer(x, batch.add_mask)

    t_total = n_prompt + np_patches + ts
    flat = hidden.reshape(bsz * t_total, d)
    tgt = batch.targets.reshape(-1)
    sup_rows = np.flatnonzero(tgt >= 0)
    logits = model.logits_at(flat.take_rows(sup_rows))
    ce = cross_entropy(logits, tgt[sup_rows])

    zero = Tensor(np.zeros((), dtype=np.float32))
    focal_sum, dice_sum, reg_sum = zero, zero, zero
    n_masks = n_reg = 0
    seg_region = n_prompt + np_patches
    for st in batch.seg_targets:
        rows = st.b * t_total + seg_region + st.offsets
        q = flat.take_rows(rows)
        h_v = hidden[st.b, n_prompt:n_prompt + np_patches].reshape(hp, wp, d)
        s = retrieve(q, h_v)
        if st.kind == "mask":
            f, dc = seg_loss(pixel_shuffle(s), st.gt)
            focal_sum = focal_sum + f
            dice_sum = dice_sum + dc
            n_masks += 1
        elif st.kind == "depth":
            pred = s.reshape(hp, wp).sigmoid() * (DEPTH_MAX - DEPTH_MIN) + DEPTH_MIN
            diff = pred - st.gt.astype(np.float32)
            reg_sum = reg_sum + (diff * diff).mean()
            n_reg += 1
        elif st.kind == "normals":
            pred = s.sigmoid() * 2.0 - 1.0
            diff = pred - st.gt.astype(np.float32)
            reg_sum = reg_sum + (diff * diff).mean()
            n_reg += 1
        else:
            raise ValueError(f"unknown supervision kind {st.kind!r}")

    focal = focal_sum * (1.0 / max(n_masks, 1))
    dice = dice_sum * (1.0 / max(n_masks, 1))
    reg = reg_sum * (1.0 / max(n_reg, 1))
    lc, lf, ld = lam
    total = ce * lc + focal * lf + dice * ld + reg
    report = LossReport(ce=float(ce.data), focal=float(focal.data),
                        dice=float(dice.data), reg=float(reg.data), lam=lam)
    return total, report


def train_step(model: Model, opt: AdamW, batch: Batch, lr: float,
               clip: float = 1.0,
               lam: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> LossReport:
    total, report = compute_loss(model, batch, lam)
    if not math.isfinite(float(total.data)):
        raise NonFiniteLoss(
            f"non-finite total loss: ce={report.ce} focal={report.focal} "
            f"dice={report.dice} reg={report.reg}")
    report.validate()
    opt.zero_grad()
    total.backward()
    if clip > 0:
        opt.clip_grad_norm(clip)
    opt.step(lr=lr)
    return report


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainParams:
    iters: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    warmup: int = 100
    min_lr: float = 0.0
    weight_decay: float = 0.01
    clip: float = 1.0
    tasks: dict = field(default_factory=lambda: {"detect": 1.0})
    grid_k: int = 4
    grid_budget: int = 8
    repeat_k: int = 1
    augment_policy: str = "none"
    copy_paste_prob: float = 0.0
    log_every: int = 10
    checkpoint_every: int = 0
    seed: int = 0


def train_loop(model: Model, dataset: list[Sample], params: TrainParams,
               out_dir) -> Path:
    """Run the optimization; returns the final checkpoint path.

    Writes loss.csv (iter, ce, focal, dice, reg, lr), a hyperparameter
    snapshot, periodic checkpoints when requested, and ckpt_final.bin.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = model.cfg.image_size
    grid = GridSpec(params.grid_k, h, w)
    opt = AdamW(model.params, lr=params.lr, weight_decay=params.weight_decay)
    rng = np.random.default_rng(params.seed)
    task_names = sorted(params.tasks)
    task_p = np.array([params.tasks[t] for t in task_names], dtype=np.float64)
    task_p /= task_p.sum()

    with open(out_dir / "train_params.json", "w", encoding="utf-8") as f:
        json.dump({**vars(params), "model_digest": model.cfg.digest()},
                  f, indent=2, default=str)

    csv_path = out_dir / "loss.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", "ce", "focal", "dice", "reg", "lr"])
        for it in range(params.iters):
            task = task_names[int(rng.choice(len(task_names), p=task_p))]
            picks = rng.integers(len(dataset), size=params.batch_size)
            samples = []
            for pi in picks:
                s = dataset[int(pi)]
                if params.augment_policy != "none":
                    s = augment(s, params.augment_policy,
                                int(rng.integers(1 << 31)))
                if params.copy_paste_prob > 0 and \
                        rng.random() < params.copy_paste_prob:
                    other = dataset[int(rng.integers(len(dataset)))]
                    s = copy_paste(s, other, int(rng.integers(1 << 31)))
                if not s.boxes:
                    s = dataset[int(pi)]
                samples.append(s)
            batch = assemble_batch(model, samples, task, rng, grid,
                                   repeat_k=params.repeat_k,
                                   budget=params.grid_budget)
            lr = cosine_lr(it, params.lr, params.iters, params.warmup,
                           params.min_lr)
            report = train_step(model, opt, batch, lr, clip=params.clip)
            if it % params.log_every == 0 or it == params.iters - 1:
                writer.writerow([it, f"{report.ce:.6f}", f"{report.focal:.6f}",
                                 f"{report.dice:.6f}", f"{report.reg:.6f}",
                                 f"{lr:.8f}"])
                f.flush()
            if params.checkpoint_every and it and \
                    it % params.checkpoint_every == 0:
                model.save(out_dir / f"ckpt_{it}.bin")
    final = out_dir / "ckpt_final.bin"
    model.save(final)
    return final
