"""Acceptance suite: one test per headline criterion.

Each test asserts the criterion and prints a single `[criterion N] PASS`
line with the measured numbers (visible with `pytest -s` or on failure).
Criteria 5-9 use trained models cached under .cache/models; the first cold
run trains them and takes on the order of an hour on one CPU core.
"""

import itertools
import math
import time

import numpy as np
import pytest

from conftest import E2E_GEN, SINGLE_GEN, val_scenes
from gridlang import tensor as T
from gridlang.codec import (CLASS_NAMES, BoxAnn, Vocabulary, discretize,
                            parse_response, serialize_box,
                            serialize_mask_request, undiscretize)
from gridlang.decode import decode_grid, decode_single, positive_rate
from gridlang.evalkit import (average_precision, box_iou, eval_depth_normals,
                              eval_detection, eval_refer, eval_semseg, nms)
from gridlang.model import GridSpec, Model, ModelConfig
from gridlang.retrieval import pixel_shuffle
from gridlang.synth import (DEPTH_MAX, DEPTH_MIN, GenParams, rle_decode,
                            rle_encode)
from gridlang.tensor import Tensor, cross_entropy, grad_check
from gridlang.train import assemble_batch, assign, compute_loss

VOCAB = Vocabulary()


def report(n: int, detail: str) -> None:
    print(f"\n[criterion {n}] PASS — {detail}")


# ---------------------------------------------------------------------------
# 1. mechanism equivalences
# ---------------------------------------------------------------------------

def shuffle_oracle(s):
    n2, hp, wp = s.shape
    n = int(round(math.sqrt(n2)))
    out = np.zeros((hp * n, wp * n), dtype=s.dtype)
    for c in range(n2):
        r, q = divmod(c, n)
        for y in range(hp):
            for x in range(wp):
                out[y * n + r, x * n + q] = s[c, y, x]
    return out


def test_criterion_1_mechanism_equivalences(detect_model):
    t0 = time.time()
    # pixel shuffle vs nested-loop oracle: exact
    for n, hp, wp in ((1, 8, 8), (2, 8, 8), (4, 8, 8), (5, 3, 7)):
        s = np.random.default_rng(n).normal(size=(n * n, hp, wp))
        np.testing.assert_array_equal(pixel_shuffle(s), shuffle_oracle(s))

    # indicator(s > 0) == sigmoid(s) > 0.5 for |s| > 1e-9
    ss = np.random.default_rng(0).uniform(-40, 40, size=5000)
    ss = ss[np.abs(ss) > 1e-9]
    assert ((ss > 0) == (1 / (1 + np.exp(-ss)) > 0.5)).all()

    # parallel grid decoding == independent per-grid greedy, token for token,
    # on >= 20 trained-model cases
    model = detect_model
    grid = GridSpec(4, 64, 64)
    prompt = VOCAB.encode_all(["detect"])
    cases = 0
    for scene in val_scenes(20, offset=900, gen=E2E_GEN):
        prefix = model.encode_prefix(prompt, scene.image)
        from gridlang.decode import beam_decode, greedy_decode_grid
        parallel = greedy_decode_grid(model, prefix, grid, max_len=24)
        for res in parallel:
            anchor = model.np_interpolate(model.np_anchor_features(prefix),
                                          grid,
                                          np.array([res.grid_index]))[0]
            solo = beam_decode(model, model.encode_prefix(prompt, scene.image),
                               anchor, beam_width=1, max_len=24)
            assert solo.tokens == res.tokens
        cases += 1
    elapsed = time.time() - t0
    assert cases >= 20
    assert elapsed < 60, f"criterion 1 took {elapsed:.1f}s"
    report(1, f"shuffle exact, indicator exact, {cases} parallel-decode "
              f"cases token-identical in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. numerical soundness
# ---------------------------------------------------------------------------

def test_criterion_2_gradient_checks():
    t0 = time.time()
    rng = np.random.default_rng(0)

    def t(*shape, scale=1.0):
        return Tensor(rng.normal(0, scale, size=shape))

    ops = {
        "add": (lambda x: (x + 2.0 * x).sum(), t(3, 4)),
        "mul": (lambda x: (x * x).mean(), t(3, 4)),
        "div": (lambda x: (x / (x * x + 2.0)).sum(), t(3, 4)),
        "pow": (lambda x: (x ** 3.0).sum(), t(3, 4)),
        "neg": (lambda x: (-x).sum(), t(3, 4)),
        "matmul": (lambda x, w=Tensor(rng.normal(size=(4, 2))):
                   (x @ w).sum(), t(3, 4)),
        "exp": (lambda x: x.exp().sum(), t(3, 4)),
        "log": (lambda x: (x * x + 0.5).log().sum(), t(3, 4)),
        "sqrt": (lambda x: (x * x + 1e-2).sqrt().sum(), t(3, 4)),
        "sigmoid": (lambda x: x.sigmoid().sum(), t(3, 4)),
        "tanh": (lambda x: x.tanh().sum(), t(3, 4)),
        "gelu": (lambda x: x.gelu().sum(), t(3, 4)),
        "softplus": (lambda x: x.softplus().sum(), t(3, 4)),
        "softmax": (lambda x: (x.softmax(axis=-1) * x).sum(), t(3, 4)),
        "reshape": (lambda x: (x.reshape(4, 3) ** 2.0).sum(), t(3, 4)),
        "transpose": (lambda x: (x.transpose(1, 0) * x.transpose(1, 0)).sum(),
                      t(3, 4)),
        "getitem": (lambda x: (x[1:, :2] ** 2.0).sum(), t(3, 4)),
        "take_rows": (lambda x: (x.take_rows(np.array([0, 2, 2])) ** 2.0).sum(),
                      t(3, 4)),
        "sum_axis": (lambda x: (x.sum(axis=0) ** 2.0).sum(), t(3, 4)),
        "mean_axis": (lambda x: (x.mean(axis=1) ** 2.0).sum(), t(3, 4)),
        "concat": (lambda x: (T.concat([x, x * 2.0], axis=0) ** 2.0).sum(),
                   t(3, 4)),
        "stack": (lambda x: (T.stack([x, x * 3.0]) ** 2.0).sum(), t(3, 4)),
        "cross_entropy": (lambda x: cross_entropy(x, np.array([1, 0, 3])),
                          t(3, 5)),
        "attention": (lambda x: T.masked_attention(
            x, x * 0.5, x + 0.1, np.zeros((1, 1, 4, 4), np.float32)).sum(),
            t(1, 2, 4, 6)),
    }
    for name, (fn, x) in ops.items():
        err = grad_check(fn, x)
        assert err < 1e-4, f"{name}: rel error {err}"

    # full forward + loss of a 1-layer model in float64
    from gridlang.synth import generate
    model = Model(ModelConfig(dim=16, layers=1, heads=2, mask_tokens_side=2),
                  VOCAB, seed=0).to_dtype(np.float64)
    sample = generate(2, GenParams(min_shapes=1, max_shapes=2))
    batch = assemble_batch(model, [sample], "instseg",
                           np.random.default_rng(0), GridSpec(2, 64, 64),
                           budget=2)
    loss, _ = compute_loss(model, batch)
    loss.backward()
    h = 1e-6
    checked = 0
    for pname, p in model.params.items():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for idx in rng.choice(flat.size, size=2, replace=False):
            keep = flat[idx]
            flat[idx] = keep + h
            hi = float(compute_loss(model, batch)[0].data)
            flat[idx] = keep - h
            lo = float(compute_loss(model, batch)[0].data)
            flat[idx] = keep
            num = (hi - lo) / (2 * h)
            denom = max(abs(num), abs(gflat[idx]))
            assert abs(num - gflat[idx]) < 1e-4 * denom + 1e-8, \
                f"{pname}[{idx}]: {gflat[idx]} vs {num}"
            checked += 1
    elapsed = time.time() - t0
    assert elapsed < 120, f"criterion 2 took {elapsed:.1f}s"
    report(2, f"{len(ops)} ops + {checked} full-model coordinates at "
              f"rel 1e-4 (64-bit) in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. combinatorial oracles
# ---------------------------------------------------------------------------

def test_criterion_3_combinatorial_oracles():
    rng = np.random.default_rng(0)
    grid = GridSpec(3, 64, 64)  # 9 grid points
    gc = grid.centers()
    trials = 0
    for n_obj in range(1, 7):
        for _ in range(5):
            objs = [BoxAnn(x, y, x, y, class_id=0)
                    for x, y in rng.uniform(0, 64, size=(n_obj, 2))]
            got = assign(objs, grid).cost
            centers = np.array([o.center for o in objs])
            best = min(
                sum(np.linalg.norm(centers[i] - gc[g])
                    for i, g in enumerate(perm))
                for perm in itertools.permutations(range(9), n_obj))
            assert abs(got - best) < 1e-9
            trials += 1

    # AP vs threshold-enumeration oracle on 50 random sets
    from test_evalkit import ap_reference, random_eval_set
    ap_checked = 0
    for trial in range(50):
        trng = np.random.default_rng(1000 + trial)
        dets, gts = random_eval_set(trng)
        if not any(gts):
            continue
        thr = float(trng.choice([0.5, 0.65, 0.8]))
        got = average_precision(dets, gts, iou_thresholds=[thr])[round(thr, 2)]
        want = ap_reference(dets, gts, thr)
        assert abs(got - want) < 1e-9
        ap_checked += 1

    # NMS vs O(n^2) oracle
    from test_evalkit import nms_reference, random_detections
    for trial in range(25):
        trng = np.random.default_rng(2000 + trial)
        dets = random_detections(trng, int(trng.integers(1, 40)))
        thr = float(trng.uniform(0.1, 0.9))
        got = nms(dets, thr)
        want = nms_reference(dets, thr)
        assert [d.score for d in got] == [d.score for d in want]
    report(3, f"Hungarian {trials} instances (≤6 obj × 9 grids), "
              f"AP {ap_checked} sets at 1e-9, NMS 25 sets vs O(n²) oracle")


# ---------------------------------------------------------------------------
# 4. codec round-trips
# ---------------------------------------------------------------------------

def test_criterion_4_codec_round_trips():
    # serialize -> parse identity over a coordinate lattice
    n_boxes = 0
    for x1 in range(0, 64, 9):
        for y1 in range(0, 64, 9):
            for dw in (1, 17, 33):
                x2 = min(x1 + dw, 64)
                y2 = min(y1 + dw + 3, 64)
                box = BoxAnn(float(x1), float(y1), float(x2), float(y2), 1)
                toks = serialize_box(box, "square", 64.0, 64.0, VOCAB)
                pred = parse_response(toks + [VOCAB.eos], 16, VOCAB)
                assert pred.kind == "box" and pred.class_id == 1
                assert pred.quant_box == (discretize(x1, 64.0),
                                          discretize(y1, 64.0),
                                          discretize(x2, 64.0),
                                          discretize(y2, 64.0))
                n_boxes += 1
    toks = serialize_mask_request("ring", 16, VOCAB) + [VOCAB.eos]
    pred = parse_response(toks, 16, VOCAB)
    assert pred.kind == "mask" and pred.mask_token_count == 16

    # discretization error <= 0.25 px at extent 448 (range [0, 896])
    vs = np.linspace(0.0, 448.0, 10_001)
    errs = [abs(undiscretize(discretize(v, 448.0), 448.0) - v) for v in vs]
    assert max(errs) <= 0.25
    assert discretize(448.0, 448.0) == 896 and discretize(0.0, 448.0) == 0

    # RLE round-trip exact on 500 random masks
    rng = np.random.default_rng(0)
    for _ in range(500):
        h, w = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        mask = rng.random((h, w)) < rng.random()
        np.testing.assert_array_equal(rle_decode(rle_encode(mask)), mask)
    report(4, f"{n_boxes} lattice boxes parsed back exactly, max "
              f"discretization error {max(errs):.4f} px ≤ 0.25 at extent 448, "
              f"500 RLE round-trips exact")


# ---------------------------------------------------------------------------
# 5. end-to-end desk-scale learning
# ---------------------------------------------------------------------------

def test_criterion_5_end_to_end_learning(detect_model, refer_model,
                                         semseg_model):
    refer = eval_refer(refer_model, val_scenes(500, gen=SINGLE_GEN))
    assert refer.miou >= 0.85, f"refer mIoU {refer.miou:.3f} < 0.85"

    det = eval_detection(detect_model, val_scenes(100, offset=600,
                                                  gen=E2E_GEN),
                         GridSpec(4, 64, 64))
    assert det.ap50 >= 0.80, f"AP@0.5 {det.ap50:.3f} < 0.80"

    sem = eval_semseg(semseg_model, val_scenes(100, offset=700, gen=E2E_GEN))
    assert sem.miou >= 0.80, f"semantic mIoU {sem.miou:.3f} < 0.80"
    report(5, f"refer mIoU {refer.miou:.3f} ≥ 0.85, detection AP@0.5 "
              f"{det.ap50:.3f} ≥ 0.80, semantic mIoU {sem.miou:.3f} ≥ 0.80")


# ---------------------------------------------------------------------------
# 6. mask-token-count trend
# ---------------------------------------------------------------------------

def test_criterion_6_mask_token_trend(masktoken_models):
    scenes = val_scenes(100, offset=800, gen=SINGLE_GEN)
    miou, throughput = {}, {}
    for side, model in sorted(masktoken_models.items()):
        rep = eval_refer(model, scenes)
        miou[side * side] = rep.miou
        throughput[side * side] = rep.extras["images_per_second"]
    assert miou[4] > miou[1], f"mIoU N²=4 {miou[4]:.3f} ≤ N²=1 {miou[1]:.3f}"
    assert miou[16] >= miou[4] - 0.01, \
        f"mIoU N²=16 {miou[16]:.3f} < N²=4 {miou[4]:.3f} - 0.01"
    assert throughput[1] > throughput[4] > throughput[16], \
        f"throughput not monotone: {throughput}"
    report(6, "mask mIoU " +
              " ".join(f"N²={k}:{miou[k]:.3f}" for k in (1, 4, 16)) +
              "; decode img/s " +
              " ".join(f"N²={k}:{throughput[k]:.2f}" for k in (1, 4, 16)))


# ---------------------------------------------------------------------------
# 7. beam-search positive-prediction trend
# ---------------------------------------------------------------------------

def test_criterion_7_beam_search_trend(strategy_models):
    model = strategy_models["baseline"]
    scenes = val_scenes(60, offset=600, gen=E2E_GEN)
    grid = GridSpec(4, 64, 64)
    greedy = eval_detection(model, scenes, grid, beam=1)
    beam3 = eval_detection(model, scenes, grid, beam=3)
    assert beam3.positive_prediction_rate > greedy.positive_prediction_rate, \
        (beam3.positive_prediction_rate, greedy.positive_prediction_rate)
    assert beam3.ap50 >= greedy.ap50 - 1e-12, (beam3.ap50, greedy.ap50)
    report(7, f"positive rate {greedy.positive_prediction_rate:.3f} → "
              f"{beam3.positive_prediction_rate:.3f} with B=3; AP@0.5 "
              f"{greedy.ap50:.3f} → {beam3.ap50:.3f}")


# ---------------------------------------------------------------------------
# 8. repeat-GT / copy-paste strategies
# ---------------------------------------------------------------------------

def test_criterion_8_advanced_strategies(strategy_models):
    scenes = val_scenes(80, offset=600, gen=E2E_GEN)
    grid = GridSpec(4, 64, 64)
    ap = {name: eval_detection(model, scenes, grid).ap50
          for name, model in strategy_models.items()}
    assert ap["repeat"] >= ap["baseline"] - 0.01, ap
    assert ap["copypaste"] >= ap["baseline"] - 0.01, ap
    assert ap["both"] > ap["baseline"], ap
    report(8, "AP@0.5 " + " ".join(f"{k}:{v:.3f}" for k, v in ap.items()))


# ---------------------------------------------------------------------------
# 9. depth / normal heads
# ---------------------------------------------------------------------------

def test_criterion_9_depth_normals(depthnorm_model):
    from gridlang.retrieval import predict_normals
    # unit-norm property, everywhere, within 1e-6 (mechanism-level)
    rng = np.random.default_rng(0)
    out = predict_normals(rng.normal(size=(3, 128)),
                          rng.normal(size=(8, 8, 128)), size=(64, 64))
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-6)

    metrics = eval_depth_normals(depthnorm_model,
                                 val_scenes(60, offset=850, gen=E2E_GEN))
    bound = 0.1 * (DEPTH_MAX - DEPTH_MIN)
    assert metrics["depth_rmse"] <= bound, metrics
    assert metrics["normal_mean_angle_deg"] <= 15.0, metrics
    report(9, f"depth RMSE {metrics['depth_rmse']:.4f} ≤ {bound:.3f}, "
              f"normal angle {metrics['normal_mean_angle_deg']:.2f}° ≤ 15°, "
              f"unit-norm within 1e-6")
