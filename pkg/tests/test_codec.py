"""Token codec: vocabulary, discretization bounds, serialize/parse loops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridlang.codec import (CLASS_NAMES, BadMaskCount, BoxAnn, MalformedBox,
                            OutOfBounds, UnknownClass, Vocabulary, discretize,
                            parse_response, serialize_box,
                            serialize_mask_request, undiscretize)

VOCAB = Vocabulary()


class TestVocabulary:
    def test_bijection(self):
        assert len(set(VOCAB.tokens)) == len(VOCAB)
        for i, tok in enumerate(VOCAB.tokens):
            assert VOCAB.encode(tok) == i
            assert VOCAB.decode([i]) == [tok]

    def test_specials_come_first(self):
        assert VOCAB.tokens[0] == "<PAD>"
        assert VOCAB.pad == 0
        assert VOCAB.tokens[VOCAB.eos] == "<EOS>"

    def test_unknown_token_raises(self):
        with pytest.raises(KeyError):
            VOCAB.encode("walrus")

    def test_save_load_identity(self, tmp_path):
        path = tmp_path / "vocab.txt"
        VOCAB.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.tokens == VOCAB.tokens

    def test_missing_special_rejected(self):
        with pytest.raises(ValueError):
            Vocabulary(["a", "b"])

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            Vocabulary(VOCAB.tokens + ["circle"])


class TestDiscretization:
    @given(st.floats(0.0, 448.0))
    @settings(max_examples=300, deadline=None)
    def test_error_bound_quarter_pixel(self, v):
        # extent 448 with 896 bins: reconstruction error at most 0.25
        q = discretize(v, 448.0)
        assert 0 <= q <= 896
        assert abs(undiscretize(q, 448.0) - v) <= 0.25 + 1e-9

    def test_endpoints(self):
        assert discretize(0.0, 64.0) == 0
        assert discretize(64.0, 64.0) == 128
        assert undiscretize(128, 64.0) == 64.0

    def test_out_of_bounds(self):
        with pytest.raises(OutOfBounds):
            discretize(-0.5, 64.0)
        with pytest.raises(OutOfBounds):
            discretize(65.0, 64.0)

    def test_tolerates_tiny_negative_noise(self):
        assert discretize(-1e-8, 64.0) == 0

    def test_round_half_up(self):
        # bin width is extent/(2*extent) = 0.5; value 0.25 sits exactly on
        # the boundary and rounds up
        assert discretize(0.25, 64.0) == 1


class TestBoxRoundTrip:
    def test_lattice_identity(self):
        vocab = VOCAB
        for x1 in (0.0, 3.5, 17.0):
            for y1 in (0.0, 8.25, 30.0):
                for dw in (1.0, 11.5, 33.0):
                    box = BoxAnn(x1, y1, min(x1 + dw, 64.0),
                                 min(y1 + dw / 2, 64.0), class_id=2)
                    seq = serialize_box(box, "triangle", 64.0, 64.0, vocab)
                    pred = parse_response(seq + [vocab.eos], 0, vocab)
                    assert pred.kind == "box"
                    assert pred.class_id == 2
                    qx1, qy1, qx2, qy2 = pred.quant_box
                    assert qx1 == discretize(box.x1, 64.0)
                    assert qy2 == discretize(box.y2, 64.0)

    @given(st.floats(0, 64), st.floats(0, 64), st.floats(0, 64),
           st.floats(0, 64), st.integers(0, len(CLASS_NAMES) - 1))
    @settings(max_examples=100, deadline=None)
    def test_serialize_always_parseable(self, a, b, c, d, cid):
        box = BoxAnn(min(a, c), min(b, d), max(a, c), max(b, d), cid)
        seq = serialize_box(box, CLASS_NAMES[cid], 64.0, 64.0, VOCAB)
        pred = parse_response(seq + [VOCAB.eos], 0, VOCAB)
        assert pred.kind == "box" and pred.class_id == cid

    def test_unknown_class_rejected(self):
        with pytest.raises(UnknownClass):
            serialize_box(BoxAnn(0, 0, 1, 1, 0), "red", 64.0, 64.0, VOCAB)


class TestMaskRequests:
    def test_round_trip(self):
        seq = serialize_mask_request("ring", 16, VOCAB) + [VOCAB.eos]
        pred = parse_response(seq, 16, VOCAB)
        assert pred.kind == "mask"
        assert pred.mask_token_count == 16
        assert pred.mask_positions == list(range(2, 18))

    def test_wrong_count_raises(self):
        seq = serialize_mask_request("ring", 15, VOCAB) + [VOCAB.eos]
        with pytest.raises(BadMaskCount):
            parse_response(seq, 16, VOCAB)


class TestParseErrors:
    def test_empty_and_eos_first(self):
        assert parse_response([], 0, VOCAB).kind == "empty"
        assert parse_response([VOCAB.eos], 0, VOCAB).kind == "empty"

    def test_nothing_past_eos_is_inspected(self):
        garbage = [VOCAB.eos, 9999 % len(VOCAB), VOCAB.box_open]
        assert parse_response(garbage, 0, VOCAB).kind == "empty"

    def test_non_class_first_token(self):
        with pytest.raises(UnknownClass) as e:
            parse_response([VOCAB.encode("red")], 0, VOCAB)
        assert e.value.index == 0

    def test_missing_comma(self):
        seq = [VOCAB.encode("circle"), VOCAB.box_open]
        with pytest.raises(MalformedBox) as e:
            parse_response(seq, 0, VOCAB)
        assert e.value.index == 1

    def test_truncated_box(self):
        seq = serialize_box(BoxAnn(1, 2, 3, 4, 0), "circle", 64.0, 64.0,
                            VOCAB)[:-2]
        with pytest.raises(MalformedBox):
            parse_response(seq + [VOCAB.eos], 0, VOCAB)

    def test_missing_eos_after_box(self):
        seq = serialize_box(BoxAnn(1, 2, 3, 4, 0), "circle", 64.0, 64.0, VOCAB)
        with pytest.raises(MalformedBox):
            parse_response(seq, 0, VOCAB)  # nothing after </box>

    def test_error_carries_token_index(self):
        seq = [VOCAB.encode("circle"), VOCAB.comma, VOCAB.box_close]
        with pytest.raises(MalformedBox) as e:
            parse_response(seq, 0, VOCAB)
        assert e.value.index == 2
