import numpy as np
import pytest

from ifadapter.layout import ValidationError
from ifadapter.text_encoder import TextEncoderConfig, ToyTextEncoder

COLORS = ["red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple", "white", "black"]
SHAPES = ["square", "circle", "triangle", "star", "ring", "cross", "heart", "diamond", "hexagon", "blob"]


@pytest.fixture(scope="module")
def enc():
    return ToyTextEncoder()


def test_tokenize_stable_and_normalized(enc):
    a = enc.tokenize("red circle")
    assert len(a) == 2
    assert a == ToyTextEncoder().tokenize("red circle")
    assert enc.tokenize("Red  CIRCLE") == a
    assert enc.tokenize("red, circle!") == a


def test_tokenize_truncates(enc):
    assert len(enc.tokenize(" ".join(f"w{i}" for i in range(40)))) == 16


@pytest.mark.parametrize("bad", ["", "   ", "?!"])
def test_empty_text_rejected(enc, bad):
    with pytest.raises(ValidationError):
        enc.tokenize(bad)


def test_encode_deterministic_and_shapes(enc):
    a = ToyTextEncoder().encode("a red circle")
    b = ToyTextEncoder().encode("a red circle")
    for k in a.tokens:
        assert a.tokens[k].tobytes() == b.tokens[k].tobytes()
        assert a.tokens[k].shape == (3, 64)
    assert a.eot.tobytes() == b.eot.tobytes()
    assert sorted(a.tokens) == [1, 2]


def test_single_word(enc):
    e = enc.encode("circle")
    assert e.token_count == 1 and np.isfinite(e.eot).all()


def test_eot_collisions_rare(enc):
    descs = [f"{c} {s}" for c in COLORS for s in SHAPES]
    assert len(descs) == 100
    eots = np.stack([enc.encode(d).eot for d in descs])
    collisions = sum(np.allclose(eots[i], eots[j], atol=1e-9) for i in range(100) for j in range(i))
    assert collisions / (100 * 99 / 2) < 0.01


def test_order_sensitive_deep_tokens(enc):
    a, b = enc.encode("red circle"), enc.encode("circle red")
    assert not np.allclose(a.tokens[2], b.tokens[2][::-1])
    assert not np.allclose(a.eot, b.eot)


def test_null_encoding(enc):
    n = enc.encode_null()
    assert n.token_count == 0 and n.tokens[2].shape == (0, 64)
    assert np.isfinite(n.eot).all()


def test_bad_taps():
    with pytest.raises(ValueError):
        ToyTextEncoder(TextEncoderConfig(taps=(3,)))
