import numpy as np
import pytest

from doremi3d.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
    state_digest,
)
from doremi3d.errors import FormatError


def sample_state():
    r = np.random.default_rng(0)
    return {"b.w": r.normal(size=(3, 2)), "a": r.normal(size=4), "s": np.array(2.5)}


def test_roundtrip_bit_exact(tmp_path):
    state = sample_state()
    digest = save_checkpoint(tmp_path / "x.ckpt", state, {"kind": "t", "n": 3})
    loaded, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert list(loaded) == list(state)
    for k in state:
        np.testing.assert_array_equal(loaded[k], state[k])
        assert loaded[k].shape == np.shape(state[k])
    assert meta == {"kind": "t", "n": 3}
    assert digest == save_checkpoint(tmp_path / "y.ckpt", state, {"n": 3, "kind": "t"})
    assert state_digest(state) == state_digest(dict(state))


def test_digest_sensitive_to_values():
    state = sample_state()
    other = {k: v.copy() for k, v in state.items()}
    other["a"][0] = np.nextafter(other["a"][0], 1.0)
    assert state_digest(state) != state_digest(other)


@pytest.mark.parametrize("mangle", [
    lambda raw: b"nope" + raw,
    lambda raw: raw[:-8],
    lambda raw: raw.split(b"\n")[0] + b"\n{broken\n",
    lambda raw: raw[:20],
])
def test_corrupt_inputs_rejected(mangle):
    with pytest.raises(FormatError):
        decode_checkpoint(mangle(encode_checkpoint(sample_state())))
