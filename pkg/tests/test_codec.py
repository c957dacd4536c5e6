import pytest
from hypothesis import given, strategies as st

from airchain.codec import CodecError, canonical_decode, canonical_encode, is_hex


def test_empty_record_is_two_bytes():
    assert canonical_encode({}) == b"{}"


def test_key_order_independence():
    assert canonical_encode({"b": 1, "a": "x"}) == canonical_encode({"a": "x", "b": 1})


def test_no_whitespace_sorted_keys():
    assert canonical_encode({"b": 1, "a": [2, {"z": "y"}]}) == b'{"a":[2,{"z":"y"}],"b":1}'


def test_bytes_render_as_lowercase_hex():
    assert canonical_encode({"k": b"\xab\xcd"}) == b'{"k":"abcd"}'


@pytest.mark.parametrize("bad", [1.5, None, True, {1: "x"}, {"k": {"v": 2.0}}, object()])
def test_unsupported_kinds_rejected(bad):
    with pytest.raises(CodecError):
        canonical_encode({"k": bad} if not isinstance(bad, dict) else bad)


def test_decode_rejects_floats_and_constants():
    with pytest.raises(CodecError):
        canonical_decode(b'{"a":1.5}')
    with pytest.raises(CodecError):
        canonical_decode(b'{"a":NaN}')
    with pytest.raises(CodecError):
        canonical_decode(b'{"a":true}')
    with pytest.raises(CodecError):
        canonical_decode(b'{"a":null}')


def test_decode_rejects_garbage():
    with pytest.raises(CodecError):
        canonical_decode(b"not json")
    with pytest.raises(CodecError):
        canonical_decode(b'["top","level","list"]')
    with pytest.raises(CodecError):
        canonical_decode(b"\xff\xfe")


_scalars = st.one_of(
    st.integers(min_value=-(10**12), max_value=10**12),
    st.text(max_size=20),
    st.binary(max_size=16),
)
_values = st.recursive(
    _scalars,
    lambda inner: st.one_of(
        st.lists(inner, max_size=4),
        st.dictionaries(st.text(max_size=8), inner, max_size=4),
    ),
    max_leaves=12,
)
_records = st.dictionaries(st.text(max_size=8), _values, max_size=6)


@given(_records)
def test_encode_decode_encode_roundtrip(record):
    once = canonical_encode(record)
    assert canonical_encode(canonical_decode(once)) == once


@given(_records)
def test_encoding_is_deterministic_under_key_insertion_order(record):
    reversed_record = dict(reversed(list(record.items())))
    assert canonical_encode(record) == canonical_encode(reversed_record)


def test_is_hex():
    assert is_hex("00ff", 4)
    assert not is_hex("00fF", 4)
    assert not is_hex("0f", 4)
    assert not is_hex("xyz")
    assert not is_hex("abc")  # odd length
