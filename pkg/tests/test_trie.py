import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from airchain.trie import (
    EMPTY_ROOT,
    NodeStore,
    StateTrie,
    TrieError,
    verify_proof,
)

HEX = "0123456789abcdef"


def rand_address(rng):
    return "".join(rng.choice(HEX) for _ in range(70))


@pytest.fixture()
def trie():
    return StateTrie(NodeStore())


def test_empty_root_is_sha512_of_nothing():
    assert EMPTY_ROOT.startswith("cf83e1357eefb8bd")


def test_set_then_get(trie):
    address = "616972" + "0" * 64
    root = trie.set(EMPTY_ROOT, address, b"value")
    assert trie.get(root, address) == b"value"


def test_get_on_empty_root_absent(trie, rng):
    assert trie.get(EMPTY_ROOT, rand_address(rng)) is None


def test_idempotent_set(trie, rng):
    address = rand_address(rng)
    root1 = trie.set(EMPTY_ROOT, address, b"v")
    root2 = trie.set(root1, address, b"v")
    assert root1 == root2


def test_malformed_addresses_rejected(trie):
    for bad in ("", "ab", "g" * 70, "A" * 70, "0" * 69, "0" * 71):
        with pytest.raises(TrieError):
            trie.get(EMPTY_ROOT, bad)
        with pytest.raises(TrieError):
            trie.set(EMPTY_ROOT, bad, b"v")


def test_write_order_independence_small(trie, rng):
    pairs = [(rand_address(rng), bytes([i])) for i in range(4)]
    roots = set()
    for perm in itertools.permutations(pairs):
        root = EMPTY_ROOT
        for address, value in perm:
            root = trie.set(root, address, value)
        roots.add(root)
    assert len(roots) == 1


def test_persistence_old_roots_still_readable(trie, rng):
    address_a, address_b = rand_address(rng), rand_address(rng)
    root1 = trie.set(EMPTY_ROOT, address_a, b"one")
    root2 = trie.set(root1, address_b, b"two")
    root3 = trie.set(root2, address_a, b"three")
    assert trie.get(root1, address_a) == b"one"
    assert trie.get(root1, address_b) is None
    assert trie.get(root2, address_a) == b"one"
    assert trie.get(root3, address_a) == b"three"
    assert trie.get(root3, address_b) == b"two"


def test_shadow_map_100_random_writes(trie, rng):
    shadow = {}
    root = EMPTY_ROOT
    for _ in range(100):
        address = rand_address(rng)
        value = rng.randbytes(rng.randint(0, 20))
        root = trie.set(root, address, value)
        shadow[address] = value
    for address, value in shadow.items():
        assert trie.get(root, address) == value
    assert dict(trie.items(root)) == shadow


def test_delete_restores_previous_root(trie, rng):
    base = EMPTY_ROOT
    for _ in range(5):
        base = trie.set(base, rand_address(rng), b"x")
    address = rand_address(rng)
    grown = trie.set(base, address, b"temp")
    assert trie.delete(grown, address) == base


def test_delete_absent_is_noop(trie, rng):
    root = trie.set(EMPTY_ROOT, rand_address(rng), b"v")
    assert trie.delete(root, rand_address(rng)) == root
    assert trie.delete(EMPTY_ROOT, rand_address(rng)) == EMPTY_ROOT


def test_interleaved_set_delete_matches_shadow(trie):
    rng = random.Random(77)
    addresses = [rand_address(rng) for _ in range(30)]
    shadow = {}
    root = EMPTY_ROOT
    for _ in range(400):
        address = rng.choice(addresses)
        if rng.random() < 0.4:
            root = trie.delete(root, address)
            shadow.pop(address, None)
        else:
            value = rng.randbytes(3)
            root = trie.set(root, address, value)
            shadow[address] = value
    assert dict(trie.items(root)) == shadow
    # deleting everything returns to the empty root
    for address in list(shadow):
        root = trie.delete(root, address)
    assert root == EMPTY_ROOT


def test_items_prefix_filter(trie, rng):
    a_air = "616972" + "1" * 64
    a_set = "000000" + "2" * 64
    root = trie.set(EMPTY_ROOT, a_air, b"air")
    root = trie.set(root, a_set, b"settings")
    assert dict(trie.items(root, "616972")) == {a_air: b"air"}
    assert dict(trie.items(root, "000000")) == {a_set: b"settings"}


def test_no_mutation_of_existing_nodes(trie, rng):
    roots = [EMPTY_ROOT]
    history = []
    for _ in range(30):
        address = rand_address(rng)
        value = rng.randbytes(4)
        roots.append(trie.set(roots[-1], address, value))
        history.append((roots[-2], address, value))
    # snapshots: every historical (root, address, value) still reads back
    for root, address, value in history:
        later = trie.set(root, address, value)
        assert trie.get(later, address) == value


def test_proofs_verify_and_fail_on_wrong_root(trie, rng):
    shadow = {}
    root = EMPTY_ROOT
    for _ in range(20):
        address = rand_address(rng)
        value = rng.randbytes(5)
        root = trie.set(root, address, value)
        shadow[address] = value
    other_root = trie.set(root, rand_address(rng), b"odd")
    for address, value in list(shadow.items())[:10]:
        proof = trie.prove(root, address)
        assert verify_proof(root, address, value, proof)
        assert not verify_proof(root, address, value + b"x", proof)
        assert not verify_proof(other_root, address, value, proof)
    absent = rand_address(rng)
    assert verify_proof(root, absent, None, trie.prove(root, absent))
    assert verify_proof(EMPTY_ROOT, absent, None, [])
    assert not verify_proof(EMPTY_ROOT, absent, b"v", [])


def test_proof_tampering_rejected(trie, rng):
    address = rand_address(rng)
    root = trie.set(EMPTY_ROOT, address, b"value")
    proof = trie.prove(root, address)
    truncated = proof[:-1]
    assert not verify_proof(root, address, b"value", truncated)
    twisted = list(proof)
    twisted[0] = twisted[0].replace(b"{", b" {", 1)
    assert not verify_proof(root, address, b"value", twisted)


def test_node_store_file_reload(tmp_path, rng):
    path = str(tmp_path / "state.dat")
    trie = StateTrie(NodeStore(path))
    shadow = {}
    root = EMPTY_ROOT
    for _ in range(25):
        address = rand_address(rng)
        value = rng.randbytes(6)
        root = trie.set(root, address, value)
        shadow[address] = value
    trie.store.flush()
    trie.store.close()

    reloaded = StateTrie(NodeStore(path))
    for address, value in shadow.items():
        assert reloaded.get(root, address) == value


def test_node_store_torn_tail_line_ignored(tmp_path, rng):
    path = str(tmp_path / "state.dat")
    trie = StateTrie(NodeStore(path))
    address = rand_address(rng)
    root = trie.set(EMPTY_ROOT, address, b"keep")
    trie.store.flush()
    trie.store.close()
    with open(path, "a") as fh:
        fh.write("deadbeef {\"c\":{\"0\"")  # crash mid-write
    reloaded = StateTrie(NodeStore(path))
    assert reloaded.get(root, address) == b"keep"


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.binary(min_size=1, max_size=4)), max_size=12))
def test_root_is_function_of_mapping(writes):
    trie = StateTrie(NodeStore())
    addresses = ["6169" + format(i, "02x") + f"{i:064x}" for i in range(16)]
    mapping = {}
    root = EMPTY_ROOT
    for index, value in writes:
        root = trie.set(root, addresses[index], value)
        mapping[addresses[index]] = value
    rebuilt = EMPTY_ROOT
    for address in sorted(mapping, reverse=True):
        rebuilt = trie.set(rebuilt, address, mapping[address])
    assert rebuilt == root
