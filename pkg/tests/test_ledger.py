import json
import pathlib
import random

import pytest

from airchain import ledger
from airchain.codec import canonical_encode
from airchain.crypto import sha512_digest
from airchain.txfamily import encode_reading
from conftest import make_reading, random_reading

FIXTURES = json.loads(
    (pathlib.Path(__file__).parent / "fixtures" / "golden.json").read_text()
)


def build_sample_batch(signer, rng=None, count=3):
    rng = rng or random.Random(0)
    txns = [
        ledger.build_transaction(
            encode_reading(random_reading(rng, signer)), "airquality", signer, rng=rng
        )
        for _ in range(count)
    ]
    return ledger.build_batch(txns, signer)


def test_built_transaction_payload_digest(signer):
    payload = b"payload-bytes"
    txn = ledger.build_transaction(payload, "airquality", signer)
    assert txn.header.payload_sha512 == sha512_digest(payload)
    assert txn.header.family_name == "airquality"
    assert txn.id == txn.header_signature


def test_batch_lists_transaction_ids_in_order(signer):
    batch = build_sample_batch(signer, count=3)
    assert batch.header.transaction_ids == tuple(t.header_signature for t in batch.transactions)
    assert len(batch.header.transaction_ids) == 3


def test_empty_inputs_rejected(signer):
    with pytest.raises(ledger.LedgerError):
        ledger.build_transaction(b"", "airquality", signer)
    with pytest.raises(ledger.LedgerError):
        ledger.build_batch([], signer)


def test_validate_batch_ok_for_random_builds(signer, rng):
    for _ in range(25):
        batch = build_sample_batch(signer, rng=rng, count=rng.randint(1, 4))
        assert ledger.validate_batch(batch) == []


def test_payload_mutation_detected(signer):
    batch = build_sample_batch(signer, count=1)
    txn = batch.transactions[0]
    mutated = ledger.Transaction(txn.header, txn.header_signature, txn.payload + b"x")
    bad = ledger.Batch(batch.header, batch.header_signature, (mutated,))
    violations = ledger.validate_batch(bad)
    assert any("payload digest mismatch" in v for v in violations)


def test_transaction_id_reorder_detected(signer):
    batch = build_sample_batch(signer, count=3)
    reordered = ledger.Batch(
        batch.header,
        batch.header_signature,
        (batch.transactions[1], batch.transactions[0], batch.transactions[2]),
    )
    violations = ledger.validate_batch(reordered)
    assert any("id list mismatch" in v for v in violations)


def test_signature_tamper_detected(signer):
    batch = build_sample_batch(signer, count=1)
    bad_sig = ("0" if batch.header_signature[0] != "0" else "1") + batch.header_signature[1:]
    bad = ledger.Batch(batch.header, bad_sig, batch.transactions)
    violations = ledger.validate_batch(bad)
    assert any("header signature invalid" in v for v in violations)


def test_single_field_mutations_all_detected(signer, rng):
    batch = build_sample_batch(signer, count=2)
    rec = batch.to_record()

    def rebuild(mutate):
        import copy

        twisted = copy.deepcopy(rec)
        mutate(twisted)
        return ledger.Batch.from_record(twisted)

    mutations = [
        lambda r: r["header"].__setitem__("signer_public_key", "02" + "11" * 32),
        lambda r: r["header"]["transaction_ids"].reverse(),
        lambda r: r["transactions"][0]["header"].__setitem__("nonce", "00" * 16),
        lambda r: r["transactions"][1].__setitem__("payload", b"changed".hex()),
        lambda r: r["transactions"][0]["header"].__setitem__("family_name", "other"),
    ]
    for mutate in mutations:
        assert ledger.validate_batch(rebuild(mutate)) != []


def test_batch_wire_roundtrip(signer):
    batch = build_sample_batch(signer, count=2)
    data = ledger.encode_batch_list([batch])
    decoded = ledger.decode_batch_list(data)
    assert len(decoded) == 1
    assert decoded[0].id == batch.id
    assert decoded[0].encode() == batch.encode()


def test_block_roundtrip_and_id(signer):
    batch = build_sample_batch(signer, count=1)
    block = ledger.build_block(0, ledger.GENESIS_PREVIOUS, [batch], sha512_digest(b"r"), signer)
    assert block.id == sha512_digest(block.header.encode())
    again = ledger.Block.decode(block.encode())
    assert again.id == block.id
    assert ledger.validate_block_structure(again) == []


def test_block_structure_violations(signer):
    batch = build_sample_batch(signer, count=1)
    block = ledger.build_block(2, "ab" * 64, [batch], sha512_digest(b"r"), signer)
    missing_batch = ledger.Block(block.header, block.header_signature, ())
    violations = ledger.validate_block_structure(missing_batch)
    assert any("batch id list mismatch" in v for v in violations)


# --- golden fixtures: stability across processes and platforms ---


def test_golden_canonical_encodings():
    for case in FIXTURES["canonical"]:
        assert canonical_encode(case["record"]).decode() == case["encoded"]


def test_golden_sha512():
    assert sha512_digest(b"") == FIXTURES["sha512"]["empty"]
    assert sha512_digest(b"abc") == FIXTURES["sha512"]["abc"]


def test_golden_block_and_signatures(signer):
    assert signer.public_key == FIXTURES["signer_public_key"]
    payload = FIXTURES["reading_payload"].encode()
    assert sha512_digest(payload) == FIXTURES["reading_payload_sha512"]

    header = ledger.TransactionHeader.from_record(FIXTURES["transaction_header"])
    from airchain.crypto import sign, verify

    assert sign(header.encode(), signer) == FIXTURES["transaction_signature"]
    assert verify(header.encode(), FIXTURES["transaction_signature"], signer.public_key)

    block_header_bytes = FIXTURES["block_header_encoding"].encode()
    assert sha512_digest(block_header_bytes) == FIXTURES["block_id"]
