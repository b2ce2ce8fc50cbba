import dataclasses
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pichain.chain import (
    Block,
    Chain,
    ChainError,
    ChainLoadError,
    append_block,
    dump_chain_text,
    encode_block_line,
    hash_header,
    load_chain,
    make_genesis,
    new_chain,
    persist_chain,
    tx_root,
    verify_chain,
)

from conftest import IMEI_A, IMEI_B, PHONE_A, PHONE_B, location_tx, register_tx

# Pinned on first run after checking the byte layout by hand against
# the documented field order and length prefixes.
GENESIS_DIGEST_FAMILY_1 = "53c304eba257190c168dbf9fa1368dfa8bf9707b84c9b23452da7e77e865bf31"

SUBMITTER = "ab" * 32


def build_chain(n_blocks: int, chain_id: str = "family-1") -> Chain:
    chain = new_chain(chain_id)
    chain = append_block(chain, [register_tx(SUBMITTER, IMEI_A, PHONE_A, 1000)], 1000)
    epoch = 2000
    for _ in range(n_blocks - 1):
        tx = location_tx(SUBMITTER, IMEI_A, PHONE_A, 10.5, 20.25, epoch)
        chain = append_block(chain, [tx], epoch)
        epoch += 30
    return chain


def test_hash_header_deterministic():
    a = make_genesis("family-1").header
    b = make_genesis("family-1").header
    assert hash_header(a) == hash_header(b)


def test_hash_header_nonce_sensitivity():
    header = make_genesis("family-1").header
    other = dataclasses.replace(header, nonce=1)
    assert hash_header(header) != hash_header(other)


def test_genesis_digest_pinned():
    assert hash_header(make_genesis("family-1").header).hex() == GENESIS_DIGEST_FAMILY_1


def test_genesis_conventions():
    block = make_genesis("family-1")
    assert block.header.index == 0
    assert block.header.prev_hash == bytes(32)
    assert block.header.prev_hash.hex() == "0" * 64
    assert block.header.timestamp == 0
    assert block.transactions == ()
    assert make_genesis("family-1") == block  # byte-identical construction


def test_genesis_rejects_empty_chain_id():
    with pytest.raises(ChainError):
        make_genesis("")


def test_append_links_to_genesis():
    chain = new_chain("family-1")
    tx = register_tx(SUBMITTER, IMEI_A, PHONE_A, 1000)
    chain = append_block(chain, [tx], 1000)
    assert chain.height == 1
    assert chain.blocks[1].header.prev_hash == hash_header(chain.blocks[0].header)


def test_append_three_then_verify():
    chain = build_chain(3)
    assert verify_chain(chain).ok


def test_append_rejects_empty_txs():
    chain = new_chain("family-1")
    with pytest.raises(ChainError):
        append_block(chain, [], 1000)


def test_append_validator_rejects():
    chain = new_chain("family-1")
    tx = register_tx(SUBMITTER, IMEI_A, PHONE_A, 1000)
    with pytest.raises(ChainError):
        append_block(chain, [tx], 1000, validator=lambda _: False)


def test_append_keeps_prior_blocks_untouched():
    chain = build_chain(4)
    before = [encode_block_line(b) for b in chain.blocks]
    extended = append_block(
        chain, [location_tx(SUBMITTER, IMEI_A, PHONE_A, 1.0, 1.0, 9000)], 9000
    )
    after = [encode_block_line(b) for b in extended.blocks[:-1]]
    assert before == after


def test_verify_detects_tampered_payload():
    chain = build_chain(4)
    victim = chain.blocks[2]
    tampered_tx = dataclasses.replace(victim.transactions[0], received_at=999999)
    tampered = Block(victim.header, (tampered_tx,))  # tx_root left stale
    bad = Chain(chain.chain_id, chain.blocks[:2] + (tampered,) + chain.blocks[3:])
    report = verify_chain(bad)
    assert not report.ok
    assert report.first_bad_index == 2


def test_verify_detects_rewritten_block_with_fresh_tx_root():
    chain = build_chain(4)
    victim = chain.blocks[2]
    new_tx = location_tx(SUBMITTER, IMEI_A, PHONE_A, 33.0, 44.0, 7777)
    rewritten_header = dataclasses.replace(victim.header, tx_root=tx_root((new_tx,)))
    rewritten = Block(rewritten_header, (new_tx,))
    bad = Chain(chain.chain_id, chain.blocks[:2] + (rewritten,) + chain.blocks[3:])
    report = verify_chain(bad)
    assert not report.ok
    assert report.first_bad_index == 3  # the broken link shows at the successor


def test_persist_load_round_trip(tmp_path):
    chain = build_chain(3)
    path = tmp_path / "chain.pichain"
    persist_chain(chain, str(path))
    assert load_chain(str(path)) == chain


def test_load_rejects_truncated_file(tmp_path):
    chain = build_chain(3)
    path = tmp_path / "chain.pichain"
    persist_chain(chain, str(path))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - len(blob) // 3])
    with pytest.raises(ChainLoadError):
        load_chain(str(path))


def test_load_rejects_edited_prev_hash_digit(tmp_path):
    chain = build_chain(3)
    path = tmp_path / "chain.pichain"
    persist_chain(chain, str(path))
    lines = path.read_text().splitlines()
    fields = lines[3].split("\t")  # block 2
    fields[1] = ("f" if fields[1][0] != "f" else "0") + fields[1][1:]
    lines[3] = "\t".join(fields)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ChainLoadError) as exc_info:
        load_chain(str(path))
    assert exc_info.value.first_bad_index == 2


def expected_bad_index(original: bytes, position: int) -> int:
    """Block index of the line holding `position`; the version line
    maps to 0 because the chain id is bound into the genesis root."""
    line = original[:position].count(b"\n")
    return max(line - 1, 0)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_any_single_byte_mutation_is_detected(tmp_path_factory, data):
    blob = dump_chain_text(build_chain(4)).encode()
    position = data.draw(st.integers(min_value=0, max_value=len(blob) - 1))
    new_byte = data.draw(st.integers(min_value=0, max_value=255))
    if new_byte == blob[position]:
        new_byte = (new_byte + 1) % 256
    mutated = blob[:position] + bytes([new_byte]) + blob[position + 1 :]
    path = tmp_path_factory.mktemp("mut") / "chain.pichain"
    path.write_bytes(mutated)
    with pytest.raises(ChainLoadError) as exc_info:
        load_chain(str(path))
    assert exc_info.value.first_bad_index == expected_bad_index(blob, position)


def test_verify_rejects_wrong_chain_id():
    chain = build_chain(2)
    renamed = Chain("family-2", chain.blocks)
    report = verify_chain(renamed)
    assert not report.ok and report.first_bad_index == 0
