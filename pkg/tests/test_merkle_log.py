import hashlib
import io
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctgossip.merkle_log import (
    EMPTY_ROOT,
    Ed25519Signer,
    ForkPolicy,
    HmacSigner,
    LogId,
    LogPolicy,
    MerkleLog,
    PolicyError,
    RangeError,
    UnknownBranchError,
    verify_consistency,
    verify_inclusion,
)
from oracles import mth


def leaves_for(n, seed=0):
    rng = random.Random(seed)
    return [rng.randbytes(rng.randint(0, 40)) for _ in range(n)]


def test_append_counts(log):
    assert log.append("main", b"a") == 1
    r1 = log.root_at("main", 1)
    assert log.append("main", b"b") == 2
    assert log.root_at("main", 1) == r1


def test_append_unknown_branch(log):
    with pytest.raises(UnknownBranchError):
        log.append("nope", b"x")


def test_eight_leaves_match_oracle(log):
    leaves = [b"d%d" % i for i in range(8)]
    log.extend("main", leaves)
    assert log.root_at("main", 8) == mth(leaves)


def test_root_small_cases(log):
    assert log.root_at("main", 0) == hashlib.sha256(b"").digest() == EMPTY_ROOT
    log.append("main", b"d0")
    assert log.root_at("main", 1) == hashlib.sha256(b"\x00d0").digest()
    with pytest.raises(RangeError):
        log.root_at("main", 2)
    with pytest.raises(RangeError):
        log.root_at("main", -1)


def test_random_sizes_match_oracle(log):
    leaves = leaves_for(256, seed=3)
    log.extend("main", leaves)
    rng = random.Random(11)
    for n in rng.sample(range(257), 40):
        assert log.root_at("main", n) == mth(leaves[:n])


def test_issue_sth_empty(signer, log):
    sth = log.issue_sth("main", 0)
    assert (sth.tree_size, sth.timestamp, sth.root_hash) == (0, 0, EMPTY_ROOT)
    assert sth.verify(signer)


def test_issue_sth_frequency_budget(log):
    hour = 3600 * 1000
    for i in range(24):
        log.issue_sth("main", i * hour // 2)
    with pytest.raises(PolicyError):
        log.issue_sth("main", 12 * hour)
    # window slides: 24h after the first issuance the budget frees up
    log.issue_sth("main", 24 * hour)


def test_issue_without_append_is_stable(log):
    log.extend("main", [b"x", b"y"])
    a = log.issue_sth("main", 1)
    b = log.issue_sth("main", 2)
    assert (a.tree_size, a.root_hash) == (b.tree_size, b.root_hash)
    assert a.timestamp != b.timestamp


def test_policy_validation():
    with pytest.raises(ValueError):
        LogPolicy(mmd_ms=0)
    with pytest.raises(ValueError):
        LogPolicy(sth_frequency=0)


def test_log_id_validation():
    with pytest.raises(ValueError):
        LogId(b"\x00" * 32, "Pilot")
    with pytest.raises(ValueError):
        LogId(b"\x00" * 31, "pilot")
    with pytest.raises(ValueError):
        LogId(b"\x00" * 32, "")


def test_distinct_logs_have_distinct_ids():
    a = MerkleLog("pilot", HmacSigner(b"k1"))
    b = MerkleLog("pilot", HmacSigner(b"k2"))
    assert a.log_id.id != b.log_id.id


def test_consistency_trivial_cases(log):
    log.extend("main", leaves_for(9))
    assert log.consistency_proof("main", 5, 5) == []
    assert log.consistency_proof("main", 0, 9) == []
    with pytest.raises(RangeError):
        log.consistency_proof("main", 6, 5)
    with pytest.raises(RangeError):
        log.consistency_proof("main", 2, 10)


def test_consistency_exhaustive_64(log):
    leaves = leaves_for(64, seed=5)
    log.extend("main", leaves)
    roots = [mth(leaves[:n]) for n in range(65)]
    for n in range(65):
        for m in range(n + 1):
            proof = log.consistency_proof("main", m, n)
            assert verify_consistency(roots[m], m, roots[n], n, proof), (m, n)


def test_inclusion_exhaustive_64(log):
    leaves = leaves_for(64, seed=6)
    log.extend("main", leaves)
    for n in range(1, 65):
        root = mth(leaves[:n])
        for i in range(n):
            proof = log.inclusion_proof("main", i, n)
            assert verify_inclusion(leaves[i], i, n, root, proof), (i, n)


def test_single_leaf_inclusion(log):
    log.append("main", b"only")
    assert log.inclusion_proof("main", 0, 1) == []
    assert verify_inclusion(b"only", 0, 1, hashlib.sha256(b"\x00only").digest(), [])


def test_inclusion_range_errors(log):
    log.extend("main", leaves_for(4))
    with pytest.raises(RangeError):
        log.inclusion_proof("main", 4, 4)
    with pytest.raises(RangeError):
        log.inclusion_proof("main", 0, 5)


def test_wrong_index_rejected(log):
    leaves = leaves_for(37, seed=8)
    log.extend("main", leaves)
    for n in (2, 5, 16, 37):
        root = log.root_at("main", n)
        for i in range(n):
            proof = log.inclusion_proof("main", i, n)
            assert not verify_inclusion(leaves[i], (i + 1) % n, n, root, proof)


def test_verify_consistency_equal_sizes():
    r = hashlib.sha256(b"r").digest()
    assert verify_consistency(r, 5, r, 5, [])
    assert not verify_consistency(r, 5, EMPTY_ROOT, 5, [])
    assert not verify_consistency(r, 5, EMPTY_ROOT, 5, [r])


def test_verify_malformed_inputs_return_false():
    r = hashlib.sha256(b"r").digest()
    assert not verify_consistency(r, 3, r, 2, [])
    assert not verify_consistency(b"short", 1, r, 2, [r])
    assert not verify_consistency(r, 1, r, 2, [b"x"])
    assert not verify_consistency(r, 1, r, 2, None)
    assert not verify_inclusion(b"x", 0, 2, r, [b"x" * 5])
    assert not verify_inclusion(b"x", -1, 2, r, [r])
    assert not verify_inclusion(None, 0, 2, r, [r])


def test_root_bit_flip_breaks_consistency(log):
    leaves = leaves_for(120, seed=9)
    log.extend("main", leaves)
    rng = random.Random(1)
    for _ in range(1000):
        n = rng.randint(2, 120)
        m = rng.randint(1, n - 1)
        old = bytearray(log.root_at("main", m))
        bit = rng.randrange(256)
        old[bit // 8] ^= 1 << (bit % 8)
        proof = log.consistency_proof("main", m, n)
        assert not verify_consistency(bytes(old), m, log.root_at("main", n), n, proof)


def test_fork_shares_prefix(log):
    log.extend("main", [b"c%d" % i for i in range(10)])
    log.fork("b", at=10)
    log.append("main", b"honest")
    log.append("b", b"evil")
    assert log.root_at("main", 10) == log.root_at("b", 10)
    assert log.root_at("main", 11) != log.root_at("b", 11)
    p = log.consistency_proof("b", 10, 11)
    assert verify_consistency(log.root_at("main", 10), 10, log.root_at("b", 11), 11, p)
    # branch b's size-11 head is not an extension of main's size-11 view
    assert not verify_consistency(log.root_at("main", 11), 11, log.root_at("b", 11), 11, [])


def test_serve_sth_honest_identical(log):
    log.extend("main", leaves_for(3))
    log.issue_sth("main", 5)
    policy = ForkPolicy()
    assert log.serve_sth(policy, "alice") == log.serve_sth(policy, "bob")


def test_serve_sth_fork_split_view(log):
    log.extend("main", leaves_for(10))
    log.fork("evil")
    log.append("main", b"a")
    log.append("evil", b"b")
    log.issue_sth("main", 1)
    log.issue_sth("evil", 1)
    policy = ForkPolicy("fork_by_client_class", {"victim": "evil", "monitor": "main"})
    v, m = log.serve_sth(policy, "victim"), log.serve_sth(policy, "monitor")
    assert v.tree_size == m.tree_size and v.root_hash != m.root_hash
    assert log.serve_sth(policy, "stranger") == m


def test_serve_sth_same_class_consistent(log):
    log.extend("main", leaves_for(4))
    log.fork("evil")
    policy = ForkPolicy("fork_by_client_class", {"victim": "evil"})
    log.append("evil", b"1")
    first = log.serve_sth(policy, "victim", now=10)
    log.extend("evil", [b"2", b"3"])
    log.issue_sth("evil", 20)
    second = log.serve_sth(policy, "victim")
    proof = log.consistency_proof("evil", first.tree_size, second.tree_size)
    assert verify_consistency(first.root_hash, first.tree_size,
                              second.root_hash, second.tree_size, proof)


def test_fork_policy_validation():
    with pytest.raises(ValueError):
        ForkPolicy("honest", {"x": "other"})
    with pytest.raises(ValueError):
        ForkPolicy("gossip")


def test_signature_binding(signer, log):
    log.extend("main", leaves_for(5))
    sth = log.issue_sth("main", 77)
    from dataclasses import replace
    assert not replace(sth, tree_size=4).verify(signer)
    assert not replace(sth, timestamp=78).verify(signer)
    assert not replace(sth, root_hash=bytes(32)).verify(signer)


def test_ed25519_signer_roundtrip():
    s = Ed25519Signer.from_seed(b"seed")
    assert Ed25519Signer.from_seed(b"seed").public_key == s.public_key
    log = MerkleLog("pilot", s)
    log.append("main", b"x")
    sth = log.issue_sth("main", 3)
    assert len(sth.signature) == 64
    assert sth.verify(s)
    assert not sth.verify(Ed25519Signer.from_seed(b"other"))


def test_export_load_roundtrip(signer, log):
    log.extend("main", leaves_for(12, seed=2))
    log.fork("b", at=7)
    log.extend("b", [b"x", b"y"])
    policy = ForkPolicy("fork_by_client_class", {"victim": "b"})
    buf = io.StringIO()
    log.export(buf, policy)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 1 + 12 + 2
    buf.seek(0)
    loaded, loaded_policy = MerkleLog.load(buf, signer)
    assert loaded_policy == policy
    assert loaded.log_id == log.log_id
    for view in ("main", "b"):
        assert loaded.leaves(view) == log.leaves(view)
        assert loaded.root_at(view, loaded.tree_size(view)) == log.root_at(view, log.tree_size(view))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.binary(max_size=16), max_size=40), st.data())
def test_append_only_property(leaves, data):
    log = MerkleLog("prop", HmacSigner(b"k"))
    seen = []
    for leaf in leaves:
        log.append("main", leaf)
        seen.append(log.root_at("main", log.tree_size("main")))
    n = len(leaves)
    m = data.draw(st.integers(0, n))
    proof = log.consistency_proof("main", m, n)
    assert verify_consistency(log.root_at("main", m), m, log.root_at("main", n), n, proof)
    # roots issued earlier never change
    assert [log.root_at("main", i + 1) for i in range(n)] == seen
