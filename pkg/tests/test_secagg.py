import logging
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fairfed.secagg import (
    FixedPointCodec, MaskedShare, MissingShareError, PairwiseKeys, RoundTagMismatchError,
    SecAggError, SecureAggregator, SumServer, Transcript, decode_frame, encode_frame, mask,
    privacy_audit, secure_sum, submit_share,
)

CODEC = FixedPointCodec()
MOD = 1 << 64


def exact_sum(vectors):
    """Decoded ring sum computed with Python integers."""
    scale = 1 << 24
    total = [0] * len(vectors[0])
    for v in vectors:
        for i, x in enumerate(v):
            total[i] = (total[i] + round(x * scale)) % MOD
    return [(t - MOD if t >= MOD // 2 else t) / scale for t in total]


def shares_for(vectors, tag=7, session=123):
    keys = PairwiseKeys(session, tuple(range(len(vectors))))
    return [mask(v, k, tag, keys) for k, v in enumerate(vectors)], keys


def test_single_client_share_is_plain_encoding():
    keys = PairwiseKeys(1, (0,))
    share = mask([1.25, -3.0], 0, 5, keys)
    assert np.array_equal(share.elements, CODEC.encode([1.25, -3.0]))


def test_two_client_masks_cancel():
    (s0, s1), keys = shares_for([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    with np.errstate(over="ignore"):
        assert np.array_equal(s0.elements + s1.elements, np.zeros(3, dtype=np.uint64))
    assert s0.elements.any()


def test_three_clients_sum_example():
    shares, keys = shares_for([[1.5], [-0.5], [2.0]])
    assert secure_sum(shares, clients=keys.clients).tolist() == [3.0]


def test_hundred_vectors_against_exact_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        vectors = rng.normal(0, 50, size=(5, 6)).tolist()
        shares, keys = shares_for(vectors, tag=int(rng.integers(0, 1000)))
        got = secure_sum(shares, clients=keys.clients)
        assert got.tolist() == exact_sum(vectors)
        assert np.all(np.abs(got - np.sum(vectors, axis=0)) <= 5 * 2.0 ** -25)


def test_missing_share_is_an_error():
    shares, keys = shares_for([[1.0], [2.0], [3.0]])
    with pytest.raises(MissingShareError):
        secure_sum(shares[:2], clients=keys.clients)
    with pytest.raises(MissingShareError):
        secure_sum([])


def test_round_tag_mismatch():
    shares, keys = shares_for([[1.0], [2.0]], tag=1)
    other, _ = shares_for([[1.0], [2.0]], tag=2)
    with pytest.raises(RoundTagMismatchError):
        secure_sum([shares[0], other[1]], clients=keys.clients)
    with pytest.raises(RoundTagMismatchError):
        secure_sum(shares, clients=keys.clients, round_tag=2)


def test_duplicate_and_unregistered_shares():
    shares, keys = shares_for([[1.0], [2.0]])
    with pytest.raises(SecAggError):
        secure_sum([shares[0], shares[0], shares[1]], clients=keys.clients)
    with pytest.raises(SecAggError):
        secure_sum(shares, clients=(0,))
    with pytest.raises(ValueError):
        mask([1.0], 9, 0, keys)
    with pytest.raises(ValueError):
        PairwiseKeys(0, (1, 1))


@given(vectors=st.lists(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3),
                        min_size=2, max_size=6),
       s1=st.integers(0, 2**63), s2=st.integers(0, 2**63), tag=st.integers(0, 2**20))
def test_session_seed_changes_shares_not_sum(vectors, s1, s2, tag):
    a, ka = shares_for(vectors, tag, s1)
    b, kb = shares_for(vectors, tag, s2)
    sa = secure_sum(a, clients=ka.clients)
    sb = secure_sum(b, clients=kb.clients)
    assert sa.tobytes() == sb.tobytes()
    assert sa.tolist() == exact_sum(vectors)
    if s1 != s2:
        assert not np.array_equal(a[0].elements, b[0].elements)


@given(x=st.floats(-(2.0 ** 30), 2.0 ** 30))
def test_codec_round_trip(x):
    assert abs(CODEC.quantize([x])[0] - x) <= 2.0 ** -24


def test_codec_saturates_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="fairfed.secagg"):
        out = CODEC.quantize([2.0 ** 31, -(2.0 ** 31), 1.0])
    assert out.tolist() == [2.0 ** 30, -(2.0 ** 30), 1.0]
    assert "saturating 2 values" in caplog.text
    with pytest.raises(ValueError):
        CODEC.encode([np.nan])


def test_frame_round_trip():
    share = MaskedShare(3, 99, np.array([0, 1, 2**64 - 1], dtype=np.uint64))
    again = decode_frame(encode_frame(share))
    assert (again.client_id, again.round_tag) == (3, 99)
    assert np.array_equal(again.elements, share.elements)
    with pytest.raises(SecAggError):
        decode_frame(encode_frame(share)[:-1])
    with pytest.raises(SecAggError):
        decode_frame(b"\x00")


def test_socket_sum_server():
    vectors = [[1.5, 0.25], [-0.5, 1.0], [2.0, -4.0]]
    shares, keys = shares_for(vectors)
    server = SumServer(("127.0.0.1", 0), keys.clients)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        results = [None] * 3

        def send(k):
            results[k] = submit_share(server.server_address, shares[k], timeout=10)

        workers = [threading.Thread(target=send, args=(k,)) for k in range(3)]
        for w in workers:
            w.start()
        for w in workers:
            w.join(15)
    finally:
        server.shutdown()
        server.server_close()
    for r in results:
        assert CODEC.decode(r).tolist() == [3.0, -2.75]


# -- audit ------------------------------------------------------------------------------


def _session_transcript(n_rounds=3, k=5, d=500, seed=0):
    transcript = Transcript()
    agg = SecureAggregator(seed, transcript=transcript)
    rng = np.random.default_rng(seed)
    for t in range(n_rounds):
        agg.sum({c: rng.normal(size=d) for c in range(k)}, t << 3)
    return transcript


def test_audit_passes_clean_transcript():
    report = privacy_audit(_session_transcript())
    assert report.passed, report.findings
    assert report.n_shares == 15 and report.n_aggregates == 3
    assert report.uniformity_pvalue is not None and report.uniformity_pvalue > 0.01


def test_audit_flags_raw_plaintext():
    transcript = _session_transcript(n_rounds=1)
    transcript.record_raw(2, 0, [0.1, 0.2])
    report = privacy_audit(transcript)
    assert not report.passed
    assert any("unmasked raw" in f for f in report.findings)


def test_audit_flags_unmasked_share():
    transcript = _session_transcript(n_rounds=1)
    plain = transcript.private_inputs[(0, 1)]
    msg = next(m for m in transcript.messages if m.get("client") == 1)
    msg["elements"] = CODEC.encode(plain)
    report = privacy_audit(transcript)
    assert not report.passed
    assert any("client 1" in f for f in report.findings)


def test_masked_shares_look_uniform():
    transcript = _session_transcript(n_rounds=1, k=2, d=10_000, seed=3)
    report = privacy_audit(transcript)
    assert report.uniformity_pvalue > 0.01


def test_aggregator_returns_plain_sum():
    agg = SecureAggregator(5)
    out = agg.sum({0: [1.5], 4: [-0.5], 9: [2.0]}, 8)
    assert out.tolist() == [3.0]
