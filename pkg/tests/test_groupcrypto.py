import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumblesim.groupcrypto import (
    SECP256K1,
    TINY,
    Ciphertext,
    IntegrityFailure,
    InvalidEncoding,
    KeyPair,
    PayloadTooLong,
    Signature,
    ciphertext_size,
    derive_sig_keypair,
    derive_sig_pk,
    hash_to_scalar,
    keygen,
    pke_decrypt,
    pke_encrypt,
    scalar_from_bytes,
    scalar_to_bytes,
    sign,
    signature_size,
    verify,
)

from .oracles import G, P, Q, dlog, h2s, tiny_decrypt, tiny_int

GROUPS = [SECP256K1, TINY]


def flip(data: bytes, i: int, bit: int = 0) -> bytes:
    return data[:i] + bytes([data[i] ^ (1 << bit)]) + data[i + 1 :]


# -- keys ---------------------------------------------------------------------


@pytest.mark.parametrize("group", GROUPS, ids=lambda g: g.name)
def test_keygen_is_deterministic_per_seed(group):
    a = keygen(random.Random(1), group)
    b = keygen(random.Random(1), group)
    assert a == b
    assert a.pk == group.base_mul(a.sk)


@pytest.mark.parametrize("group", GROUPS, ids=lambda g: g.name)
def test_keygen_distinct_seeds_give_distinct_keys(group):
    assert keygen(random.Random(1), group).sk != keygen(random.Random(2), group).sk


def test_tiny_public_key_matches_brute_force_exponent():
    for seed in range(5):
        kp = keygen(random.Random(seed), TINY)
        assert 1 <= kp.sk < Q
        assert dlog(tiny_int(kp.pk)) == kp.sk


def test_secp256k1_generator_is_the_standard_point():
    # compressed encoding of the standard base point
    assert SECP256K1.generator().hex() == (
        "0279be667ef9dcbbac55a06295ce870b07029bfcdb2dce28d959f2815b16f81798"
    )


def test_tiny_parameters():
    assert pow(G, Q, P) == 1 and G != 1
    assert (P - 1) % Q == 0
    assert TINY.element_size == 8


# -- hashing ------------------------------------------------------------------


def test_hash_to_scalar_frozen_values():
    assert hash_to_scalar(b"", SECP256K1) == 0xD0470BECF2CB130FA26360098C7C5DA11EE043CE02CB80314BADE1AB66876F01
    assert hash_to_scalar(b"\x00", SECP256K1) == 0x13CF0F29E30DF98A87939BDC2C496F64A5D37E6B972A1385084CC60A198F70EB
    assert hash_to_scalar(b"", TINY) == 1738692692


def test_hash_to_scalar_distinct_and_deterministic():
    assert hash_to_scalar(b"") != hash_to_scalar(b"\x00")
    assert hash_to_scalar(b"abc") == hash_to_scalar(b"abc")


@settings(max_examples=1000, deadline=None)
@given(st.binary(max_size=64))
def test_hash_to_scalar_matches_oracle_and_is_reduced(data):
    for group in GROUPS:
        s = hash_to_scalar(data, group)
        assert 0 <= s < group.order
        assert s == h2s(data, b"tumbler/r", group.order)


# -- derived signing keys -----------------------------------------------------


def test_derived_key_equation_on_tiny_group():
    enc = keygen(random.Random(9), TINY)
    cid = bytes(range(32))
    r = h2s(cid + enc.pk.data, b"tumbler/r", Q)
    sig = derive_sig_keypair(cid, enc)
    assert sig.sk == (enc.sk + r) % Q
    assert tiny_int(sig.pk) == tiny_int(enc.pk) * pow(G, r, P) % P
    assert tiny_int(sig.pk) == pow(G, enc.sk + r, P)


def test_third_party_derives_the_same_signing_key(rng):
    enc = keygen(rng)
    cid = rng.randbytes(32)
    assert derive_sig_pk(cid, enc.pk) == derive_sig_keypair(cid, enc).pk


def test_distinct_channels_give_distinct_signing_keys(rng):
    enc = keygen(rng)
    assert derive_sig_pk(b"\x01" * 32, enc.pk) != derive_sig_pk(b"\x02" * 32, enc.pk)


@settings(max_examples=1000, deadline=None)
@given(st.integers(min_value=1, max_value=SECP256K1.order - 1), st.binary(min_size=32, max_size=32))
def test_derived_key_equation_holds_exactly(x, cid):
    enc = KeyPair(x, SECP256K1.base_mul(x))
    r = h2s(cid + enc.pk.data, b"tumbler/r", SECP256K1.order)
    kp = derive_sig_keypair(cid, enc)
    assert kp.pk == enc.pk * SECP256K1.base_mul(r)
    assert kp.pk == SECP256K1.base_mul(kp.sk)


def test_sign_verify_under_derived_keys(rng):
    kp = derive_sig_keypair(rng.randbytes(32), keygen(rng))
    assert verify(kp.pk, b"payout", sign(kp.sk, b"payout"))


# -- encryption ---------------------------------------------------------------


@settings(max_examples=1000, deadline=None)
@given(st.integers(min_value=0, max_value=2**32), st.binary(max_size=256))
def test_pke_roundtrip(seed, payload):
    rng = random.Random(seed)
    group = GROUPS[seed % 2]
    kp = keygen(rng, group)
    ct = pke_encrypt(kp.pk, payload, rng)
    assert len(ct.to_bytes()) == ciphertext_size(len(payload), group)
    assert pke_decrypt(kp.sk, ct, group) == payload
    assert pke_decrypt(kp.sk, ct.to_bytes(), group) == payload


def test_tiny_ciphertext_opens_with_independent_decryptor(rng):
    kp = keygen(rng, TINY)
    ct = pke_encrypt(kp.pk, b"destination-bytes", rng)
    assert tiny_decrypt(kp.sk, ct.to_bytes()) == b"destination-bytes"


@pytest.mark.parametrize("group", GROUPS, ids=lambda g: g.name)
def test_wrong_key_fails_integrity(group, rng):
    a, b = keygen(rng, group), keygen(rng, group)
    ct = pke_encrypt(a.pk, b"hello", rng)
    with pytest.raises(IntegrityFailure):
        pke_decrypt(b.sk, ct, group)


@pytest.mark.parametrize("group", GROUPS, ids=lambda g: g.name)
def test_tampering_fails_integrity(group, rng):
    kp = keygen(rng, group)
    raw = pke_encrypt(kp.pk, b"some payload", rng).to_bytes()
    e = group.element_size
    for i in (e + 4, len(raw) - 1, e - 1, 1):  # body, tag, ephemeral bytes
        with pytest.raises(IntegrityFailure):
            pke_decrypt(kp.sk, flip(raw, i), group)


def test_encryption_is_randomized(rng):
    kp = keygen(rng)
    assert pke_encrypt(kp.pk, b"m", rng) != pke_encrypt(kp.pk, b"m", rng)


def test_payload_limit(rng):
    kp = keygen(rng)
    pke_encrypt(kp.pk, bytes(4096), rng)
    with pytest.raises(PayloadTooLong):
        pke_encrypt(kp.pk, bytes(4097), rng)


def test_ciphertext_wire_format(rng):
    kp = keygen(rng)
    ct = pke_encrypt(kp.pk, b"abc", rng)
    raw = ct.to_bytes()
    assert raw[:33] == ct.ephemeral.data
    assert raw[33:37] == (3).to_bytes(4, "big")
    assert raw[-16:] == ct.tag
    assert Ciphertext.from_bytes(raw) == ct
    with pytest.raises(InvalidEncoding):
        Ciphertext.from_bytes(raw[:-1])


# -- signatures ---------------------------------------------------------------


@settings(max_examples=1000, deadline=None)
@given(st.integers(min_value=0, max_value=2**32), st.binary(max_size=128))
def test_signature_roundtrip_and_single_bit_perturbations(seed, msg):
    rng = random.Random(seed)
    kp = keygen(rng)
    sig = sign(kp.sk, msg)
    raw = sig.to_bytes()
    assert len(raw) == signature_size()
    assert verify(kp.pk, msg, sig)
    assert verify(kp.pk, msg, raw)
    bit = seed % 8
    assert not verify(kp.pk, msg + b"\x00", sig)
    if msg:
        assert not verify(kp.pk, flip(msg, seed % len(msg), bit), sig)
    assert not verify(kp.pk, msg, flip(raw, 1 + seed % 32, bit))  # commitment
    assert not verify(kp.pk, msg, flip(raw, 33 + seed % 32, bit))  # response
    assert not verify(keygen(rng).pk, msg, sig)


def test_tiny_signature_checks_with_raw_arithmetic(rng):
    kp = keygen(rng, TINY)
    sig = sign(kp.sk, b"msg", TINY)
    R = tiny_int(sig.commitment)
    c = h2s(sig.commitment.data + kp.pk.data + b"msg", b"tumbler/chal", Q)
    assert pow(G, sig.response, P) == R * pow(tiny_int(kp.pk), c, P) % P


def test_verify_never_raises_on_junk(rng):
    kp = keygen(rng)
    for junk in (b"", b"\x00" * 65, b"\xff" * 65, b"\x02" + b"\x00" * 64):
        assert verify(kp.pk, b"m", junk) is False


# -- serialization ------------------------------------------------------------


@pytest.mark.parametrize("group", GROUPS, ids=lambda g: g.name)
def test_serialization_roundtrips(group, rng):
    kp = keygen(rng, group)
    assert group.deserialize(kp.pk.data) == kp.pk
    assert len(kp.pk.data) == group.element_size
    assert scalar_from_bytes(scalar_to_bytes(kp.sk), group) == kp.sk
    sig = sign(kp.sk, b"x", group)
    assert Signature.from_bytes(sig.to_bytes(), group) == sig


def test_deserialize_rejects_non_group_bytes():
    with pytest.raises(InvalidEncoding):
        SECP256K1.deserialize(b"\x04" + bytes(32))
    with pytest.raises(InvalidEncoding):
        SECP256K1.deserialize(b"\x02" + b"\xff" * 32)  # x beyond the field
    with pytest.raises(InvalidEncoding):
        SECP256K1.deserialize(b"\x02" * 32)
    with pytest.raises(InvalidEncoding):
        TINY.deserialize((2).to_bytes(8, "big"))  # 2 is outside the order-q subgroup
    with pytest.raises(InvalidEncoding):
        scalar_from_bytes(SECP256K1.order.to_bytes(32, "big"))
