"""Cryptographic primitives shared by every node in the platform.

Asymmetric keypairs (RSA), digest schemes, hybrid envelopes (RSA-OAEP
wrapping an AES-128-GCM payload key) and signed+sealed messages. All
operations are stateless; key material is carried around as DER bytes so
values stay immutable and hashable-friendly.

Two generation paths exist for keypairs: the default OpenSSL generator,
and a raw-numbers path (gmpy2 prime search) used for 512-bit keys, which
the installed OpenSSL bindings refuse to generate, and for seeded
deterministic generation. Seeded keys, and the seeded `rng` parameter of
the encryption helpers, are test/simulation conveniences only: they trade
entropy for reproducibility and must never guard real data.
"""

from __future__ import annotations

import functools
import hashlib
import random
import secrets
from dataclasses import dataclass
from enum import Enum

import gmpy2
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

SUPPORTED_KEY_BITS = (512, 1024, 2048, 4096, 8192)

_AES_KEY_BYTES = 16
_GCM_NONCE_BYTES = 12
_OAEP_HASH_BYTES = 20  # SHA-1, keeps the wrap small enough for 512-bit moduli

_OAEP = padding.OAEP(mgf=padding.MGF1(hashes.SHA1()), algorithm=hashes.SHA1(), label=None)
_SIGN = padding.PKCS1v15()


class CryptoError(Exception):
    """Base class for failures raised by this module."""


class UnsupportedKeySizeError(CryptoError):
    pass


class DecryptionError(CryptoError):
    """Base for envelope-opening failures."""


class KeyMismatchError(DecryptionError):
    """Envelope was sealed for a different recipient key."""


class CiphertextTamperedError(DecryptionError):
    """Envelope contents failed authenticated decryption."""


class SignatureError(CryptoError):
    """Signature did not verify against the recovered payload."""


class DigestScheme(Enum):
    SHA1 = "sha1"
    SHA224 = "sha224"
    SHA256 = "sha256"
    SHA384 = "sha384"
    SHA512 = "sha512"

    @property
    def digest_size(self) -> int:
        return hashlib.new(self.value).digest_size

    @classmethod
    def from_name(cls, name: str) -> "DigestScheme":
        key = name.strip().lower().replace("-", "")
        for scheme in cls:
            if scheme.value == key:
                return scheme
        raise ValueError(f"unknown digest scheme: {name!r}")


def digest(data: bytes, scheme: DigestScheme = DigestScheme.SHA256) -> bytes:
    """Digest `data` under `scheme` (standard library implementation)."""
    return hashlib.new(scheme.value, data).digest()


def key_id(public_key_der: bytes) -> bytes:
    """Address of a key holder: SHA-256 of the DER-encoded public key."""
    return hashlib.sha256(public_key_der).digest()


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes  # DER SubjectPublicKeyInfo
    private_key: bytes  # DER PKCS8, unencrypted
    modulus_bits: int

    @property
    def key_id(self) -> bytes:
        return key_id(self.public_key)


@dataclass(frozen=True)
class HybridEnvelope:
    wrapped_key: bytes  # RSA-OAEP of the AES key, under the recipient public key
    ciphertext: bytes  # GCM nonce || ciphertext || tag
    recipient_key_id: bytes

    def to_bytes(self) -> bytes:
        return b"".join(
            len(part).to_bytes(4, "big") + part
            for part in (self.wrapped_key, self.ciphertext, self.recipient_key_id)
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "HybridEnvelope":
        parts = []
        off = 0
        for _ in range(3):
            if off + 4 > len(raw):
                raise ValueError("truncated envelope")
            n = int.from_bytes(raw[off : off + 4], "big")
            off += 4
            if off + n > len(raw):
                raise ValueError("truncated envelope")
            parts.append(raw[off : off + n])
            off += n
        if off != len(raw):
            raise ValueError("trailing bytes after envelope")
        return cls(*parts)


@dataclass(frozen=True)
class SignedMessage:
    payload_ciphertext: HybridEnvelope
    signature: bytes
    sender_public_key: bytes


# Parsing a DER private key re-validates the primes, which costs whole
# seconds at large moduli; the caches make repeated envelope operations
# with the same key cheap.
@functools.lru_cache(maxsize=512)
def _load_private(der: bytes) -> rsa.RSAPrivateKey:
    key = serialization.load_der_private_key(der, password=None)
    if not isinstance(key, rsa.RSAPrivateKey):
        raise CryptoError("not an RSA private key")
    return key


@functools.lru_cache(maxsize=512)
def _load_public(der: bytes) -> rsa.RSAPublicKey:
    key = serialization.load_der_public_key(der)
    if not isinstance(key, rsa.RSAPublicKey):
        raise CryptoError("not an RSA public key")
    return key


def _keypair_from_private(key: rsa.RSAPrivateKey, bits: int) -> KeyPair:
    priv = key.private_bytes(
        encoding=serialization.Encoding.DER,
        format=serialization.PrivateFormat.PKCS8,
        encryption_algorithm=serialization.NoEncryption(),
    )
    pub = key.public_key().public_bytes(
        encoding=serialization.Encoding.DER,
        format=serialization.PublicFormat.SubjectPublicKeyInfo,
    )
    return KeyPair(public_key=pub, private_key=priv, modulus_bits=bits)


def _random_prime(bits: int, rng: random.Random) -> int:
    # Top two bits forced so p*q lands on the full modulus width.
    while True:
        cand = rng.getrandbits(bits) | (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(cand))
        if p.bit_length() == bits:
            return p


def _generate_from_numbers(bits: int, rng: random.Random) -> rsa.RSAPrivateKey:
    e = 65537
    while True:
        p = _random_prime(bits // 2, rng)
        q = _random_prime(bits // 2, rng)
        if p == q:
            continue
        if p < q:
            p, q = q, p
        n = p * q
        phi = (p - 1) * (q - 1)
        if n.bit_length() != bits or gmpy2.gcd(e, phi) != 1:
            continue
        d = int(gmpy2.invert(e, phi))
        pub = rsa.RSAPublicNumbers(e, n)
        priv = rsa.RSAPrivateNumbers(
            p=p,
            q=q,
            d=d,
            dmp1=rsa.rsa_crt_dmp1(d, p),
            dmq1=rsa.rsa_crt_dmq1(d, q),
            iqmp=rsa.rsa_crt_iqmp(p, q),
            public_numbers=pub,
        )
        return priv.private_key()


def generate_keypair(modulus_bits: int, rng_seed: int | None = None) -> KeyPair:
    """Generate an RSA keypair of one of the supported sizes.

    With `rng_seed` the prime search is driven by a seeded PRNG and the
    result is fully deterministic; 512-bit keys always take this raw path
    (seeded or not) because the OpenSSL bindings refuse them. 512-bit keys
    are insecure and supported for benchmark parity only.
    """
    if modulus_bits not in SUPPORTED_KEY_BITS:
        raise UnsupportedKeySizeError(f"unsupported modulus size: {modulus_bits}")
    if rng_seed is None and modulus_bits >= 1024:
        key = rsa.generate_private_key(public_exponent=65537, key_size=modulus_bits)
    else:
        rng = random.Random(rng_seed) if rng_seed is not None else random.Random(secrets.randbits(128))
        key = _generate_from_numbers(modulus_bits, rng)
    return _keypair_from_private(key, modulus_bits)


def _mgf1_sha1(seed: bytes, length: int) -> bytes:
    out = b""
    counter = 0
    while len(out) < length:
        out += hashlib.sha1(seed + counter.to_bytes(4, "big")).digest()
        counter += 1
    return out[:length]


def _oaep_encrypt_deterministic(pub: rsa.RSAPublicKey, message: bytes, seed: bytes) -> bytes:
    # RFC 8017 EME-OAEP encode with a caller-supplied seed, then raw modexp.
    # Output is decryptable by the library OAEP path; used only in seeded mode.
    numbers = pub.public_numbers()
    k = (numbers.n.bit_length() + 7) // 8
    h = _OAEP_HASH_BYTES
    if len(message) > k - 2 * h - 2:
        raise CryptoError("message too long for OAEP")
    l_hash = hashlib.sha1(b"").digest()
    ps = b"\x00" * (k - len(message) - 2 * h - 2)
    db = l_hash + ps + b"\x01" + message
    db_mask = _mgf1_sha1(seed, k - h - 1)
    masked_db = bytes(a ^ b for a, b in zip(db, db_mask))
    seed_mask = _mgf1_sha1(masked_db, h)
    masked_seed = bytes(a ^ b for a, b in zip(seed, seed_mask))
    em = b"\x00" + masked_seed + masked_db
    return pow(int.from_bytes(em, "big"), numbers.e, numbers.n).to_bytes(k, "big")


def _rand_bytes(n: int, rng: random.Random | None) -> bytes:
    if rng is None:
        return secrets.token_bytes(n)
    return rng.randbytes(n)


def hybrid_encrypt(payload: bytes, recipient_public_key: bytes, rng: random.Random | None = None) -> HybridEnvelope:
    """Seal `payload` for the holder of `recipient_public_key`.

    A fresh AES-128 key encrypts the payload under GCM; the AES key is
    wrapped with RSA-OAEP. Passing `rng` makes the envelope bytes
    deterministic (simulation/test use only).
    """
    if not payload:
        raise CryptoError("payload must be non-empty")
    pub = _load_public(recipient_public_key)
    aes_key = _rand_bytes(_AES_KEY_BYTES, rng)
    nonce = _rand_bytes(_GCM_NONCE_BYTES, rng)
    ciphertext = nonce + AESGCM(aes_key).encrypt(nonce, payload, None)
    if rng is None:
        wrapped = pub.encrypt(aes_key, _OAEP)
    else:
        wrapped = _oaep_encrypt_deterministic(pub, aes_key, rng.randbytes(_OAEP_HASH_BYTES))
    return HybridEnvelope(
        wrapped_key=wrapped,
        ciphertext=ciphertext,
        recipient_key_id=key_id(recipient_public_key),
    )


def hybrid_decrypt(envelope: HybridEnvelope, recipient: KeyPair) -> bytes:
    """Open an envelope; raises KeyMismatchError for the wrong recipient and
    CiphertextTamperedError when authenticated decryption fails."""
    if envelope.recipient_key_id != recipient.key_id:
        raise KeyMismatchError("envelope addressed to a different key")
    priv = _load_private(recipient.private_key)
    try:
        aes_key = priv.decrypt(envelope.wrapped_key, _OAEP)
    except ValueError as exc:
        raise CiphertextTamperedError("key unwrap failed") from exc
    nonce, body = envelope.ciphertext[:_GCM_NONCE_BYTES], envelope.ciphertext[_GCM_NONCE_BYTES:]
    try:
        return AESGCM(aes_key).decrypt(nonce, body, None)
    except InvalidTag as exc:
        raise CiphertextTamperedError("payload authentication failed") from exc


def sign(data: bytes, signer: KeyPair) -> bytes:
    return _load_private(signer.private_key).sign(data, _SIGN, hashes.SHA256())


def verify(signature: bytes, data: bytes, signer_public_key: bytes) -> bool:
    try:
        _load_public(signer_public_key).verify(signature, data, _SIGN, hashes.SHA256())
        return True
    except InvalidSignature:
        return False


def sign_and_seal(
    payload: bytes,
    sender: KeyPair,
    recipient_public_key: bytes,
    rng: random.Random | None = None,
) -> SignedMessage:
    """Sign `payload` with the sender key and seal it for the recipient."""
    return SignedMessage(
        payload_ciphertext=hybrid_encrypt(payload, recipient_public_key, rng),
        signature=sign(payload, sender),
        sender_public_key=sender.public_key,
    )


def open_and_verify(message: SignedMessage, recipient: KeyPair) -> bytes:
    """Open a SignedMessage and verify its signature against the recovered
    payload; raises SignatureError on mismatch."""
    payload = hybrid_decrypt(message.payload_ciphertext, recipient)
    if not verify(message.signature, payload, message.sender_public_key):
        raise SignatureError("signature does not match recovered payload")
    return payload
