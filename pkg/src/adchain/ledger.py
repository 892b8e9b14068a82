"""Transactions, canonical serialization, Merkle batching and ad blocks.

Every transaction is content-addressed: its id is the SHA-256 of the
canonical encoding of all fields except the id itself and the signature.
The canonical form emits fields in declared order, each as a 4-byte
big-endian length prefix plus raw bytes, which makes it deterministic and
injective over field tuples. Transactions chain through `prev_t_id`
(all-zero for a Genesis record), and batches of them are committed under a
Merkle root with sibling-path membership proofs.

Merkle convention: a lone node at an odd level is paired with itself, and
a single-leaf tree's root is that leaf digest unchanged.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from . import cryptokit
from .cryptokit import HybridEnvelope, KeyPair

DIGEST_LEN = 32
ZERO_DIGEST = b"\x00" * DIGEST_LEN


class LedgerError(Exception):
    pass


class EncodingError(LedgerError):
    pass


class ChainError(LedgerError):
    """prev_t_id constraint violated (missing parent, bad genesis, ...)."""


class TransactionType(Enum):
    GENESIS = "Genesis"
    REQUEST = "Request"
    RESPONSE = "Response"
    BILLING = "Billing"
    ACCESS = "Access"
    UPLOAD = "Upload"
    UPDATE = "Update"
    REMOVE = "Remove"
    MONITOR = "Monitor"


@dataclass(frozen=True)
class Transaction:
    t_id: bytes
    prev_t_id: bytes
    tx_type: TransactionType
    user_digest: bytes
    app_digest: bytes
    ad_ids: tuple[int, ...] = ()
    advertiser_id: str | None = None
    input: tuple[int, ...] = ()  # ads already served this session
    output: tuple[int, ...] = ()  # ads consumed by this node
    payload: HybridEnvelope | None = None
    sender_public_key: bytes = b""
    signature: bytes = b""

    def __post_init__(self):
        if len(self.t_id) != DIGEST_LEN or len(self.prev_t_id) != DIGEST_LEN:
            raise EncodingError("transaction ids must be 32 bytes")


def _lp(raw: bytes) -> bytes:
    return len(raw).to_bytes(4, "big") + raw


def _enc_int_list(values: Iterable[int]) -> bytes:
    return b"".join(int(v).to_bytes(8, "big") for v in values)


def _enc_optional(raw: bytes | None) -> bytes:
    return b"" if raw is None else b"\x01" + raw


def signing_bytes(tx: Transaction) -> bytes:
    """Canonical encoding of every field except t_id and signature; this is
    the preimage of t_id and the message the sender signs."""
    return b"".join(
        (
            _lp(tx.prev_t_id),
            _lp(tx.tx_type.value.encode("ascii")),
            _lp(tx.user_digest),
            _lp(tx.app_digest),
            _lp(_enc_int_list(tx.ad_ids)),
            _lp(_enc_optional(None if tx.advertiser_id is None else tx.advertiser_id.encode("utf-8"))),
            _lp(_enc_int_list(tx.input)),
            _lp(_enc_int_list(tx.output)),
            _lp(_enc_optional(None if tx.payload is None else tx.payload.to_bytes())),
            _lp(tx.sender_public_key),
        )
    )


def transaction_id(tx: Transaction) -> bytes:
    return hashlib.sha256(signing_bytes(tx)).digest()


def canonical_encode(tx: Transaction) -> bytes:
    """Full wire form: t_id, then the signing fields, then the signature."""
    if not tx.sender_public_key:
        raise EncodingError("sender_public_key is mandatory")
    return _lp(tx.t_id) + signing_bytes(tx) + _lp(tx.signature)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self) -> bytes:
        if self.off + 4 > len(self.raw):
            raise EncodingError("truncated record")
        n = int.from_bytes(self.raw[self.off : self.off + 4], "big")
        self.off += 4
        if self.off + n > len(self.raw):
            raise EncodingError("truncated record")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def done(self) -> bool:
        return self.off == len(self.raw)


def _dec_int_list(raw: bytes) -> tuple[int, ...]:
    if len(raw) % 8:
        raise EncodingError("malformed integer list")
    return tuple(int.from_bytes(raw[i : i + 8], "big") for i in range(0, len(raw), 8))


def _dec_optional(raw: bytes) -> bytes | None:
    if not raw:
        return None
    if raw[0] != 1:
        raise EncodingError("malformed optional field")
    return raw[1:]


def canonical_decode(raw: bytes) -> Transaction:
    r = _Reader(raw)
    t_id = r.take()
    prev = r.take()
    tx_type = TransactionType(r.take().decode("ascii"))
    user_digest = r.take()
    app_digest = r.take()
    ad_ids = _dec_int_list(r.take())
    adv = _dec_optional(r.take())
    input_ads = _dec_int_list(r.take())
    output_ads = _dec_int_list(r.take())
    payload_raw = _dec_optional(r.take())
    sender_pub = r.take()
    sig = r.take()
    if not r.done():
        raise EncodingError("trailing bytes after transaction")
    return Transaction(
        t_id=t_id,
        prev_t_id=prev,
        tx_type=tx_type,
        user_digest=user_digest,
        app_digest=app_digest,
        ad_ids=ad_ids,
        advertiser_id=None if adv is None else adv.decode("utf-8"),
        input=input_ads,
        output=output_ads,
        payload=None if payload_raw is None else HybridEnvelope.from_bytes(payload_raw),
        sender_public_key=sender_pub,
        signature=sig,
    )


def make_transaction(
    tx_type: TransactionType,
    *,
    user_digest: bytes,
    app_digest: bytes,
    sender: KeyPair,
    prev_t_id: bytes | None = None,
    ad_ids: Sequence[int] = (),
    advertiser_id: str | None = None,
    input: Sequence[int] = (),
    output: Sequence[int] = (),
    payload_plain: bytes | None = None,
    recipient_public_key: bytes | None = None,
    chain: Mapping[bytes, Transaction] | None = None,
    rng: random.Random | None = None,
) -> Transaction:
    """Build, id and sign a transaction.

    Genesis records must not name a predecessor; every other record must,
    and when `chain` is supplied the predecessor has to resolve in it.
    `payload_plain` is sealed for `recipient_public_key`.
    """
    if tx_type is TransactionType.GENESIS:
        if prev_t_id not in (None, ZERO_DIGEST):
            raise ChainError("genesis transactions cannot reference a predecessor")
        prev = ZERO_DIGEST
    else:
        if prev_t_id is None or prev_t_id == ZERO_DIGEST:
            raise ChainError(f"{tx_type.value} transaction requires prev_t_id")
        if chain is not None and prev_t_id not in chain:
            raise ChainError("prev_t_id does not resolve to a known transaction")
        prev = prev_t_id

    payload = None
    if payload_plain is not None:
        if recipient_public_key is None:
            raise LedgerError("payload requires a recipient public key")
        payload = cryptokit.hybrid_encrypt(payload_plain, recipient_public_key, rng)

    draft = Transaction(
        t_id=ZERO_DIGEST,
        prev_t_id=prev,
        tx_type=tx_type,
        user_digest=user_digest,
        app_digest=app_digest,
        ad_ids=tuple(ad_ids),
        advertiser_id=advertiser_id,
        input=tuple(input),
        output=tuple(output),
        payload=payload,
        sender_public_key=sender.public_key,
    )
    body = signing_bytes(draft)
    return replace(draft, t_id=hashlib.sha256(body).digest(), signature=cryptokit.sign(body, sender))


def verify_transaction(tx: Transaction) -> bool:
    """Recompute the id and check the signature over the canonical body."""
    body = signing_bytes(tx)
    if hashlib.sha256(body).digest() != tx.t_id:
        return False
    return cryptokit.verify(tx.signature, body, tx.sender_public_key)


def walk_chain(tx: Transaction, chain: Mapping[bytes, Transaction], max_hops: int = 1_000_000) -> list[Transaction]:
    """Follow prev_t_id links back to the Genesis record; raises ChainError
    on a dangling reference or a cycle."""
    path = [tx]
    seen = {tx.t_id}
    current = tx
    for _ in range(max_hops):
        if current.prev_t_id == ZERO_DIGEST:
            if current.tx_type is not TransactionType.GENESIS:
                raise ChainError("chain ends at a non-genesis transaction")
            return path
        nxt = chain.get(current.prev_t_id)
        if nxt is None:
            raise ChainError("dangling prev_t_id")
        if nxt.t_id in seen:
            raise ChainError("cycle in transaction chain")
        seen.add(nxt.t_id)
        path.append(nxt)
        current = nxt
    raise ChainError("chain too long")


@dataclass(frozen=True)
class MerkleTree:
    leaves: tuple[bytes, ...]
    levels: tuple[tuple[bytes, ...], ...]

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def height(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class MembershipProof:
    leaf_index: int
    siblings: tuple[tuple[bytes, str], ...]  # (digest, "L"|"R") from leaf to root


def _pair_hash(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(left + right).digest()


def build_merkle(leaves: Sequence[bytes]) -> MerkleTree:
    """Build the tree bottom-up; an odd node is paired with a copy of
    itself. A single leaf is its own root."""
    if not leaves:
        raise LedgerError("merkle tree needs at least one leaf")
    for leaf in leaves:
        if len(leaf) != DIGEST_LEN:
            raise LedgerError("merkle leaves must be 32-byte digests")
    levels = [tuple(leaves)]
    while len(levels[-1]) > 1:
        prev = levels[-1]
        nxt = []
        for i in range(0, len(prev), 2):
            left = prev[i]
            right = prev[i + 1] if i + 1 < len(prev) else prev[i]
            nxt.append(_pair_hash(left, right))
        levels.append(tuple(nxt))
    return MerkleTree(leaves=tuple(leaves), levels=tuple(levels))


def prove(tree: MerkleTree, index: int) -> MembershipProof:
    if not 0 <= index < len(tree.leaves):
        raise LedgerError(f"leaf index {index} out of range")
    siblings: list[tuple[bytes, str]] = []
    pos = index
    for level in tree.levels[:-1]:
        if pos % 2 == 0:
            sib = level[pos + 1] if pos + 1 < len(level) else level[pos]
            siblings.append((sib, "R"))
        else:
            siblings.append((level[pos - 1], "L"))
        pos //= 2
    return MembershipProof(leaf_index=index, siblings=tuple(siblings))


def verify_proof(root: bytes, leaf: bytes, proof: MembershipProof) -> bool:
    node = leaf
    for sib, side in proof.siblings:
        node = _pair_hash(sib, node) if side == "L" else _pair_hash(node, sib)
    return node == root


DEFAULT_BLOCK_LIMIT = 64


@dataclass(frozen=True)
class AdBlock:
    header: Transaction
    pending: tuple[Transaction, ...]
    merkle_root: bytes
    prev_block_hash: bytes
    block_size_limit: int

    def block_hash(self) -> bytes:
        return hashlib.sha256(
            _lp(self.header.t_id) + _lp(self.merkle_root) + _lp(self.prev_block_hash)
        ).digest()

    def recompute_merkle_root(self) -> bytes:
        return build_merkle([tx.t_id for tx in self.pending]).root


def assemble_block(
    pending: Sequence[Transaction],
    limit: int = DEFAULT_BLOCK_LIMIT,
    prev_block: bytes = ZERO_DIGEST,
) -> AdBlock:
    """Batch the oldest `limit` pending transactions under one Merkle root;
    the first included transaction serves as the block header."""
    if not pending:
        raise LedgerError("no pending transactions to batch")
    included = tuple(pending[:limit])
    root = build_merkle([tx.t_id for tx in included]).root
    return AdBlock(
        header=included[0],
        pending=included,
        merkle_root=root,
        prev_block_hash=prev_block,
        block_size_limit=limit,
    )


def dump_transactions(txs: Iterable[Transaction]) -> bytes:
    """Frame canonical encodings for a chain dump file."""
    return b"".join(_lp(canonical_encode(tx)) for tx in txs)


def load_transactions(raw: bytes) -> list[Transaction]:
    r = _Reader(raw)
    out = []
    while not r.done():
        out.append(canonical_decode(r.take()))
    return out


def describe_transaction(tx: Transaction) -> str:
    """Human-readable one-object rendering used by the CLI inspector."""
    fields = [
        ("T_ID", tx.t_id.hex()),
        ("PT_ID", tx.prev_t_id.hex()),
        ("Trans.Type", tx.tx_type.value),
        ("ID_U", tx.user_digest.hex()),
        ("ID_APP", tx.app_digest.hex()),
        ("Ad_ID", list(tx.ad_ids)),
        ("AD_ID", tx.advertiser_id),
        ("input", list(tx.input)),
        ("output", list(tx.output)),
        ("Ad", None if tx.payload is None else f"<envelope {len(tx.payload.ciphertext)}B>"),
        ("PK+", tx.sender_public_key.hex()[:16] + "..."),
        ("Sign", tx.signature.hex()[:16] + "..."),
    ]
    body = ",\n".join(f"  {name!r}: {value!r}" for name, value in fields)
    return "{\n" + body + "\n}"
