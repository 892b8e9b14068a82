"""The simulated platform entities and their end-to-end flows.

Five actors cooperate over an in-process message bus: the ad placement
server (APS) groups and encrypts ads per interest and uploads the result
to cloud storage; cloud storage (CS) is an honest-but-curious store that
policy-checks every request and matches hashed profiles against the
hashed index; the cluster head (CH) policy-checks and forwards miner
traffic; the miner lives on the user's device, derives the profile
locally, requests ads and serves them to apps; the billing server (BS)
settles presentation/click payments between advertiser, app developer and
itself.

Every actor is single-threaded and owns its state; anything that crosses a
node boundary goes through the bus as immutable bytes, so the bus log is
the ground truth for the privacy boundary: CS and CH must only ever see
digests and envelopes, never a plaintext interest, user id or app id.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

from . import cryptokit, ledger
from .admatch import Ad, InterestKeywords, assign_ads
from .cryptokit import DigestScheme, HybridEnvelope, KeyPair, digest
from .encoding import frame, frame_all, unframe
from .ledger import Transaction, TransactionType, make_transaction, verify_transaction
from .policy import Action, PolicyDocument, RequestContext, traverse
from .profile import (
    AppInterestMap,
    AppRef,
    InterestProfile,
    ProfileThresholds,
    derive,
    hash_profile,
    record_usage,
)


class NodeError(Exception):
    pass


class PolicyDenied(NodeError):
    """A policy hop refused the request; `hop` names the denying node."""

    def __init__(self, hop: str, ctx: RequestContext):
        super().__init__(f"{hop} denied {ctx.transaction_type} on {ctx.resource}")
        self.hop = hop
        self.ctx = ctx


class StorageFull(NodeError):
    pass


class ChunkDigestMismatch(NodeError):
    pass


class SetupError(NodeError):
    pass


class UnknownAdError(NodeError):
    pass


def identity_digest(identity: str) -> bytes:
    """Addressing digest for user/app identities (SHA-256 of the UTF-8 id)."""
    return digest(identity.encode("utf-8"), DigestScheme.SHA256)


# ---------------------------------------------------------------------------
# message bus


@dataclass(frozen=True)
class BusMessage:
    tick: float
    sender: str
    recipient: str
    kind: str  # transaction type or protocol step
    t_id: bytes | None
    body: bytes

    def log_line(self) -> str:
        tid = self.t_id.hex()[:8] if self.t_id else "-"
        return f"tick={self.tick:g} from={self.sender} to={self.recipient} type={self.kind} t_id={tid}"


class MessageBus:
    def __init__(self):
        self.messages: list[BusMessage] = []

    def post(self, tick: float, sender: str, recipient: str, kind: str, body: bytes, t_id: bytes | None = None) -> None:
        self.messages.append(BusMessage(tick, sender, recipient, kind, t_id, body))

    def log_lines(self) -> list[str]:
        return [m.log_line() for m in self.messages]

    def seen_by(self, node_name: str) -> list[BusMessage]:
        return [m for m in self.messages if m.sender == node_name or m.recipient == node_name]


def scan_for_plaintext(messages: Iterable[BusMessage], corpus: Iterable[str]) -> list[tuple[str, str]]:
    """Find corpus strings leaking into message traffic; returns
    (leaked string, log line) pairs."""
    needles = [(s, s.encode("utf-8")) for s in corpus if s]
    hits = []
    for m in messages:
        haystack = m.body + m.kind.encode() + m.sender.encode() + m.recipient.encode()
        for text, raw in needles:
            if raw in haystack:
                hits.append((text, m.log_line()))
    return hits


# ---------------------------------------------------------------------------
# storage


@dataclass(frozen=True)
class StoredExtent:
    start_slot: int
    record_count: int
    bfr: int
    rejected_chunks: int = 0


class StorageArena:
    """Spanned record storage: fixed-capacity blocks filled sequentially;
    the next-pointer always addresses the first free slot."""

    def __init__(self, block_capacity: int = 64, max_blocks: int = 4096):
        if block_capacity < 1 or max_blocks < 1:
            raise ValueError("capacity parameters must be positive")
        self.block_capacity = block_capacity
        self.max_blocks = max_blocks
        self.slots: list[bytes] = []

    @property
    def next_pointer(self) -> int:
        return len(self.slots)

    @property
    def capacity(self) -> int:
        return self.block_capacity * self.max_blocks

    @property
    def remaining(self) -> int:
        return self.capacity - len(self.slots)

    def store(self, record: bytes) -> int:
        if not self.remaining:
            raise StorageFull("arena is full")
        self.slots.append(record)
        return len(self.slots) - 1

    def blocks_used(self) -> int:
        return math.ceil(len(self.slots) / self.block_capacity)


def blocking_factor(record_count: int, block_capacity: int) -> int:
    return math.ceil(record_count / block_capacity)


# ---------------------------------------------------------------------------
# profiling-ads index


@dataclass(frozen=True)
class ProfilingAdsIndex:
    """Interest digest -> encrypted ad bundle; the dataset CS serves from."""

    entries: Mapping[bytes, tuple[HybridEnvelope, ...]]
    scheme: DigestScheme = DigestScheme.SHA256

    def records(self) -> list[bytes]:
        out = []
        for d in sorted(self.entries):
            for env in self.entries[d]:
                out.append(frame(d, env.to_bytes()))
        return out

    @staticmethod
    def parse_record(record: bytes) -> tuple[bytes, HybridEnvelope]:
        d, env_raw = unframe(record)
        return d, HybridEnvelope.from_bytes(env_raw)


def seal_ad(ad: Ad, delivery_public_key: bytes, rng: random.Random | None) -> HybridEnvelope:
    """Encrypt one ad as frame(ad_id, advertiser, payload) so the consuming
    device learns the attribution it needs for billing."""
    body = frame(ad.ad_id.to_bytes(8, "big"), ad.advertiser_id.encode("utf-8"), ad.payload)
    return cryptokit.hybrid_encrypt(body, delivery_public_key, rng)


def open_ad(env: HybridEnvelope, delivery_key: KeyPair) -> tuple[int, str, bytes]:
    ad_id_raw, advertiser_raw, payload = unframe(cryptokit.hybrid_decrypt(env, delivery_key))
    return int.from_bytes(ad_id_raw, "big"), advertiser_raw.decode("utf-8"), payload


@dataclass(frozen=True)
class NodeKeys:
    aps: KeyPair
    cs: KeyPair
    ch: KeyPair
    bs: KeyPair
    delivery: KeyPair  # wraps ad content; miners hold the private half

    @classmethod
    def generate(cls, modulus_bits: int = 1024, rng_seed: int | None = None) -> "NodeKeys":
        def gen(i: int) -> KeyPair:
            seed = None if rng_seed is None else rng_seed * 31 + i
            return cryptokit.generate_keypair(modulus_bits, seed)

        return cls(aps=gen(1), cs=gen(2), ch=gen(3), bs=gen(4), delivery=gen(5))


def global_setup(
    ads: Sequence[Ad],
    taxonomy: Sequence[InterestKeywords],
    keys: NodeKeys,
    scheme: DigestScheme = DigestScheme.SHA256,
    rng: random.Random | None = None,
) -> ProfilingAdsIndex:
    """Group ads by best-matching interest, then hash each interest and
    encrypt its ads, producing the profiling-ads dataset."""
    result = assign_ads(ads, taxonomy)
    if not result.assignments:
        raise SetupError("no assignable ads")
    ads_by_id = {ad.ad_id: ad for ad in ads}
    entries: dict[bytes, tuple[HybridEnvelope, ...]] = {}
    for interest in sorted(result.assignments):
        d = digest(interest.canonical_bytes(), scheme)
        envs = tuple(
            seal_ad(ads_by_id[ad_id], keys.delivery.public_key, rng)
            for ad_id in sorted(result.assignments[interest])
        )
        entries[d] = envs
    return ProfilingAdsIndex(entries=entries, scheme=scheme)


# ---------------------------------------------------------------------------
# tracking list (advertising quota)


@dataclass
class QuotaRow:
    timestamp: float
    ad_id: int
    required_frequency: int
    served_count: int = 0

    @property
    def served_fraction(self) -> int:
        """Percent served, floored."""
        return (self.served_count * 100) // self.required_frequency


class BillingEvent(Enum):
    PRESENTATION = "Presentation"
    CLICK = "Click"


class TrackingList:
    def __init__(self):
        self.rows: dict[int, QuotaRow] = {}

    def register(self, ad_id: int, required_frequency: int, timestamp: float = 0.0) -> None:
        if required_frequency < 1:
            raise ValueError("required_frequency must be >= 1")
        self.rows.setdefault(ad_id, QuotaRow(timestamp, ad_id, required_frequency))

    def row(self, ad_id: int) -> QuotaRow:
        if ad_id not in self.rows:
            raise UnknownAdError(f"ad {ad_id} is not tracked")
        return self.rows[ad_id]

    def under_quota(self) -> list[QuotaRow]:
        return [r for r in sorted(self.rows.values(), key=lambda r: r.ad_id) if r.served_fraction < 100]


def update_quota(tracking: TrackingList, ad_id: int, event: BillingEvent, timestamp: float = 0.0) -> TrackingList:
    """Record one serving against the ad's quota; clicks refresh the
    timestamp without consuming quota."""
    row = tracking.row(ad_id)
    if event is BillingEvent.PRESENTATION:
        row.served_count += 1
    row.timestamp = timestamp
    return tracking


# ---------------------------------------------------------------------------
# wallets and billing


@dataclass(frozen=True)
class PriceTag:
    presentation: int  # integer micro-units
    click: int

    def __post_init__(self):
        if self.presentation < 0 or self.click < 0:
            raise ValueError("price tags must be non-negative")


@dataclass(frozen=True)
class BillingDelta:
    event: BillingEvent
    ad_id: int
    committed: bool
    deltas: tuple[tuple[str, int], ...]  # (wallet, signed amount)

    @property
    def net(self) -> int:
        return sum(v for _, v in self.deltas)


class WalletLedger:
    """Integer micro-unit balances plus the ad price tags and revenue
    shares. Every committed event transfers the full price: developer gets
    floor(price * developer_share), the billing server the remainder."""

    def __init__(
        self,
        developer_share: Fraction = Fraction(7, 10),
        billing_share: Fraction = Fraction(3, 10),
        default_price: PriceTag = PriceTag(presentation=4, click=10),
        billing_wallet: str = "bs",
    ):
        if developer_share + billing_share != 1:
            raise ValueError("shares must sum to 1")
        if developer_share < 0 or billing_share < 0:
            raise ValueError("shares must be non-negative")
        self.developer_share = developer_share
        self.billing_share = billing_share
        self.default_price = default_price
        self.billing_wallet = billing_wallet
        self.balances: dict[str, int] = {billing_wallet: 0}
        self.prices: dict[int, PriceTag] = {}
        self.queue: list[tuple[BillingEvent, int, str, str, int]] = []

    def register_wallet(self, wallet: str, balance: int = 0) -> None:
        if balance < 0:
            raise ValueError("starting balance cannot be negative")
        self.balances.setdefault(wallet, 0)
        self.balances[wallet] += balance

    def set_price(self, ad_id: int, tag: PriceTag) -> None:
        self.prices[ad_id] = tag

    def price_for(self, ad_id: int, event: BillingEvent) -> int:
        tag = self.prices.get(ad_id, self.default_price)
        return tag.presentation if event is BillingEvent.PRESENTATION else tag.click

    def bill(self, event: BillingEvent, ad_id: int, advertiser_wallet: str, developer_wallet: str) -> BillingDelta:
        """Settle one event. Under-funded advertisers queue the event; no
        partial transfer ever happens."""
        cost = self.price_for(ad_id, event)
        if cost == 0:
            return BillingDelta(event, ad_id, committed=True, deltas=())
        self.balances.setdefault(advertiser_wallet, 0)
        self.balances.setdefault(developer_wallet, 0)
        if self.balances[advertiser_wallet] < cost:
            self.queue.append((event, ad_id, advertiser_wallet, developer_wallet, cost))
            return BillingDelta(event, ad_id, committed=False, deltas=())
        developer_cut = int(cost * self.developer_share)  # floor for non-negative values
        billing_cut = cost - developer_cut
        self.balances[advertiser_wallet] -= cost
        self.balances[developer_wallet] += developer_cut
        self.balances[self.billing_wallet] += billing_cut
        return BillingDelta(
            event,
            ad_id,
            committed=True,
            deltas=(
                (advertiser_wallet, -cost),
                (developer_wallet, developer_cut),
                (self.billing_wallet, billing_cut),
            ),
        )

    def total_balance(self) -> int:
        return sum(self.balances.values())


def bill(ledger_: WalletLedger, event: BillingEvent, ad_id: int, advertiser_wallet: str, developer_wallet: str) -> BillingDelta:
    return ledger_.bill(event, ad_id, advertiser_wallet, developer_wallet)


def developer_wallet_for(app_digest: bytes) -> str:
    return f"dev:{app_digest.hex()[:16]}"


def advertiser_wallet_for(advertiser_id: str) -> str:
    return f"adv:{advertiser_id}"


# ---------------------------------------------------------------------------
# cloud storage (CS)


class CloudStorage:
    name = "CS"

    def __init__(
        self,
        keys: KeyPair,
        policy_doc: PolicyDocument,
        bus: MessageBus,
        arena: StorageArena | None = None,
        scheme: DigestScheme = DigestScheme.SHA256,
        rng: random.Random | None = None,
    ):
        self.keys = keys
        self.policy = policy_doc
        self.bus = bus
        self.arena = arena or StorageArena()
        self.scheme = scheme
        self.rng = rng
        self.index: dict[bytes, tuple[HybridEnvelope, ...]] = {}
        self.profiles: dict[bytes, tuple[bytes, ...]] = {}
        self.profile_extents: dict[bytes, StoredExtent] = {}

    def check_policy(self, ctx: RequestContext) -> None:
        if traverse(self.policy, ctx).decision is not Action.ALLOW:
            raise PolicyDenied(self.name, ctx)

    def _commit_record(self, resource: str, owner_digest: bytes | None, record: bytes) -> int:
        # "storage" is the uninterpreted resource; the other two feed views
        slot = self.arena.store(record)
        if resource == "ads-index":
            d, env = ProfilingAdsIndex.parse_record(record)
            self.index[d] = self.index.get(d, ()) + (env,)
        elif resource == "profile-store":
            assert owner_digest is not None
            current = self.profiles.get(owner_digest, ())
            self.profiles[owner_digest] = tuple(sorted(set(current) | {record}))
        return slot

    def stored_profile(self, user_digest: bytes) -> tuple[bytes, ...]:
        return self.profiles.get(user_digest, ())

    def match_profile(self, user_digest: bytes) -> list[tuple[bytes, tuple[HybridEnvelope, ...]]]:
        """Exact digest intersection between a stored profile and the index."""
        return [(d, self.index[d]) for d in self.stored_profile(user_digest) if d in self.index]

    def serve_request(self, tx: Transaction, requester_id: str, tick: float) -> Transaction:
        """Fetch the encrypted bundle for the requesting user's stored
        profile; the response payload is sealed to the transaction sender."""
        ctx = RequestContext(requester_id=requester_id, transaction_type=tx.tx_type.value, resource="ad-block")
        self.check_policy(ctx)
        if not verify_transaction(tx):
            raise NodeError("invalid request transaction")
        matched = self.match_profile(tx.user_digest)
        envelopes = [env for _, envs in matched for env in envs]
        bundle = frame_all(env.to_bytes() for env in envelopes)
        body = frame(digest(bundle, self.scheme), bundle)
        response = make_transaction(
            TransactionType.RESPONSE,
            user_digest=tx.user_digest,
            app_digest=tx.app_digest,
            sender=self.keys,
            prev_t_id=tx.t_id,
            payload_plain=body,
            recipient_public_key=tx.sender_public_key,
            rng=self.rng,
        )
        return response


def store_records(
    sender_name: str,
    sender_keys: KeyPair,
    requester_id: str,
    cs: CloudStorage,
    resource: str,
    records: Sequence[bytes],
    tick: float,
    tx_type: TransactionType = TransactionType.UPLOAD,
    owner_digest: bytes | None = None,
    rng: random.Random | None = None,
    transit_fault: Callable[[int, bytes], bytes] | None = None,
) -> StoredExtent:
    """The chunked storage upload: request a pointer, learn the block
    capacity, send ceil(count / B) chunks each carried with its digest, and
    receive the encrypted advanced pointer after every accepted chunk.

    `transit_fault` mutates chunk bytes in flight (test hook) and applies
    to every transmission attempt; a rejected chunk is retransmitted once,
    so a persistent fault on one chunk aborts the upload.
    """
    if not records:
        raise SetupError("nothing to store")
    bus = cs.bus
    total_digest = digest(frame_all(records), cs.scheme)
    bus.post(tick, sender_name, cs.name, "storage-request",
             frame(resource.encode(), len(records).to_bytes(8, "big"), total_digest))
    ctx = RequestContext(requester_id=requester_id, transaction_type=tx_type.value, resource=resource)
    cs.check_policy(ctx)

    if resource == "profile-store" and owner_digest is not None:
        existing = cs.profile_extents.get(owner_digest)
        if existing is not None and set(cs.stored_profile(owner_digest)) == set(records):
            bus.post(tick, cs.name, sender_name, "storage-grant-existing",
                     existing.start_slot.to_bytes(8, "big"))
            return existing

    if cs.arena.remaining < len(records):
        raise StorageFull(f"{len(records)} records exceed remaining capacity {cs.arena.remaining}")

    start_pointer = cs.arena.next_pointer
    block_cap = cs.arena.block_capacity
    bus.post(tick, cs.name, sender_name, "storage-grant",
             frame(block_cap.to_bytes(8, "big"),
                   cryptokit.hybrid_encrypt(start_pointer.to_bytes(8, "big"), sender_keys.public_key, rng).to_bytes()))

    bfr = blocking_factor(len(records), block_cap)
    bus.post(tick, sender_name, cs.name, "storage-bfr", bfr.to_bytes(8, "big"))

    upload_id = (rng.randbytes(8) if rng is not None else random.SystemRandom().randbytes(8)).hex()
    if resource == "profile-store" and owner_digest is not None:
        cs.profiles[owner_digest] = ()  # an upload replaces the stored profile
    rejected = 0
    for i in range(bfr):
        chunk_records = records[i * block_cap : (i + 1) * block_cap]
        chunk = frame_all(chunk_records)
        chunk_digest = digest(chunk, cs.scheme)
        wire = b""
        for attempt in range(2):
            wire = chunk if transit_fault is None else transit_fault(i, chunk)
            bus.post(tick, sender_name, cs.name, "storage-chunk",
                     frame(upload_id.encode(), i.to_bytes(4, "big"), wire, chunk_digest))
            if digest(wire, cs.scheme) == chunk_digest:
                break
            rejected += 1
            bus.post(tick, cs.name, sender_name, "storage-reject", i.to_bytes(4, "big"))
            if attempt == 1:
                raise ChunkDigestMismatch(f"chunk {i} failed its digest check twice")
        for record in unframe(wire):
            cs._commit_record(resource, owner_digest, record)
        bus.post(tick, cs.name, sender_name, "storage-ack",
                 cryptokit.hybrid_encrypt(cs.arena.next_pointer.to_bytes(8, "big"), sender_keys.public_key, rng).to_bytes())

    extent = StoredExtent(start_slot=start_pointer, record_count=len(records), bfr=bfr, rejected_chunks=rejected)
    if resource == "profile-store" and owner_digest is not None:
        cs.profile_extents[owner_digest] = extent
    return extent


# ---------------------------------------------------------------------------
# ad placement server (APS)


class AdPlacementServer:
    name = "APS"

    def __init__(self, keys: KeyPair, bus: MessageBus, rng: random.Random | None = None):
        self.keys = keys
        self.bus = bus
        self.rng = rng

    def requester_id(self) -> str:
        return self.keys.key_id.hex()

    def build_index(
        self,
        ads: Sequence[Ad],
        taxonomy: Sequence[InterestKeywords],
        keys: NodeKeys,
        scheme: DigestScheme = DigestScheme.SHA256,
    ) -> ProfilingAdsIndex:
        return global_setup(ads, taxonomy, keys, scheme, self.rng)


def store_index(aps: AdPlacementServer, cs: CloudStorage, index: ProfilingAdsIndex, tick: float = 0.0) -> StoredExtent:
    """Upload the profiling-ads dataset to cloud storage (policy-gated,
    chunked, digest-checked)."""
    records = index.records()
    if not records:
        raise SetupError("empty profiling-ads index")
    return store_records(
        aps.name, aps.keys, aps.requester_id(), cs, "ads-index", records, tick,
        rng=aps.rng,
    )


# ---------------------------------------------------------------------------
# cluster head (CH)


class ClusterHead:
    name = "CH"

    def __init__(self, keys: KeyPair, policy_doc: PolicyDocument, bus: MessageBus):
        self.keys = keys
        self.policy = policy_doc
        self.bus = bus

    def check_policy(self, ctx: RequestContext) -> None:
        if traverse(self.policy, ctx).decision is not Action.ALLOW:
            raise PolicyDenied(self.name, ctx)

    def forward_request(self, tx: Transaction, cs: CloudStorage, tick: float) -> Transaction:
        """Policy-check the requesting user, then forward to CS and relay
        the response back."""
        ctx = RequestContext(requester_id=tx.user_digest.hex(), transaction_type=tx.tx_type.value, resource="ad-block")
        self.check_policy(ctx)
        wire = ledger.canonical_encode(tx)
        self.bus.post(tick, self.name, cs.name, tx.tx_type.value, wire, t_id=tx.t_id)
        response = cs.serve_request(tx, requester_id=self.keys.key_id.hex(), tick=tick)
        self.bus.post(tick, cs.name, self.name, response.tx_type.value, ledger.canonical_encode(response), t_id=response.t_id)
        return response

    def forward_monitor(self, tx: Transaction, cs: CloudStorage, tick: float) -> None:
        ctx = RequestContext(requester_id=tx.user_digest.hex(), transaction_type=tx.tx_type.value, resource="quota")
        self.check_policy(ctx)
        self.bus.post(tick, self.name, cs.name, tx.tx_type.value, ledger.canonical_encode(tx), t_id=tx.t_id)


# ---------------------------------------------------------------------------
# billing server (BS)


class BillingServer:
    name = "BS"

    def __init__(self, keys: KeyPair, ledger_: WalletLedger, bus: MessageBus):
        self.keys = keys
        self.ledger = ledger_
        self.bus = bus
        self.settled: list[BillingDelta] = []

    def handle_billing(self, tx: Transaction, tick: float) -> list[BillingDelta]:
        if not verify_transaction(tx):
            raise NodeError("invalid billing transaction")
        if tx.payload is None or tx.advertiser_id is None:
            raise NodeError("billing transaction missing payload or advertiser")
        body = cryptokit.hybrid_decrypt(tx.payload, self.keys)
        deltas = []
        for item in unframe(body):
            event_raw, ad_raw, count_raw = unframe(item)
            event = BillingEvent(event_raw.decode())
            ad_id = int.from_bytes(ad_raw, "big")
            for _ in range(int.from_bytes(count_raw, "big")):
                delta = self.ledger.bill(
                    event,
                    ad_id,
                    advertiser_wallet_for(tx.advertiser_id),
                    developer_wallet_for(tx.app_digest),
                )
                deltas.append(delta)
        self.settled.extend(deltas)
        return deltas


# ---------------------------------------------------------------------------
# miner (system app)


@dataclass
class Session:
    session_id: int
    app_id: str
    started: float
    last_activity: float
    served: list[int] = field(default_factory=list)
    presentations: Counter = field(default_factory=Counter)  # ad_id -> count
    advertiser_of: dict[int, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ServedAd:
    ad_id: int
    advertiser_id: str
    payload: bytes


class Miner:
    """The on-device system app: local profiling, transaction building,
    ad requests, serving and billing triggers."""

    def __init__(
        self,
        user_id: str,
        keys: KeyPair,
        delivery_key: KeyPair,
        local_policy: PolicyDocument,
        interest_map: AppInterestMap,
        thresholds: ProfileThresholds,
        bus: MessageBus,
        scheme: DigestScheme = DigestScheme.SHA256,
        rng: random.Random | None = None,
        session_idle_hours: float = 24.0,
        block_limit: int = ledger.DEFAULT_BLOCK_LIMIT,
    ):
        self.user_id = user_id
        self.user_digest = identity_digest(user_id)
        self.name = f"MINER:{self.user_digest.hex()[:8]}"
        self.keys = keys
        self.delivery_key = delivery_key
        self.policy = local_policy
        self.interest_map = interest_map
        self.thresholds = thresholds
        self.bus = bus
        self.scheme = scheme
        self.rng = rng
        self.session_idle_hours = session_idle_hours
        self.block_limit = block_limit

        self.profile = InterestProfile()
        self.chain: dict[bytes, Transaction] = {}
        self.thread_heads: dict[str, bytes] = {}  # thread key -> latest t_id
        self.pool: list[Transaction] = []
        self.blocks: list[ledger.AdBlock] = []
        self.sessions: dict[str, Session] = {}
        self.closed_sessions: list[Session] = []
        self.tracking = TrackingList()
        self.default_quota = 100
        self.quota_overrides: dict[int, int] = {}
        self.uploaded_digests: tuple[bytes, ...] | None = None
        self._session_counter = 0
        self.cs: CloudStorage | None = None
        self.ch: ClusterHead | None = None
        self.bs: BillingServer | None = None

    def connect(self, cs: CloudStorage, ch: ClusterHead, bs: BillingServer) -> None:
        self.cs, self.ch, self.bs = cs, ch, bs

    # -- chain bookkeeping --------------------------------------------------

    def _thread_key(self, app_id: str | None) -> str:
        return app_id if app_id is not None else f"user:{self.user_id}"

    def _ensure_genesis(self, app_id: str | None, tick: float) -> bytes:
        key = self._thread_key(app_id)
        if key in self.thread_heads:
            return self.thread_heads[key]
        app_digest = identity_digest(key) if app_id is not None else self.user_digest
        tx = make_transaction(
            TransactionType.GENESIS,
            user_digest=self.user_digest,
            app_digest=app_digest,
            sender=self.keys,
            rng=self.rng,
        )
        self._adopt(tx, key)
        self.bus.post(tick, self.name, "CH", tx.tx_type.value, ledger.canonical_encode(tx), t_id=tx.t_id)
        return tx.t_id

    def _adopt(self, tx: Transaction, thread_key: str) -> None:
        self.chain[tx.t_id] = tx
        self.thread_heads[thread_key] = tx.t_id
        self.pool.append(tx)
        while len(self.pool) >= self.block_limit:
            prev = self.blocks[-1].block_hash() if self.blocks else ledger.ZERO_DIGEST
            block = ledger.assemble_block(self.pool, self.block_limit, prev)
            self.blocks.append(block)
            self.pool = self.pool[len(block.pending):]

    # -- profiling ----------------------------------------------------------

    def record_app_usage(self, app: AppRef, duration: float, now: float) -> None:
        self.profile = record_usage(
            self.profile, app, duration, now,
            categories=self.interest_map.category_set() or None,
        )

    def derive_profile(self, now: float) -> InterestProfile:
        self.profile = derive(self.profile, self.interest_map, self.thresholds, now)
        return self.profile

    def upload_profile(self, now: float) -> StoredExtent:
        """Hash the derived interests and push only the digests to CS."""
        assert self.cs is not None
        digests = hash_profile(self.profile, self.scheme)
        tx_type = TransactionType.UPLOAD if self.uploaded_digests is None else TransactionType.UPDATE
        self._ensure_genesis(None, now)
        tx = make_transaction(
            tx_type,
            user_digest=self.user_digest,
            app_digest=self.user_digest,
            sender=self.keys,
            prev_t_id=self.thread_heads[self._thread_key(None)],
            payload_plain=frame_all(digests),
            recipient_public_key=self.cs.keys.public_key,
            chain=self.chain,
            rng=self.rng,
        )
        self._adopt(tx, self._thread_key(None))
        self.bus.post(now, self.name, self.cs.name, tx.tx_type.value, ledger.canonical_encode(tx), t_id=tx.t_id)
        extent = store_records(
            self.name, self.keys, self.user_digest.hex(), self.cs, "profile-store",
            records=digests, tick=now, tx_type=tx_type, owner_digest=self.user_digest, rng=self.rng,
        )
        self.uploaded_digests = tuple(digests)
        return extent

    # -- sessions -----------------------------------------------------------

    def _session_for(self, app_id: str, now: float) -> Session:
        session = self.sessions.get(app_id)
        if session is not None and now - session.last_activity >= self.session_idle_hours:
            self.close_session(app_id, now)
            session = None
        if session is None:
            self._session_counter += 1
            session = Session(self._session_counter, app_id, started=now, last_activity=now)
            self.sessions[app_id] = session
        return session

    def close_session(self, app_id: str, now: float) -> None:
        """App exit or idle timeout: flush batched presentation billing and
        report quota fulfilment."""
        session = self.sessions.pop(app_id, None)
        if session is None:
            return
        self.closed_sessions.append(session)
        if session.presentations:
            self._send_billing(session, now)
        self._send_monitor(session, now)

    def close_all_sessions(self, now: float) -> None:
        for app_id in sorted(self.sessions):
            self.close_session(app_id, now)

    def _send_billing(self, session: Session, now: float) -> None:
        assert self.bs is not None
        # one billing transaction per advertiser (the deduction target)
        by_advertiser: dict[str, list[tuple[int, int]]] = {}
        for ad_id, count in sorted(session.presentations.items()):
            by_advertiser.setdefault(session.advertiser_of[ad_id], []).append((ad_id, count))
        app_digest = identity_digest(session.app_id)
        for advertiser in sorted(by_advertiser):
            items = by_advertiser[advertiser]
            body = frame_all(
                frame(BillingEvent.PRESENTATION.value.encode(), ad_id.to_bytes(8, "big"), count.to_bytes(8, "big"))
                for ad_id, count in items
            )
            tx = make_transaction(
                TransactionType.BILLING,
                user_digest=self.user_digest,
                app_digest=app_digest,
                sender=self.keys,
                prev_t_id=self.thread_heads[session.app_id],
                ad_ids=[ad_id for ad_id, _ in items],
                advertiser_id=advertiser,
                payload_plain=body,
                recipient_public_key=self.bs.keys.public_key,
                chain=self.chain,
                rng=self.rng,
            )
            self._adopt(tx, session.app_id)
            self.bus.post(now, self.name, self.bs.name, tx.tx_type.value, ledger.canonical_encode(tx), t_id=tx.t_id)
            self.bs.handle_billing(tx, now)

    def _send_monitor(self, session: Session, now: float) -> None:
        assert self.ch is not None and self.cs is not None
        under = [r for r in self.tracking.under_quota()]
        body = frame_all(
            frame(r.ad_id.to_bytes(8, "big"), r.required_frequency.to_bytes(8, "big"), r.served_count.to_bytes(8, "big"))
            for r in under
        ) or b"\x00"
        tx = make_transaction(
            TransactionType.MONITOR,
            user_digest=self.user_digest,
            app_digest=identity_digest(session.app_id),
            sender=self.keys,
            prev_t_id=self.thread_heads[session.app_id],
            payload_plain=body,
            recipient_public_key=self.ch.keys.public_key,
            chain=self.chain,
            rng=self.rng,
        )
        self._adopt(tx, session.app_id)
        self.bus.post(now, self.name, self.ch.name, tx.tx_type.value, ledger.canonical_encode(tx), t_id=tx.t_id)
        self.ch.forward_monitor(tx, self.cs, now)

    # -- the ad request flow --------------------------------------------------

    def request_ads(self, app_id: str, now: float) -> list[ServedAd]:
        """Run the full fetch: local policy, request transaction, CH and CS
        hops, decryption, session filtering, tracking update."""
        assert self.ch is not None and self.cs is not None
        app_digest = identity_digest(app_id)
        ctx = RequestContext(requester_id=app_digest.hex(), transaction_type="Request", resource="ad-request")
        if traverse(self.policy, ctx).decision is not Action.ALLOW:
            raise PolicyDenied(self.name, ctx)

        session = self._session_for(app_id, now)
        session.last_activity = now
        self._ensure_genesis(app_id, now)
        request = make_transaction(
            TransactionType.REQUEST,
            user_digest=self.user_digest,
            app_digest=app_digest,
            sender=self.keys,
            prev_t_id=self.thread_heads[app_id],
            input=session.served,
            chain=self.chain,
            rng=self.rng,
        )
        self._adopt(request, app_id)
        self.bus.post(now, self.name, self.ch.name, request.tx_type.value, ledger.canonical_encode(request), t_id=request.t_id)

        response = self.ch.forward_request(request, self.cs, now)
        self.bus.post(now, self.ch.name, self.name, response.tx_type.value, ledger.canonical_encode(response), t_id=response.t_id)
        if not verify_transaction(response) or response.prev_t_id != request.t_id:
            raise NodeError("response does not chain to the request")

        assert response.payload is not None
        bundle_digest, bundle = unframe(cryptokit.hybrid_decrypt(response.payload, self.keys))
        if digest(bundle, self.scheme) != bundle_digest:
            raise NodeError("response bundle digest mismatch")

        fresh: list[ServedAd] = []
        seen: set[int] = set()
        for env_raw in unframe(bundle):
            ad_id, advertiser, payload = open_ad(HybridEnvelope.from_bytes(env_raw), self.delivery_key)
            if ad_id in seen or ad_id in session.served:
                continue
            seen.add(ad_id)
            fresh.append(ServedAd(ad_id=ad_id, advertiser_id=advertiser, payload=payload))

        consumed = [ad.ad_id for ad in fresh]
        session.served.extend(consumed)
        for ad in fresh:
            session.presentations[ad.ad_id] += 1
            session.advertiser_of[ad.ad_id] = ad.advertiser_id
            quota = self.quota_overrides.get(ad.ad_id, self.default_quota)
            self.tracking.register(ad.ad_id, required_frequency=quota, timestamp=now)
            update_quota(self.tracking, ad.ad_id, BillingEvent.PRESENTATION, timestamp=now)

        record = make_transaction(
            TransactionType.RESPONSE,
            user_digest=self.user_digest,
            app_digest=app_digest,
            sender=self.keys,
            prev_t_id=request.t_id,
            ad_ids=consumed,
            output=consumed,
            chain=self.chain,
            rng=self.rng,
        )
        self._adopt(record, app_id)
        return fresh

    def click(self, app_id: str, ad_id: int, now: float) -> BillingDelta:
        """Click billing fires immediately."""
        assert self.bs is not None
        session = self.sessions.get(app_id)
        if session is None or ad_id not in session.advertiser_of:
            raise UnknownAdError(f"ad {ad_id} was not served to {app_id!r} this session")
        session.last_activity = now
        advertiser = session.advertiser_of[ad_id]
        body = frame_all([frame(BillingEvent.CLICK.value.encode(), ad_id.to_bytes(8, "big"), (1).to_bytes(8, "big"))])
        tx = make_transaction(
            TransactionType.BILLING,
            user_digest=self.user_digest,
            app_digest=identity_digest(app_id),
            sender=self.keys,
            prev_t_id=self.thread_heads[app_id],
            ad_ids=[ad_id],
            advertiser_id=advertiser,
            payload_plain=body,
            recipient_public_key=self.bs.keys.public_key,
            chain=self.chain,
            rng=self.rng,
        )
        self._adopt(tx, app_id)
        self.bus.post(now, self.name, self.bs.name, tx.tx_type.value, ledger.canonical_encode(tx), t_id=tx.t_id)
        update_quota(self.tracking, ad_id, BillingEvent.CLICK, timestamp=now)
        return self.bs.handle_billing(tx, now)[0]

    def remove_app(self, app_id: str, now: float) -> None:
        """Uninstall: emit a Remove record and drop the app's contribution
        from the local profile before re-deriving."""
        self._ensure_genesis(app_id, now)
        tx = make_transaction(
            TransactionType.REMOVE,
            user_digest=self.user_digest,
            app_digest=identity_digest(app_id),
            sender=self.keys,
            prev_t_id=self.thread_heads[app_id],
            chain=self.chain,
            rng=self.rng,
        )
        self._adopt(tx, app_id)
        self.bus.post(now, self.name, "CH", tx.tx_type.value, ledger.canonical_encode(tx), t_id=tx.t_id)
        kept = tuple(r for r in self.profile.activity_log if r.app_id != app_id)
        self.profile = InterestProfile(
            interests=self.profile.interests,
            demographics=self.profile.demographics,
            state=self.profile.state,
            activity_log=kept,
        )
        self.derive_profile(now)


def miner_profile_upload(miner: Miner, cs: CloudStorage, now: float = 0.0) -> StoredExtent:
    """Derive, hash and upload the profile; only digests leave the device."""
    if miner.cs is None:
        miner.cs = cs
    miner.derive_profile(now)
    return miner.upload_profile(now)


def ads_request(miner: Miner, app_id: str, now: float = 0.0) -> list[ServedAd]:
    return miner.request_ads(app_id, now)
