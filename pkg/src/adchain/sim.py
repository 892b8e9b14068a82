"""Scenario-driven end-to-end simulation.

A scenario is a small text file declaring the corpus (taxonomy, ads, app
map), policies, billing configuration, principals and a timeline of usage,
request, click, exit and remove events in simulated hours. Running it
wires up the five nodes, drives the full setup -> store -> profile ->
request -> bill pipeline and then checks the platform invariants:

  * privacy boundary: CS/CH traffic contains no plaintext interest, user
    id or app id from the scenario corpus;
  * billing conservation: committed events net to zero and no wallet goes
    negative;
  * flow completeness: responses chain to requests and every record walks
    back to a genesis;
  * session hygiene: no ad is served twice within one session.

Everything is seeded, so two runs with the same seed produce byte-identical
run logs.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from . import ledger
from .admatch import load_ads_manifest, load_taxonomy
from .cryptokit import DigestScheme, generate_keypair
from .ledger import TransactionType
from .nodes import (
    AdPlacementServer,
    BillingServer,
    CloudStorage,
    ClusterHead,
    MessageBus,
    Miner,
    NodeKeys,
    PolicyDenied,
    PriceTag,
    StorageArena,
    WalletLedger,
    identity_digest,
    scan_for_plaintext,
    store_index,
)
from .policy import Action, Match, PolicyDocument, PolicyRule, load_rules
from .profile import (
    AppRef,
    Demographic,
    InterestProfile,
    ProfileThresholds,
    hash_profile,
    load_app_interest_map,
)


class ScenarioError(Exception):
    pass


@dataclass
class Event:
    time: float
    order: int
    kind: str  # usage | request | click | exit | remove
    user: str
    app_id: str
    value: float = 0.0


@dataclass
class Scenario:
    base_dir: Path
    seed: int = 0
    keysize: int = 1024
    block_limit: int = 4
    session_idle_hours: float = 24.0
    digest_scheme: DigestScheme = DigestScheme.SHA256
    storage_block_capacity: int = 64
    taxonomy_path: Path | None = None
    ads_path: Path | None = None
    apps_map_path: Path | None = None
    cs_policy_path: Path | None = None
    ch_policy_path: Path | None = None
    miner_policy_path: Path | None = None
    cs_root_position: int = 1
    ch_root_position: int = 1
    miner_root_position: int = 1
    developer_share: Fraction = Fraction(7, 10)
    billing_share: Fraction = Fraction(3, 10)
    default_price: tuple[int, int] = (4, 10)
    prices: dict[int, tuple[int, int]] = field(default_factory=dict)
    default_quota: int = 100
    quotas: dict[int, int] = field(default_factory=dict)
    advertisers: dict[str, int] = field(default_factory=dict)
    users: list[str] = field(default_factory=list)
    demographics: dict[str, list[Demographic]] = field(default_factory=dict)
    events: list[Event] = field(default_factory=list)
    thresholds: ProfileThresholds = field(default_factory=ProfileThresholds)


def parse_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    sc = Scenario(base_dir=path.parent)
    order = 0
    t_est: float | None = None
    t_evo: float | None = None
    est_window = 24.0
    evo_window = 72.0
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key, args = parts[0], parts[1:]

        def need(n: int):
            if len(args) != n:
                raise ScenarioError(f"{path}:{lineno}: '{key}' takes {n} arguments")

        try:
            if key == "seed":
                need(1); sc.seed = int(args[0])
            elif key == "keysize":
                need(1); sc.keysize = int(args[0])
            elif key == "block-limit":
                need(1); sc.block_limit = int(args[0])
            elif key == "session-idle-hours":
                need(1); sc.session_idle_hours = float(args[0])
            elif key == "digest-scheme":
                need(1); sc.digest_scheme = DigestScheme.from_name(args[0])
            elif key == "storage-block-capacity":
                need(1); sc.storage_block_capacity = int(args[0])
            elif key == "t-est":
                need(1); t_est = float(args[0])
            elif key == "t-evo":
                need(1); t_evo = float(args[0])
            elif key == "establishment-window":
                need(1); est_window = float(args[0])
            elif key == "evolution-window":
                need(1); evo_window = float(args[0])
            elif key == "taxonomy":
                need(1); sc.taxonomy_path = sc.base_dir / args[0]
            elif key == "ads":
                need(1); sc.ads_path = sc.base_dir / args[0]
            elif key == "apps-map":
                need(1); sc.apps_map_path = sc.base_dir / args[0]
            elif key in ("cs-policy", "ch-policy", "miner-policy"):
                if len(args) not in (1, 2):
                    raise ScenarioError(f"{path}:{lineno}: '{key}' takes a path and optional root position")
                target = sc.base_dir / args[0]
                pos = int(args[1]) if len(args) == 2 else 1
                if key == "cs-policy":
                    sc.cs_policy_path, sc.cs_root_position = target, pos
                elif key == "ch-policy":
                    sc.ch_policy_path, sc.ch_root_position = target, pos
                else:
                    sc.miner_policy_path, sc.miner_root_position = target, pos
            elif key == "shares":
                need(2)
                sc.developer_share = Fraction(args[0])
                sc.billing_share = Fraction(args[1])
            elif key == "price":
                need(3)
                tag = (int(args[1]), int(args[2]))
                if args[0] == "*":
                    sc.default_price = tag
                else:
                    sc.prices[int(args[0])] = tag
            elif key == "quota":
                need(2)
                if args[0] == "*":
                    sc.default_quota = int(args[1])
                else:
                    sc.quotas[int(args[0])] = int(args[1])
            elif key == "advertiser":
                need(2); sc.advertisers[args[0]] = int(args[1])
            elif key == "user":
                need(1); sc.users.append(args[0])
            elif key == "demographic":
                need(3)
                sc.demographics.setdefault(args[0], []).append(Demographic(option=args[1], value=args[2]))
            elif key == "usage":
                need(4)
                sc.events.append(Event(float(args[3]), order, "usage", args[0], args[1], float(args[2])))
            elif key == "request":
                need(3)
                sc.events.append(Event(float(args[2]), order, "request", args[0], args[1]))
            elif key == "click":
                need(4)
                sc.events.append(Event(float(args[3]), order, "click", args[0], args[1], float(args[2])))
            elif key in ("exit", "remove"):
                need(3)
                sc.events.append(Event(float(args[2]), order, key, args[0], args[1]))
            else:
                raise ScenarioError(f"{path}:{lineno}: unknown directive {key!r}")
        except (ValueError, ZeroDivisionError) as exc:
            raise ScenarioError(f"{path}:{lineno}: {exc}") from exc
        order += 1
    for name, attr in (("taxonomy", sc.taxonomy_path), ("ads", sc.ads_path), ("apps-map", sc.apps_map_path)):
        if attr is None:
            raise ScenarioError(f"{path}: missing required '{name}' directive")
    sc.thresholds = ProfileThresholds(
        t_est=t_est, t_evo=t_evo, establishment_window=est_window, evolution_window=evo_window
    )
    sc.events.sort(key=lambda e: (e.time, e.order))
    return sc


def _resolve_policy_refs(rules: list[PolicyRule], keys: NodeKeys) -> list[PolicyRule]:
    """Replace @user:/@app:/@node: references in requester whitelists with
    the corresponding hex digests."""
    node_ids = {"aps": keys.aps.key_id.hex(), "cs": keys.cs.key_id.hex(),
                "ch": keys.ch.key_id.hex(), "bs": keys.bs.key_id.hex()}

    def resolve(value: str) -> str:
        if value.startswith("@user:") or value.startswith("@app:"):
            return identity_digest(value.split(":", 1)[1]).hex()
        if value.startswith("@node:"):
            return node_ids[value.split(":", 1)[1]]
        return value

    out = []
    for rule in rules:
        tests = {name: frozenset(resolve(v) for v in values) for name, values in rule.match.tests.items()}
        out.append(PolicyRule(index=rule.index, match=Match(tests=tests), action=rule.action))
    return out


_ALLOW_ALL = [PolicyRule(index=0, match=Match(tests={}), action=Action.ALLOW)]


@dataclass
class AssertionResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        suffix = f" ({self.detail})" if self.detail else ""
        return f"assert {self.name}: {status}{suffix}"


@dataclass
class SimulationReport:
    log_lines: list[str]
    assertions: list[AssertionResult]
    balances: dict[str, int]
    queued_billing: int
    served_total: int
    blocks: int
    transactions: int
    denied: list[str]

    @property
    def ok(self) -> bool:
        return all(a.passed for a in self.assertions)

    def run_log(self) -> str:
        return "\n".join(self.log_lines) + "\n"

    def summary_lines(self) -> list[str]:
        lines = [a.line() for a in self.assertions]
        lines.append(f"served ads: {self.served_total}")
        lines.append(f"transactions: {self.transactions}, blocks: {self.blocks}")
        lines.append(f"queued billing events: {self.queued_billing}")
        for wallet in sorted(self.balances):
            lines.append(f"wallet {wallet}: {self.balances[wallet]}")
        for d in self.denied:
            lines.append(f"policy denied: {d}")
        return lines


class Simulation:
    def __init__(self, scenario: Scenario, seed_override: int | None = None):
        self.sc = scenario
        self.seed = scenario.seed if seed_override is None else seed_override
        self.rng = random.Random(self.seed)
        self.bus = MessageBus()
        self.denied: list[str] = []
        self.served_total = 0

        self.taxonomy = load_taxonomy(scenario.taxonomy_path)
        self.ads = load_ads_manifest(scenario.ads_path, seed=self.seed)
        self.interest_map = load_app_interest_map(scenario.apps_map_path)

        self.keys = NodeKeys.generate(scenario.keysize, rng_seed=self.seed)

        def doc(path: Path | None, pos: int) -> PolicyDocument:
            rules = _resolve_policy_refs(load_rules(path), self.keys) if path else list(_ALLOW_ALL)
            return PolicyDocument(rules, root_position=min(pos, len(rules)) if rules else 1)

        self.ledger = WalletLedger(
            developer_share=scenario.developer_share,
            billing_share=scenario.billing_share,
            default_price=PriceTag(*scenario.default_price),
        )
        for ad_id, (prs, clk) in sorted(scenario.prices.items()):
            self.ledger.set_price(ad_id, PriceTag(prs, clk))
        for advertiser in sorted(scenario.advertisers):
            self.ledger.register_wallet(f"adv:{advertiser}", scenario.advertisers[advertiser])
        self.initial_total = self.ledger.total_balance()

        self.cs = CloudStorage(
            keys=self.keys.cs,
            policy_doc=doc(scenario.cs_policy_path, scenario.cs_root_position),
            bus=self.bus,
            arena=StorageArena(block_capacity=scenario.storage_block_capacity),
            scheme=scenario.digest_scheme,
            rng=self.rng,
        )
        self.ch = ClusterHead(self.keys.ch, doc(scenario.ch_policy_path, scenario.ch_root_position), self.bus)
        self.bs = BillingServer(self.keys.bs, self.ledger, self.bus)
        self.aps = AdPlacementServer(self.keys.aps, self.bus, rng=self.rng)

        miner_policy = doc(scenario.miner_policy_path, scenario.miner_root_position)
        self.miners: dict[str, Miner] = {}
        for i, user in enumerate(sorted(scenario.users)):
            miner = Miner(
                user_id=user,
                keys=generate_keypair(scenario.keysize, rng_seed=self.seed * 1009 + 7 + i),
                delivery_key=self.keys.delivery,
                local_policy=miner_policy,
                interest_map=self.interest_map,
                thresholds=scenario.thresholds,
                bus=self.bus,
                scheme=scenario.digest_scheme,
                rng=self.rng,
                session_idle_hours=scenario.session_idle_hours,
                block_limit=scenario.block_limit,
            )
            miner.default_quota = scenario.default_quota
            miner.quota_overrides = dict(scenario.quotas)
            miner.profile = InterestProfile(
                demographics=frozenset(scenario.demographics.get(user, [])),
            )
            miner.connect(cs=self.cs, ch=self.ch, bs=self.bs)
            self.miners[user] = miner

    def _miner(self, user: str) -> Miner:
        if user not in self.miners:
            raise ScenarioError(f"undeclared user {user!r}")
        return self.miners[user]

    def _app_ref(self, app_id: str) -> AppRef:
        category = self.interest_map.categories.get(app_id, "")
        if not category:
            raise ScenarioError(f"app {app_id!r} not present in the apps map")
        return AppRef(app_id=app_id, category=category, developer_id=f"dev-of-{app_id}")

    def _sync_profile(self, miner: Miner, now: float) -> None:
        """Derive and, when the hashed interests changed, upload to CS."""
        miner.derive_profile(now)
        if not miner.profile.interests:
            return
        digests = tuple(hash_profile(miner.profile, miner.scheme))
        if digests != miner.uploaded_digests:
            miner.upload_profile(now)

    def run(self) -> SimulationReport:
        index = self.aps.build_index(self.ads, self.taxonomy, self.keys, self.sc.digest_scheme)
        store_index(self.aps, self.cs, index, tick=0.0)

        last_time = 0.0
        for ev in self.sc.events:
            last_time = max(last_time, ev.time)
            miner = self._miner(ev.user)
            if ev.kind == "usage":
                miner.record_app_usage(self._app_ref(ev.app_id), ev.value, ev.time)
            elif ev.kind == "request":
                self._sync_profile(miner, ev.time)
                try:
                    served = miner.request_ads(ev.app_id, ev.time)
                    self.served_total += len(served)
                except PolicyDenied as exc:
                    self.denied.append(f"{exc.hop}: {exc}")
            elif ev.kind == "click":
                session = miner.sessions.get(ev.app_id)
                pos = int(ev.value)
                if session is None or not 1 <= pos <= len(session.served):
                    raise ScenarioError(f"click position {pos} out of range for {ev.app_id!r}")
                miner.click(ev.app_id, session.served[pos - 1], ev.time)
            elif ev.kind == "exit":
                miner.close_session(ev.app_id, ev.time)
            elif ev.kind == "remove":
                miner.remove_app(ev.app_id, ev.time)
                if miner.profile.interests:
                    self._sync_profile(miner, ev.time)

        for user in sorted(self.miners):
            self.miners[user].close_all_sessions(last_time + 1.0)

        return self._report()

    # -- invariant checks ---------------------------------------------------

    def _plaintext_corpus(self) -> list[str]:
        corpus = set()
        for doc in self.taxonomy:
            corpus.add(doc.interest.interest_id)
            corpus.add(doc.interest.category)
        for interests in self.interest_map.rows.values():
            for i in interests:
                corpus.add(i.interest_id)
                corpus.add(i.category)
        corpus.update(self.sc.users)
        corpus.update(self.interest_map.rows.keys())
        return sorted(corpus)

    def _report(self) -> SimulationReport:
        assertions = []

        watched = self.bus.seen_by(self.cs.name) + self.bus.seen_by(self.ch.name)
        hits = scan_for_plaintext(watched, self._plaintext_corpus())
        assertions.append(
            AssertionResult(
                "privacy-boundary",
                passed=not hits,
                detail="" if not hits else f"leaked {sorted({h[0] for h in hits})}",
            )
        )

        total = self.ledger.total_balance()
        negatives = {w: b for w, b in self.ledger.balances.items() if b < 0}
        nets = [d.net for d in self.bs.settled if d.committed]
        conserved = total == self.initial_total and not negatives and all(n == 0 for n in nets)
        assertions.append(
            AssertionResult(
                "billing-conservation",
                passed=conserved,
                detail=f"net {total - self.initial_total}, negatives {sorted(negatives)}" if not conserved else "",
            )
        )

        flow_ok, flow_detail = True, ""
        for user in sorted(self.miners):
            miner = self.miners[user]
            for tx in miner.chain.values():
                try:
                    trail = ledger.walk_chain(tx, miner.chain)
                except ledger.ChainError as exc:
                    flow_ok, flow_detail = False, f"{user}: {exc}"
                    break
                if tx.tx_type is TransactionType.RESPONSE:
                    if len(trail) < 2 or trail[1].tx_type is not TransactionType.REQUEST:
                        flow_ok, flow_detail = False, f"{user}: response without request parent"
                        break
            if not flow_ok:
                break
        assertions.append(AssertionResult("flow-completeness", passed=flow_ok, detail=flow_detail))

        hygiene_ok = True
        for user in sorted(self.miners):
            miner = self.miners[user]
            for session in miner.closed_sessions + list(miner.sessions.values()):
                if len(session.served) != len(set(session.served)):
                    hygiene_ok = False
        assertions.append(AssertionResult("session-hygiene", passed=hygiene_ok))

        transactions = sum(len(m.chain) for m in self.miners.values())
        blocks = sum(len(m.blocks) for m in self.miners.values())
        return SimulationReport(
            log_lines=self.bus.log_lines(),
            assertions=assertions,
            balances=dict(sorted(self.ledger.balances.items())),
            queued_billing=len(self.ledger.queue),
            served_total=self.served_total,
            blocks=blocks,
            transactions=transactions,
            denied=self.denied,
        )

    def dump_chains(self) -> bytes:
        txs = []
        for user in sorted(self.miners):
            txs.extend(self.miners[user].chain.values())
        return ledger.dump_transactions(txs)


def run_scenario(path: str | Path, seed_override: int | None = None) -> SimulationReport:
    return Simulation(parse_scenario(path), seed_override=seed_override).run()
