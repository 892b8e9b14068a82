"""Access-control engine: binary policy trees with multi-version documents.

A policy is an ordered list of (match, action) rules arranged as a binary
tree: the configured root position splits the list into a left spine
(earlier rules) and a right spine (later rules). Traversal starts at the
root; a node whose match accepts the context either decides (Allow/Deny)
or routes onward (RouteNext, preferring the left child), while a
non-matching node sends the walk right. When the preferred side is absent
the walk falls through to the existing child, so spine-shaped trees are
traversed end to end; reaching a leaf without a decisive match denies.

Documents keep a published read copy and a mutable modify copy. Readers
always traverse an immutable snapshot; publishing swaps the copies and
bumps the version, optionally guarded by a compare-and-set version check.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class PolicyError(Exception):
    pass


class VersionConflictError(PolicyError):
    """Publish raced another writer; retry against the current version."""


class Action(Enum):
    ALLOW = "ALLOW"
    DENY = "DENY"
    ROUTE_NEXT = "ROUTE"


CONTEXT_FIELDS = ("requester_id", "transaction_type", "resource")


@dataclass(frozen=True)
class RequestContext:
    requester_id: str  # hex digest of the requesting identity
    transaction_type: str
    resource: str

    def value_of(self, field_name: str) -> str:
        if field_name not in CONTEXT_FIELDS:
            raise PolicyError(f"unknown context field: {field_name!r}")
        return getattr(self, field_name)


@dataclass(frozen=True)
class Match:
    """Conjunction of per-field whitelists; '*' accepts any value and an
    empty descriptor matches every context."""

    tests: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.tests:
            if name not in CONTEXT_FIELDS:
                raise PolicyError(f"unknown context field: {name!r}")

    def accepts(self, ctx: RequestContext) -> bool:
        for name, allowed in self.tests.items():
            if "*" not in allowed and ctx.value_of(name) not in allowed:
                return False
        return True


@dataclass(frozen=True)
class PolicyRule:
    index: int  # position in the ordered rule list
    match: Match
    action: Action


@dataclass(frozen=True)
class PolicyNode:
    rule: PolicyRule
    left: "PolicyNode | None" = None
    right: "PolicyNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None and self.right is None


@dataclass(frozen=True)
class TraversalResult:
    decision: Action  # ALLOW or DENY
    matched_rule_index: int | None
    path_length: int


def build_tree(rules: Sequence[PolicyRule], root_position: int) -> PolicyNode:
    """Arrange rules as a tree with `root_position` (1-based) as the root:
    the root_position-1 earlier rules form the left spine, the rest the
    right spine."""
    if not rules:
        raise PolicyError("cannot build a tree from zero rules")
    if not 1 <= root_position <= len(rules):
        raise PolicyError(f"root_position {root_position} out of range 1..{len(rules)}")

    def chain(items: Sequence[PolicyRule], side: str) -> PolicyNode | None:
        node: PolicyNode | None = None
        order = items if side == "left" else reversed(items)
        for rule in order:
            node = PolicyNode(rule=rule, left=node if side == "left" else None, right=node if side == "right" else None)
        return node

    p = root_position - 1
    left = chain(rules[:p], "left")
    right = chain(rules[p + 1 :], "right")
    return PolicyNode(rule=rules[p], left=left, right=right)


def traverse_tree(root: PolicyNode, ctx: RequestContext) -> TraversalResult:
    """Walk the tree for `ctx`; default decision is Deny."""
    node: PolicyNode | None = root
    visited = 0
    while node is not None:
        visited += 1
        if node.rule.match.accepts(ctx):
            if node.rule.action is not Action.ROUTE_NEXT:
                return TraversalResult(node.rule.action, node.rule.index, visited)
            nxt = node.left if node.left is not None else node.right
        else:
            nxt = node.right if node.right is not None else node.left
        node = nxt
    return TraversalResult(Action.DENY, None, visited)


@dataclass(frozen=True)
class _Snapshot:
    version: int
    root: PolicyNode | None
    rules: tuple[PolicyRule, ...]


class PolicyDocument:
    """Multi-version policy holder: lock-free reads, serialized publishes."""

    def __init__(self, rules: Iterable[PolicyRule], root_position: int = 1):
        self._root_position = root_position
        self._pending: list[PolicyRule] = list(rules)
        self._published = _Snapshot(version=0, root=None, rules=())
        self._publish_lock = threading.Lock()
        self.publish()

    @property
    def version(self) -> int:
        return self._published.version

    @property
    def read_copy(self) -> PolicyNode | None:
        return self._published.root

    @property
    def modify_copy(self) -> tuple[PolicyRule, ...]:
        return tuple(self._pending)

    def snapshot(self) -> _Snapshot:
        return self._published  # single attribute read: atomic under the GIL

    def insert_rule(self, position: int, match: Match, action: Action) -> None:
        self._pending.insert(position, PolicyRule(index=-1, match=match, action=action))
        self._reindex()

    def remove_rule(self, position: int) -> None:
        del self._pending[position]
        self._reindex()

    def _reindex(self) -> None:
        self._pending = [PolicyRule(index=i, match=r.match, action=r.action) for i, r in enumerate(self._pending)]

    def publish(self, expected_version: int | None = None) -> int:
        """Swap the modify copy in as the new read copy. With
        `expected_version`, fail if another publish won the race."""
        with self._publish_lock:
            if expected_version is not None and self._published.version != expected_version:
                raise VersionConflictError(
                    f"expected version {expected_version}, document is at {self._published.version}"
                )
            rules = tuple(self._pending)
            pos = min(max(1, self._root_position), len(rules)) if rules else 1
            root = build_tree(rules, pos) if rules else None
            self._published = _Snapshot(version=self._published.version + 1, root=root, rules=rules)
            return self._published.version


def traverse(doc: PolicyDocument, ctx: RequestContext) -> TraversalResult:
    """Evaluate `ctx` against the published read copy of `doc`; the whole
    walk runs on one immutable snapshot."""
    snap = doc.snapshot()
    if snap.version < 1:
        raise PolicyError("document has never been published")
    if snap.root is None:
        return TraversalResult(Action.DENY, None, 0)
    return traverse_tree(snap.root, ctx)


def update_policy(doc: PolicyDocument, edit) -> PolicyDocument:
    """Apply a callable edit to the modify copy; readers keep seeing the old
    version until `doc.publish()`."""
    edit(doc)
    return doc


def parse_match(spec: str) -> Match:
    """Parse ``field=v1|v2[,field=value]`` (or ``*`` for match-all)."""
    spec = spec.strip()
    if spec == "*" or not spec:
        return Match(tests={})
    tests: dict[str, frozenset[str]] = {}
    for clause in spec.split(","):
        if "=" not in clause:
            raise PolicyError(f"malformed match clause: {clause!r}")
        name, values = clause.split("=", 1)
        tests[name.strip()] = frozenset(v.strip() for v in values.split("|") if v.strip())
    return Match(tests=tests)


def load_rules(path: str | Path) -> list[PolicyRule]:
    """Rule file: one rule per line, ``index<TAB>match-spec<TAB>ALLOW|DENY|ROUTE``.
    Rules are ordered by the index column."""
    entries: list[tuple[int, Match, Action]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise PolicyError(f"{path}:{lineno}: expected index<TAB>match<TAB>action")
        try:
            action = Action(parts[2].strip().upper())
        except ValueError as exc:
            raise PolicyError(f"{path}:{lineno}: unknown action {parts[2]!r}") from exc
        entries.append((int(parts[0]), parse_match(parts[1]), action))
    entries.sort(key=lambda e: e[0])
    return [PolicyRule(index=i, match=m, action=a) for i, (_, m, a) in enumerate(entries)]
