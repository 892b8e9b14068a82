"""On-device interest profiling.

A user's interest profile is derived purely from their app-usage log: apps
map deterministically to interest sets, an app contributes once its
cumulative usage crosses a threshold, and the profile is the union of the
contributions plus user-declared demographics. Time is simulated hours, so
every derivation is a pure function of (log, map, thresholds, now).

Lifecycle: a fresh profile is Empty; activity inside the establishment
window puts it in Establishing; when the window closes it turns Stable with
the established app set frozen. A later app outside that set that crosses
the evolution threshold opens a single evolution window (Evolving), after
which the grown profile is Stable again. Only one evolution cycle is
modelled; the reachable state sequences are exactly the prefixes of
Empty -> Establishing -> Stable -> Evolving -> Stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .cryptokit import DigestScheme, digest


class ProfileError(Exception):
    pass


class TaxonomyError(ProfileError):
    """App or interest not drawn from the configured taxonomy."""


class EmptyProfileError(ProfileError):
    """Operation needs a derived, non-empty interest set."""


class ProfileState(Enum):
    EMPTY = "empty"
    ESTABLISHING = "establishing"
    STABLE = "stable"
    EVOLVING = "evolving"


@dataclass(frozen=True)
class AppRef:
    app_id: str
    category: str
    developer_id: str

    def __post_init__(self):
        if not self.app_id:
            raise ValueError("app_id must be non-empty")


@dataclass(frozen=True)
class AppsProfile:
    """The set of apps installed on a device; app_ids are unique."""

    entries: frozenset[AppRef]

    def __post_init__(self):
        ids = [a.app_id for a in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate app_id in apps profile")

    def categories(self) -> frozenset[str]:
        return frozenset(a.category for a in self.entries)


@dataclass(frozen=True, order=True)
class Interest:
    interest_id: str
    category: str

    def canonical_bytes(self) -> bytes:
        """Injective byte encoding used for digests of this interest."""
        iid = self.interest_id.encode("utf-8")
        cat = self.category.encode("utf-8")
        return len(iid).to_bytes(4, "big") + iid + len(cat).to_bytes(4, "big") + cat


@dataclass(frozen=True)
class Demographic:
    option: str  # e.g. "age"
    value: str  # e.g. "25-34"

    def __post_init__(self):
        if not self.option:
            raise ValueError("demographic option must be non-empty")


@dataclass(frozen=True)
class AppInterestMap:
    """Fixed app -> interest-set mapping; apps absent from `rows` derive
    nothing. `categories` records each known app's marketplace category."""

    rows: Mapping[str, frozenset[Interest]]
    categories: Mapping[str, str] = field(default_factory=dict)

    def interests_for(self, app_id: str) -> frozenset[Interest]:
        return self.rows.get(app_id, frozenset())

    def category_set(self) -> frozenset[str]:
        return frozenset(self.categories.values())


@dataclass(frozen=True)
class UsageRecord:
    app_id: str
    duration: float  # simulated hours
    timestamp: float  # simulated hours


@dataclass(frozen=True)
class ProfileThresholds:
    """Qualification thresholds and phase windows, in simulated hours.

    When t_est / t_evo are None they default per derivation to
    window / n  (n = distinct apps in the log), floored at one hour.
    """

    t_est: float | None = None
    t_evo: float | None = None
    establishment_window: float = 24.0
    evolution_window: float = 72.0

    def __post_init__(self):
        for name in ("t_est", "t_evo"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.establishment_window <= 0 or self.evolution_window <= 0:
            raise ValueError("windows must be strictly positive")

    def effective_t_est(self, n_apps: int) -> float:
        if self.t_est is not None:
            return self.t_est
        return max(1.0, self.establishment_window / max(1, n_apps))

    def effective_t_evo(self, n_apps: int) -> float:
        if self.t_evo is not None:
            return self.t_evo
        return max(1.0, self.evolution_window / max(1, n_apps))


@dataclass(frozen=True)
class InterestProfile:
    interests: frozenset[Interest] = frozenset()
    demographics: frozenset[Demographic] = frozenset()
    state: ProfileState = ProfileState.EMPTY
    activity_log: tuple[UsageRecord, ...] = ()

    def __post_init__(self):
        options = [d.option for d in self.demographics]
        if len(options) != len(set(options)):
            raise ValueError("at most one value per demographic option")

    def sorted_interests(self) -> list[Interest]:
        return sorted(self.interests)


def record_usage(
    profile: InterestProfile,
    app: AppRef,
    duration: float,
    now: float,
    categories: Iterable[str] | None = None,
) -> InterestProfile:
    """Append one usage record; interests are untouched until `derive`.

    `categories`, when given, is the marketplace category set and unknown
    app categories are rejected.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if categories is not None and app.category not in set(categories):
        raise TaxonomyError(f"unknown app category: {app.category!r}")
    entry = UsageRecord(app_id=app.app_id, duration=duration, timestamp=now)
    return replace(profile, activity_log=profile.activity_log + (entry,))


def _usage_until(log: Iterable[UsageRecord], cutoff: float, inclusive: bool) -> dict[str, float]:
    """Cumulative hours per app over entries before `cutoff` (phase windows
    are half-open, so window ends use inclusive=False)."""
    totals: dict[str, float] = {}
    for rec in log:
        if rec.timestamp <= cutoff if inclusive else rec.timestamp < cutoff:
            totals[rec.app_id] = totals.get(rec.app_id, 0.0) + rec.duration
    return totals


def _crossing_time(log: Iterable[UsageRecord], app_id: str, threshold: float) -> float | None:
    """Timestamp of the log entry at which `app_id`'s cumulative usage first
    reaches `threshold`, or None if it never does."""
    total = 0.0
    for rec in sorted(log, key=lambda r: (r.timestamp, r.app_id)):
        if rec.app_id != app_id:
            continue
        total += rec.duration
        if total >= threshold:
            return rec.timestamp
    return None


def derive(
    profile: InterestProfile,
    interest_map: AppInterestMap,
    thresholds: ProfileThresholds,
    now: float,
) -> InterestProfile:
    """Recompute interests and lifecycle state from the activity log.

    Pure in (log, map, thresholds, now): re-deriving is idempotent and
    identical inputs always give identical interests.
    """
    log = profile.activity_log
    if not log:
        return replace(profile, interests=frozenset(), state=ProfileState.EMPTY)

    t0 = min(r.timestamp for r in log)
    n = len({r.app_id for r in log})
    t_est = thresholds.effective_t_est(n)
    t_evo = thresholds.effective_t_evo(n)
    est_end = t0 + thresholds.establishment_window

    if now < est_end:
        usage = _usage_until(log, now, inclusive=True)
        qualified = {a for a, hours in usage.items() if hours >= t_est}
        interests = frozenset().union(*(interest_map.interests_for(a) for a in qualified)) if qualified else frozenset()
        return replace(profile, interests=interests, state=ProfileState.ESTABLISHING)

    est_usage = _usage_until(log, est_end, inclusive=False)
    established = {a for a, hours in est_usage.items() if hours >= t_est}
    interests = frozenset().union(*(interest_map.interests_for(a) for a in established)) if established else frozenset()

    # One evolution cycle: the first app outside the established set to
    # accumulate t_evo hours opens the window.
    novel = sorted({r.app_id for r in log} - established)
    evo_start: float | None = None
    for app_id in novel:
        t = _crossing_time(log, app_id, t_evo)
        if t is not None:
            t = max(t, est_end)
            evo_start = t if evo_start is None else min(evo_start, t)
    if evo_start is None or evo_start > now:
        return replace(profile, interests=interests, state=ProfileState.STABLE)

    evo_end = evo_start + thresholds.evolution_window
    if now < evo_end:
        evo_usage = _usage_until(log, now, inclusive=True)
    else:
        evo_usage = _usage_until(log, evo_end, inclusive=False)
    evolved = {a for a in novel if evo_usage.get(a, 0.0) >= t_evo}
    grown = interests.union(*(interest_map.interests_for(a) for a in evolved)) if evolved else interests
    state = ProfileState.EVOLVING if now < evo_end else ProfileState.STABLE
    return replace(profile, interests=grown, state=state)


def hash_profile(profile: InterestProfile, scheme: DigestScheme = DigestScheme.SHA256) -> list[bytes]:
    """Digest each interest (sorted order) under `scheme`; demographics stay
    local and are never hashed. Raises EmptyProfileError when there is
    nothing to upload."""
    if not profile.interests:
        raise EmptyProfileError("profile has no derived interests")
    return [digest(i.canonical_bytes(), scheme) for i in profile.sorted_interests()]


def load_app_interest_map(path: str | Path) -> AppInterestMap:
    """Load the fixed apps->interests mapping.

    One line per app: ``app_id<TAB>category<TAB>interest_id:interest_category[,...]``.
    An empty third field models apps that contribute nothing.
    """
    rows: dict[str, frozenset[Interest]] = {}
    categories: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise TaxonomyError(f"{path}:{lineno}: expected at least app_id<TAB>category")
        app_id, category = parts[0].strip(), parts[1].strip()
        spec = parts[2].strip() if len(parts) > 2 else ""
        interests = set()
        if spec:
            for item in spec.split(","):
                if ":" not in item:
                    raise TaxonomyError(f"{path}:{lineno}: malformed interest {item!r}")
                iid, icat = item.split(":", 1)
                interests.add(Interest(interest_id=iid.strip(), category=icat.strip()))
        if app_id in rows:
            raise TaxonomyError(f"{path}:{lineno}: duplicate app {app_id!r}")
        rows[app_id] = frozenset(interests)
        categories[app_id] = category
    return AppInterestMap(rows=rows, categories=categories)
