"""Keyword-based assignment of ads to profile interests.

Each ad and each interest carries a keyword set; an ad is assigned to the
interest(s) it scores highest against under tf-idf weighting. The raw
tf-idf sum is unbounded, so the reported score is the cosine similarity
between the tf-idf-weighted vectors of the two keyword collections, which
stays in [0, 1] for the non-negative weights used here and preserves the
argmax. `raw_tfidf_score` exposes the plain weighted sum for cross-checks.

Keywords are lowercased and whitespace-trimmed; no stemming. idf uses the
natural log of (document count / document frequency), with documents being
the interest keyword sets.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .profile import Interest


class MatchError(Exception):
    pass


class UnknownCategoryError(MatchError):
    pass


@dataclass(frozen=True)
class Ad:
    ad_id: int
    advertiser_id: str
    keywords: frozenset[str]
    payload: bytes

    def __post_init__(self):
        if self.ad_id < 1:
            raise ValueError("ad_id must be >= 1")


@dataclass(frozen=True)
class InterestKeywords:
    interest: Interest
    keywords: frozenset[str]

    def __post_init__(self):
        if not self.keywords:
            raise ValueError("interest keyword set must be non-empty")


@dataclass(frozen=True)
class MatchResult:
    assignments: Mapping[Interest, tuple[int, ...]]
    scores: Mapping[tuple[int, Interest], float]
    unassigned: tuple[int, ...] = ()

    def ads_for(self, interest: Interest) -> tuple[int, ...]:
        return self.assignments.get(interest, ())


def _norm_terms(keywords: Iterable[str]) -> list[str]:
    return [k.strip().lower() for k in keywords if k.strip()]


def _idf_table(corpus: Sequence[InterestKeywords]) -> dict[str, float]:
    """ln(N / df) per term over the interest documents; terms in every
    document get 0 and terms in none are simply absent (treated as 0)."""
    n_docs = len(corpus)
    df: Counter[str] = Counter()
    for doc in corpus:
        df.update(set(_norm_terms(doc.keywords)))
    return {t: math.log(n_docs / d) for t, d in df.items()}


def raw_tfidf_score(
    ad_keywords: Iterable[str],
    interest_keywords: Iterable[str],
    corpus: Sequence[InterestKeywords],
) -> float:
    """Plain sum of tf*idf over the ad's terms, with tf counted in the
    interest document. Unbounded above; kept for oracle comparisons."""
    if not corpus:
        raise MatchError("corpus must be non-empty")
    idf = _idf_table(corpus)
    doc_counts = Counter(_norm_terms(interest_keywords))
    return sum(doc_counts[t] * idf.get(t, 0.0) for t in set(_norm_terms(ad_keywords)))


def tfidf_score(
    ad_keywords: Iterable[str],
    interest_keywords: Iterable[str],
    corpus: Sequence[InterestKeywords],
) -> float:
    """Cosine similarity of the tf-idf vectors of the two keyword
    collections, in [0, 1]. Empty or all-zero-weight sides score 0.

    A single-document corpus is degenerate (every present term has
    idf = 0), so only there the weights fall back to raw term counts;
    with two or more documents a term present in every document really
    does contribute nothing.
    """
    if not corpus:
        raise MatchError("corpus must be non-empty")
    idf = _idf_table(corpus)
    degenerate = len(corpus) == 1

    def weights(terms: Iterable[str]) -> dict[str, float]:
        counts = Counter(_norm_terms(terms))
        if degenerate:
            return {t: float(c) for t, c in counts.items()}
        return {t: c * idf.get(t, 0.0) for t, c in counts.items() if idf.get(t, 0.0) > 0.0}

    va = weights(ad_keywords)
    vd = weights(interest_keywords)
    if not va or not vd:
        return 0.0
    dot = sum(w * vd[t] for t, w in va.items() if t in vd)
    if dot == 0.0:
        return 0.0
    norm = math.sqrt(sum(w * w for w in va.values())) * math.sqrt(sum(w * w for w in vd.values()))
    return min(1.0, dot / norm)


def assign_ads(ads: Sequence[Ad], taxonomy: Sequence[InterestKeywords]) -> MatchResult:
    """Assign every ad to its best-scoring interest(s).

    Ties assign the ad to all tied interests; ads scoring 0 everywhere end
    up in `unassigned`.
    """
    if not taxonomy:
        raise MatchError("taxonomy must be non-empty")
    assignments: dict[Interest, list[int]] = {}
    scores: dict[tuple[int, Interest], float] = {}
    unassigned: list[int] = []
    for ad in ads:
        best = 0.0
        per_interest: list[tuple[Interest, float]] = []
        for doc in taxonomy:
            s = tfidf_score(ad.keywords, doc.keywords, taxonomy)
            per_interest.append((doc.interest, s))
            scores[(ad.ad_id, doc.interest)] = s
            best = max(best, s)
        if best <= 0.0:
            unassigned.append(ad.ad_id)
            continue
        for interest, s in per_interest:
            if s == best:
                assignments.setdefault(interest, []).append(ad.ad_id)
    return MatchResult(
        assignments={k: tuple(v) for k, v in assignments.items()},
        scores=scores,
        unassigned=tuple(unassigned),
    )


def jaccard_category_match(
    app_category: str,
    interest_category: str,
    category_map: Mapping[str, frozenset[str] | set[str]],
) -> float:
    """Jaccard index of the two categories' token sets."""
    for name in (app_category, interest_category):
        if name not in category_map:
            raise UnknownCategoryError(f"unknown category: {name!r}")
    a = set(category_map[app_category])
    b = set(category_map[interest_category])
    if not a and not b:
        return 1.0
    union = a | b
    return len(a & b) / len(union)


def tokenize_categories(categories: Iterable[str]) -> dict[str, frozenset[str]]:
    """Default category token sets: lowercased words of the category name."""
    out: dict[str, frozenset[str]] = {}
    for cat in categories:
        tokens = frozenset(t for t in "".join(c if c.isalnum() else " " for c in cat.lower()).split() if t)
        out[cat] = tokens
    return out


def load_taxonomy(path: str | Path) -> list[InterestKeywords]:
    """Interest taxonomy file: ``interest_id<TAB>category<TAB>kw1,kw2,...``."""
    docs: list[InterestKeywords] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise MatchError(f"{path}:{lineno}: expected interest_id<TAB>category<TAB>keywords")
        iid, cat, kws = (p.strip() for p in parts)
        keywords = frozenset(_norm_terms(kws.split(",")))
        docs.append(InterestKeywords(interest=Interest(iid, cat), keywords=keywords))
    return docs


def synthesize_payload(ad_id: int, size: int, seed: int) -> bytes:
    """Deterministic pseudo-random ad content for a manifest entry."""
    return random.Random(f"ad-payload:{seed}:{ad_id}").randbytes(size)


def load_ads_manifest(path: str | Path, seed: int = 0) -> list[Ad]:
    """Ads manifest: ``ad_id<TAB>advertiser_id<TAB>payload_size_bytes<TAB>kw1,...``;
    payload bytes are synthesized deterministically from `seed`."""
    ads: list[Ad] = []
    seen: set[int] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise MatchError(f"{path}:{lineno}: expected ad_id<TAB>advertiser<TAB>size<TAB>keywords")
        ad_id = int(parts[0])
        if ad_id in seen:
            raise MatchError(f"{path}:{lineno}: duplicate ad_id {ad_id}")
        seen.add(ad_id)
        size = int(parts[2])
        ads.append(
            Ad(
                ad_id=ad_id,
                advertiser_id=parts[1].strip(),
                keywords=frozenset(_norm_terms(parts[3].split(","))),
                payload=synthesize_payload(ad_id, size, seed),
            )
        )
    return ads


def generate_ads_manifest(
    n: int,
    taxonomy: Sequence[InterestKeywords],
    seed: int,
    advertisers: Sequence[str] = ("adv-1", "adv-2", "adv-3"),
    min_size: int = 12 * 1024,
    max_size: int = 20 * 1024,
) -> list[str]:
    """Rows for a synthetic ads manifest whose keywords are sampled from the
    taxonomy, so every ad is matchable. Sizes are uniform in [min, max]."""
    if not taxonomy:
        raise MatchError("taxonomy must be non-empty")
    rng = random.Random(seed)
    rows = []
    for ad_id in range(1, n + 1):
        doc = rng.choice(list(taxonomy))
        pool = sorted(doc.keywords)
        k = rng.randint(2, max(2, min(5, len(pool))))
        keywords = rng.sample(pool, min(k, len(pool)))
        size = rng.randint(min_size, max_size)
        advertiser = advertisers[(ad_id - 1) % len(advertisers)]
        rows.append(f"{ad_id}\t{advertiser}\t{size}\t{','.join(keywords)}")
    return rows
