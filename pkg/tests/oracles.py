"""Independent reference implementations used by unit and acceptance tests.

These deliberately recompute results from first principles (index
arithmetic, dict-free loops) rather than calling back into the library
code paths they check.
"""

import math

from adchain import policy as pol


def oracle_idf(term, corpus):
    term = term.strip().lower()
    df = 0
    for doc in corpus:
        if term in {k.strip().lower() for k in doc.keywords}:
            df += 1
    return 0.0 if df == 0 else math.log(len(corpus) / df)


def oracle_cosine(ad_kw, doc_kw, corpus):
    """Exhaustive tf-idf cosine over binary term vectors (keyword sets)."""
    ad = {k.strip().lower() for k in ad_kw}
    doc = {k.strip().lower() for k in doc_kw}
    terms = sorted(ad | doc)
    if len(corpus) == 1:
        va = [1.0 if t in ad else 0.0 for t in terms]
        vd = [1.0 if t in doc else 0.0 for t in terms]
    else:
        va = [(1.0 if t in ad else 0.0) * oracle_idf(t, corpus) for t in terms]
        vd = [(1.0 if t in doc else 0.0) * oracle_idf(t, corpus) for t in terms]
    dot = sum(a * d for a, d in zip(va, vd))
    na = math.sqrt(sum(a * a for a in va))
    nd = math.sqrt(sum(d * d for d in vd))
    if na == 0.0 or nd == 0.0 or dot == 0.0:
        return 0.0
    return min(1.0, dot / (na * nd))


def oracle_assign(ads, taxonomy):
    """Exhaustive score matrix + argmax with ties; returns
    (assignments: {interest -> [ad_id]}, scores, unassigned)."""
    assignments = {}
    scores = {}
    unassigned = []
    for ad in ads:
        row = [(doc.interest, oracle_cosine(ad.keywords, doc.keywords, taxonomy)) for doc in taxonomy]
        for interest, s in row:
            scores[(ad.ad_id, interest)] = s
        best = max(s for _, s in row)
        if best <= 0.0:
            unassigned.append(ad.ad_id)
            continue
        for interest, s in row:
            if s == best:
                assignments.setdefault(interest, []).append(ad.ad_id)
    return assignments, scores, unassigned


def spine_scan(rules, root_position, ctx):
    """Linear-scan decision oracle for spine trees built from an ordered
    rule list: traversal order derived purely from indices."""
    p = root_position - 1
    n = len(rules)
    root = rules[p]
    left = list(range(p - 1, -1, -1))
    right = list(range(p + 1, n))
    order = [p]
    if root.match.accepts(ctx):
        if root.action is not pol.Action.ROUTE_NEXT:
            return root.action, p, 1
        order += left if left else right
    else:
        order += right if right else left
    for walked, idx in enumerate(order[1:], start=2):
        r = rules[idx]
        if r.match.accepts(ctx) and r.action is not pol.Action.ROUTE_NEXT:
            return r.action, idx, walked
    return pol.Action.DENY, None, len(order)
