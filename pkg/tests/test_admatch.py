import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adchain import admatch as am
from adchain.profile import Interest

I_GAMBLING = Interest("gambling", "entertainment")
I_FITNESS = Interest("fitness", "lifestyle")
I_TRAVEL = Interest("travel", "lifestyle")

CORPUS = [
    am.InterestKeywords(I_GAMBLING, frozenset({"poker", "casino", "chips"})),
    am.InterestKeywords(I_FITNESS, frozenset({"run", "shoes"})),
    am.InterestKeywords(I_TRAVEL, frozenset({"casino", "flights"})),
]


def make_ad(ad_id, keywords, advertiser="adv", size=12 * 1024):
    return am.Ad(ad_id=ad_id, advertiser_id=advertiser, keywords=frozenset(keywords), payload=b"\x00" * size)


def oracle_idf(term, corpus):
    df = sum(1 for doc in corpus if term in {k.strip().lower() for k in doc.keywords})
    return 0.0 if df == 0 else math.log(len(corpus) / df)


def oracle_cosine(ad_kw, doc_kw, corpus):
    terms = sorted({k.strip().lower() for k in ad_kw} | {k.strip().lower() for k in doc_kw})
    va = [(1 if t in ad_kw else 0) * oracle_idf(t, corpus) for t in terms]
    vd = [(1 if t in doc_kw else 0) * oracle_idf(t, corpus) for t in terms]
    dot = sum(a * d for a, d in zip(va, vd))
    na = math.sqrt(sum(a * a for a in va))
    nd = math.sqrt(sum(d * d for d in vd))
    if na == 0 or nd == 0 or dot == 0:
        return 0.0
    return dot / (na * nd)


class TestTfidfScore:
    def test_disjoint_keywords_score_zero(self):
        assert am.tfidf_score({"quantum", "mechanics"}, CORPUS[0].keywords, CORPUS) == 0.0

    def test_identical_unique_keywords_score_one(self):
        # every term unique to the fitness document -> vectors coincide
        assert am.tfidf_score({"run", "shoes"}, CORPUS[1].keywords, CORPUS) == pytest.approx(1.0)

    def test_raw_sum_matches_hand_computation(self):
        # tf = 1 for both terms in the gambling document;
        # idf(poker) = ln(3/1), idf(casino) = ln(3/2); sum = ln(4.5)
        raw = am.raw_tfidf_score({"poker", "casino"}, CORPUS[0].keywords, CORPUS)
        assert raw == pytest.approx(math.log(4.5), abs=1e-12)

    def test_cosine_matches_independent_oracle(self):
        got = am.tfidf_score({"poker", "casino"}, CORPUS[0].keywords, CORPUS)
        want = oracle_cosine({"poker", "casino"}, CORPUS[0].keywords, CORPUS)
        assert got == pytest.approx(want, abs=1e-12)

    def test_empty_ad_keywords_scores_zero(self):
        assert am.tfidf_score(set(), CORPUS[0].keywords, CORPUS) == 0.0

    def test_term_in_every_document_contributes_nothing(self):
        corpus = [
            am.InterestKeywords(I_GAMBLING, frozenset({"common", "poker"})),
            am.InterestKeywords(I_FITNESS, frozenset({"common", "run"})),
        ]
        assert am.tfidf_score({"common"}, corpus[0].keywords, corpus) == 0.0

    def test_empty_corpus_rejected(self):
        with pytest.raises(am.MatchError):
            am.tfidf_score({"x"}, {"x"}, [])

    @given(st.sets(st.sampled_from(["poker", "casino", "run", "shoes", "flights", "zzz"]), max_size=5))
    @settings(max_examples=60, deadline=None)
    def test_score_always_in_unit_interval(self, ad_kw):
        for doc in CORPUS:
            s = am.tfidf_score(ad_kw, doc.keywords, CORPUS)
            assert 0.0 <= s <= 1.0


class TestAssignAds:
    def test_single_candidate_assignment(self):
        ad = make_ad(1, {"poker", "chips"})
        res = am.assign_ads([ad], [CORPUS[0]])
        assert res.ads_for(I_GAMBLING) == (1,)
        assert not res.unassigned

    def test_identical_interest_keyword_sets_tie(self):
        # twins plus one distinct document, so the twin terms keep idf > 0
        twin_a = am.InterestKeywords(Interest("a", "c"), frozenset({"poker", "casino"}))
        twin_b = am.InterestKeywords(Interest("b", "c"), frozenset({"poker", "casino"}))
        other = am.InterestKeywords(Interest("o", "c"), frozenset({"run", "shoes"}))
        res = am.assign_ads([make_ad(1, {"poker"})], [twin_a, twin_b, other])
        assert res.ads_for(Interest("a", "c")) == (1,)
        assert res.ads_for(Interest("b", "c")) == (1,)
        assert res.ads_for(Interest("o", "c")) == ()

    def test_unmatchable_ad_lands_in_unassigned(self):
        res = am.assign_ads([make_ad(9, {"xylophone"})], CORPUS)
        assert res.unassigned == (9,)
        assert all(9 not in ids for ids in res.assignments.values())

    def test_random_corpus_matches_bruteforce_argmax(self):
        rng = random.Random(7)
        pool = ["poker", "casino", "chips", "run", "shoes", "flights", "hotel", "code", "music", "cats"]
        taxonomy = [
            am.InterestKeywords(Interest(f"i{k}", "c"), frozenset(rng.sample(pool, rng.randint(2, 4))))
            for k in range(5)
        ]
        ads = [make_ad(i + 1, set(rng.sample(pool, rng.randint(1, 4)))) for i in range(10)]
        res = am.assign_ads(ads, taxonomy)
        for ad in ads:
            scores = {doc.interest: oracle_cosine(ad.keywords, doc.keywords, taxonomy) for doc in taxonomy}
            best = max(scores.values())
            if best <= 0:
                assert ad.ad_id in res.unassigned
                continue
            winners = {i for i, s in scores.items() if s == pytest.approx(best, abs=1e-12)}
            assigned_to = {i for i in scores if ad.ad_id in res.ads_for(i)}
            assert assigned_to == winners

    def test_payload_bytes_never_affect_assignment(self):
        small = [make_ad(1, {"poker"}, size=12 * 1024)]
        large = [make_ad(1, {"poker"}, size=20 * 1024)]
        assert am.assign_ads(small, CORPUS).assignments == am.assign_ads(large, CORPUS).assignments

    def test_empty_ads_list_gives_empty_result(self):
        res = am.assign_ads([], CORPUS)
        assert not res.assignments and not res.unassigned

    def test_empty_taxonomy_rejected(self):
        with pytest.raises(am.MatchError):
            am.assign_ads([make_ad(1, {"x"})], [])


class TestJaccard:
    CMAP = {
        "games arcade": frozenset({"games", "arcade"}),
        "games puzzle": frozenset({"games", "puzzle"}),
        "cooking": frozenset({"cooking"}),
    }

    def test_identical_categories(self):
        assert am.jaccard_category_match("cooking", "cooking", self.CMAP) == 1.0

    def test_disjoint_categories(self):
        assert am.jaccard_category_match("games arcade", "cooking", self.CMAP) == 0.0

    def test_one_third_overlap(self):
        # {games, arcade} vs {games, puzzle}: |{games}| / |{games,arcade,puzzle}|
        assert am.jaccard_category_match("games arcade", "games puzzle", self.CMAP) == pytest.approx(1 / 3)

    def test_unknown_category_rejected(self):
        with pytest.raises(am.UnknownCategoryError):
            am.jaccard_category_match("nope", "cooking", self.CMAP)

    def test_tokenizer(self):
        toks = am.tokenize_categories(["Card Games", "video-gaming"])
        assert toks["Card Games"] == frozenset({"card", "games"})
        assert toks["video-gaming"] == frozenset({"video", "gaming"})


class TestLoaders:
    def test_bundled_taxonomy(self, data_dir):
        docs = am.load_taxonomy(data_dir / "taxonomy.tsv")
        assert len(docs) == 8
        by_id = {d.interest.interest_id: d for d in docs}
        assert "poker" in by_id["poker"].keywords

    def test_bundled_ads_manifest_sizes_and_determinism(self, data_dir):
        ads = am.load_ads_manifest(data_dir / "ads.tsv", seed=42)
        again = am.load_ads_manifest(data_dir / "ads.tsv", seed=42)
        assert len(ads) == 12
        for ad, ad2 in zip(ads, again):
            assert 12 * 1024 <= len(ad.payload) <= 20 * 1024
            assert ad.payload == ad2.payload
        other = am.load_ads_manifest(data_dir / "ads.tsv", seed=43)
        assert any(a.payload != b.payload for a, b in zip(ads, other))

    def test_generated_manifest_is_matchable(self, data_dir, tmp_path):
        taxonomy = am.load_taxonomy(data_dir / "taxonomy.tsv")
        rows = am.generate_ads_manifest(50, taxonomy, seed=3)
        f = tmp_path / "gen.tsv"
        f.write_text("\n".join(rows) + "\n")
        ads = am.load_ads_manifest(f, seed=3)
        assert len(ads) == 50
        res = am.assign_ads(ads, taxonomy)
        assert not res.unassigned
