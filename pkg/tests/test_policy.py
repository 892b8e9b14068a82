import random
import threading

import pytest

from adchain import policy as pol

CTX = pol.RequestContext(requester_id="abc", transaction_type="Request", resource="ad-block")


def rule(i, action=pol.Action.DENY, **tests):
    match = pol.Match(tests={k: frozenset(v.split("|")) for k, v in tests.items()})
    return pol.PolicyRule(index=i, match=match, action=action)


def miss_rule(i):
    return rule(i, resource="never")


def count_nodes(node):
    if node is None:
        return 0
    return 1 + count_nodes(node.left) + count_nodes(node.right)


def spine_oracle(rules, root_position, ctx):
    """Independent linear-scan oracle over the rule list for spine trees:
    computes the traversal order purely by index arithmetic. A routed walk
    prefers the left (earlier-rule) spine, a non-match the right one, and
    either falls through to the only existing spine at the ends."""
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


class TestBuildTree:
    def test_empty_rules_rejected(self):
        with pytest.raises(pol.PolicyError):
            pol.build_tree([], 1)

    def test_root_position_bounds(self):
        with pytest.raises(pol.PolicyError):
            pol.build_tree([miss_rule(0)], 2)

    def test_root_at_one_puts_everything_right(self):
        rules = [miss_rule(i) for i in range(100)]
        root = pol.build_tree(rules, 1)
        assert count_nodes(root.left) == 0
        assert count_nodes(root.right) == 99

    def test_root_at_end_puts_everything_left(self):
        rules = [miss_rule(i) for i in range(100)]
        root = pol.build_tree(rules, 100)
        assert count_nodes(root.left) == 99
        assert count_nodes(root.right) == 0

    @pytest.mark.parametrize("n,p", [(10, 1), (10, 4), (10, 10), (37, 20)])
    def test_left_subtree_count_is_p_minus_one(self, n, p):
        # oracle: independent recursive node counter
        root = pol.build_tree([miss_rule(i) for i in range(n)], p)
        assert count_nodes(root.left) == p - 1
        assert count_nodes(root) == n


class TestTraverse:
    def test_single_leaf_no_match_denies_with_path_one(self):
        doc = pol.PolicyDocument([miss_rule(0)])
        res = pol.traverse(doc, CTX)
        assert res.decision is pol.Action.DENY
        assert res.matched_rule_index is None
        assert res.path_length == 1

    def test_matching_root_allows(self):
        doc = pol.PolicyDocument([rule(0, pol.Action.ALLOW, transaction_type="Request"), miss_rule(1)])
        res = pol.traverse(doc, CTX)
        assert res.decision is pol.Action.ALLOW
        assert res.matched_rule_index == 0
        assert res.path_length == 1

    def test_route_next_continues_leftward(self):
        rules = [
            rule(0, pol.Action.ALLOW, transaction_type="Request"),
            rule(1, pol.Action.ROUTE_NEXT, transaction_type="Request"),
            miss_rule(2),
        ]
        # root at 2: left spine holds rule 0, right spine rule 2
        doc = pol.PolicyDocument(rules, root_position=2)
        res = pol.traverse(doc, CTX)
        assert res.decision is pol.Action.ALLOW
        assert res.matched_rule_index == 0
        assert res.path_length == 2

    def test_default_deny_after_full_walk(self):
        rules = [miss_rule(i) for i in range(8)]
        doc = pol.PolicyDocument(rules, root_position=4)
        res = pol.traverse(doc, CTX)
        assert res.decision is pol.Action.DENY
        assert res.path_length == 5  # root + right spine of 4

    def test_path_length_bounded_by_rule_count(self):
        rules = [miss_rule(i) for i in range(50)]
        for p in (1, 25, 50):
            doc = pol.PolicyDocument(rules, root_position=p)
            assert pol.traverse(doc, CTX).path_length <= 50

    def test_thousand_random_trees_match_linear_scan_oracle(self):
        rng = random.Random(20240817)
        tx_types = ["Request", "Upload", "Update", "Monitor", "Billing"]
        resources = ["ad-block", "profile-store", "storage", "quota"]
        actions = [pol.Action.ALLOW, pol.Action.DENY, pol.Action.ROUTE_NEXT]
        for _ in range(1000):
            n = rng.randint(1, 40)
            rules = []
            for i in range(n):
                tests = {}
                if rng.random() < 0.8:
                    tests["transaction_type"] = frozenset(rng.sample(tx_types, rng.randint(1, 2)))
                if rng.random() < 0.5:
                    tests["resource"] = frozenset({rng.choice(resources)})
                rules.append(pol.PolicyRule(index=i, match=pol.Match(tests=tests), action=rng.choice(actions)))
            p = rng.randint(1, n)
            ctx = pol.RequestContext(
                requester_id="r",
                transaction_type=rng.choice(tx_types),
                resource=rng.choice(resources),
            )
            got = pol.traverse_tree(pol.build_tree(rules, p), ctx)
            want_decision, want_idx, want_path = spine_oracle(rules, p, ctx)
            assert got.decision is want_decision
            assert got.matched_rule_index == want_idx
            assert got.path_length == want_path


class TestMultiVersion:
    def allow_rule_for_ctx(self):
        return pol.Match(tests={"transaction_type": frozenset({"Request"})})

    def test_insert_without_publish_invisible(self):
        doc = pol.PolicyDocument([miss_rule(0)])
        v = doc.version
        doc.insert_rule(0, self.allow_rule_for_ctx(), pol.Action.ALLOW)
        assert pol.traverse(doc, CTX).decision is pol.Action.DENY
        assert doc.version == v

    def test_publish_bumps_version_and_applies_edit(self):
        doc = pol.PolicyDocument([miss_rule(0)])
        v = doc.version
        doc.insert_rule(0, self.allow_rule_for_ctx(), pol.Action.ALLOW)
        doc.publish()
        assert doc.version == v + 1
        assert pol.traverse(doc, CTX).decision is pol.Action.ALLOW

    def test_remove_rule(self):
        doc = pol.PolicyDocument([rule(0, pol.Action.ALLOW, transaction_type="Request")])
        doc.remove_rule(0)
        doc.publish()
        assert pol.traverse(doc, CTX).decision is pol.Action.DENY

    def test_version_conflict_reported(self):
        doc = pol.PolicyDocument([miss_rule(0)])
        v = doc.version
        doc.publish()  # someone else wins the race
        with pytest.raises(pol.VersionConflictError):
            doc.publish(expected_version=v)

    def test_interleaved_reads_see_exactly_one_version(self):
        doc = pol.PolicyDocument([miss_rule(0)])
        v_before = doc.version
        doc.insert_rule(0, self.allow_rule_for_ctx(), pol.Action.ALLOW)
        observations = []
        for i in range(100):
            if i == 50:
                doc.publish()
            snap = doc.snapshot()
            decision = pol.traverse(doc, CTX).decision
            observations.append((snap.version, decision))
        for version, decision in observations:
            assert version in (v_before, v_before + 1)
            expected = pol.Action.DENY if version == v_before else pol.Action.ALLOW
            assert decision is expected

    def test_concurrent_publish_and_read_smoke(self):
        doc = pol.PolicyDocument([miss_rule(0)])
        stop = threading.Event()
        errors = []

        def reader():
            while not stop.is_set():
                try:
                    res = pol.traverse(doc, CTX)
                    assert res.decision in (pol.Action.ALLOW, pol.Action.DENY)
                except Exception as exc:  # pragma: no cover
                    errors.append(exc)

        threads = [threading.Thread(target=reader) for _ in range(4)]
        for t in threads:
            t.start()
        for _ in range(50):
            doc.insert_rule(0, self.allow_rule_for_ctx(), pol.Action.ALLOW)
            doc.publish()
            doc.remove_rule(0)
            doc.publish()
        stop.set()
        for t in threads:
            t.join()
        assert not errors


class TestRuleFiles:
    def test_load_bundled_cs_policy(self, data_dir):
        rules = pol.load_rules(data_dir / "cs_policy.rules")
        assert len(rules) == 4
        assert rules[0].action is pol.Action.ALLOW
        assert rules[0].match.tests["resource"] == frozenset({"ads-index"})

    def test_malformed_line_rejected(self, tmp_path):
        f = tmp_path / "bad.rules"
        f.write_text("1\tresource=x\tMAYBE\n")
        with pytest.raises(pol.PolicyError):
            pol.load_rules(f)

    def test_wildcard_match(self):
        m = pol.parse_match("*")
        assert m.accepts(CTX)
        m2 = pol.parse_match("resource=ad-block|storage")
        assert m2.accepts(CTX)

    def test_unknown_field_rejected(self):
        with pytest.raises(pol.PolicyError):
            pol.parse_match("nonsense=1")
