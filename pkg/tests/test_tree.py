"""Draft tree construction tests: growth policies, masks, flattening."""

import numpy as np
import pytest

from sdlab.draft import DraftConfig, DraftSession, init_draft
from sdlab.kernels import softmax
from sdlab.target import TargetConfig, init_target
from sdlab.tree import (
    DraftNode,
    DraftTree,
    build_mask,
    dump_tree,
    flatten_for_verification,
    grow_chain,
    grow_moe_tree,
    grow_static_tree,
)

GOLDEN_MOE_DUMP = """0 -1 1 49 left 0.0554376111048 -3.17314381566
1 -1 1 48 left 0.0552924830365 -3.17576511121
2 -1 1 15 right 0.025365035108 -5.08208573609
3 0 2 15 left 0.130095186291 -5.25253689783
4 0 2 49 left 0.0944009443555 -5.57325220573
5 0 2 24 right 0.0174189383622 -10.4645008152
6 1 2 49 left 0.153755149265 -5.0970584575
7 1 2 15 left 0.0821557144495 -5.72380345155
8 1 2 21 right 0.018119684626 -10.2288604289
9 2 2 4 left 0.13027046467 -7.1758997033
10 2 2 49 left 0.0729484744629 -7.75575912732
11 2 2 15 right 0.0184622406773 -11.9901073993
12 2 2 52 right 0.0178174540711 -12.0256564585"""


@pytest.fixture(scope="module")
def target():
    return init_target(TargetConfig(), seed=0)


@pytest.fixture(scope="module")
def draft(target):
    return init_draft(DraftConfig(), target, seed=1)


@pytest.fixture()
def root_feature(target):
    cache = target.new_cache()
    return target.forward_cached(cache, 0).feature


def make_session(draft):
    return DraftSession(draft)


class TestChain:
    def test_single_node(self, draft, root_feature):
        tree = grow_chain(make_session(draft), root_feature, 5, 1)
        assert len(tree) == 1
        assert tree.nodes[0].depth == 1 and tree.nodes[0].parent == -1

    def test_greedy_determinism(self, draft, root_feature):
        t1 = grow_chain(make_session(draft), root_feature, 5, 4)
        t2 = grow_chain(make_session(draft), root_feature, 5, 4)
        assert dump_tree(t1) == dump_tree(t2)

    def test_chain_matches_draft_greedy_replay(self, draft, root_feature):
        # replay oracle: drive the draft by hand, taking argmax of the mixture
        gamma = 3
        tree = grow_chain(make_session(draft), root_feature, 5, gamma)
        s = make_session(draft)
        out = s.begin_round([5], [root_feature])
        want = []
        rows = []
        for depth in range(1, gamma + 1):
            dist = softmax(draft.mixture_logits(out))
            tok = int(np.argmax(dist))
            want.append(tok)
            if depth < gamma:
                [(out, row)] = s.tree_level([(tok, out.feature_moe, rows.copy(), depth)])
                rows.append(row)
        assert [n.token for n in tree.nodes] == want

    def test_q_prob_recorded(self, draft, root_feature):
        tree = grow_chain(make_session(draft), root_feature, 5, 3)
        for n in tree.nodes:
            assert 0.0 < n.q_prob <= 1.0
            assert abs(n.q_dist[n.token] - n.q_prob) < 1e-15

    def test_sampling_mode(self, draft, root_feature):
        rng = np.random.default_rng(0)
        tree = grow_chain(make_session(draft), root_feature, 5, 3, mode="sample", rng=rng)
        assert len(tree) == 3
        rng2 = np.random.default_rng(0)
        tree2 = grow_chain(make_session(draft), root_feature, 5, 3, mode="sample", rng=rng2)
        assert dump_tree(tree) == dump_tree(tree2)


class TestStaticTree:
    def test_topk1_collapses_to_chain(self, draft, root_feature):
        chain = grow_chain(make_session(draft), root_feature, 5, 3)
        static = grow_static_tree(make_session(draft), root_feature, 5, 3, 1)
        assert dump_tree(chain) == dump_tree(static)

    def test_exhaustive_enumeration_oracle(self, draft, root_feature):
        # gamma=2, top_k=2, beam=2: brute-force the expected node set
        tree = grow_static_tree(make_session(draft), root_feature, 5, 2, 2, beam=2)
        s = make_session(draft)
        out = s.begin_round([5], [root_feature])
        d0 = softmax(draft.mixture_logits(out))
        top2 = np.argsort(-d0, kind="stable")[:2]
        layer1 = [(int(t), float(np.log(d0[t]))) for t in top2]
        expect = [(t, 1, -1) for t, _ in layer1]
        children = []
        for idx, (t, logq) in enumerate(layer1):
            [(o2, _)] = s.tree_level([(t, out.feature_moe, [], 1)])
            d2 = softmax(draft.mixture_logits(o2))
            for t2 in np.argsort(-d2, kind="stable")[:2]:
                children.append((int(t2), 2, idx, logq + float(np.log(d2[t2]))))
        children.sort(key=lambda c: -c[3])
        expect += [(t, d, p) for t, d, p, _ in children[:2]]
        got = [(n.token, n.depth, n.parent) for n in tree.nodes]
        assert got == expect

    def test_mask_invariants_after_build(self, draft, root_feature):
        tree = grow_static_tree(make_session(draft), root_feature, 5, 3, 2, beam=4)
        mask = build_mask(tree)
        for i, n in enumerate(tree.nodes):
            anc = set()
            j = i
            while j != -1:
                anc.add(j)
                j = tree.nodes[j].parent
            assert set(np.flatnonzero(mask[i])) == anc

    def test_cum_score_monotone(self, draft, root_feature):
        tree = grow_static_tree(make_session(draft), root_feature, 5, 4, 3, beam=6)
        for n in tree.nodes:
            if n.parent != -1:
                assert n.cum_score <= tree.nodes[n.parent].cum_score + 1e-12


class TestMoeTree:
    def test_golden_dump(self, draft, root_feature):
        tree = grow_moe_tree(make_session(draft), root_feature, 5, 2, 2, context_len=1)
        assert dump_tree(tree) == GOLDEN_MOE_DUMP

    def test_requires_two_active_experts(self, target, root_feature):
        d1 = init_draft(DraftConfig(n_experts=1, active_k=1), target, seed=3)
        with pytest.raises(ValueError, match="K < 2"):
            grow_moe_tree(DraftSession(d1), root_feature, 5, 2, 2)

    def test_branch_tags_and_order(self, draft, root_feature):
        tree = grow_moe_tree(make_session(draft), root_feature, 5, 3, 2, beam=8)
        assert all(n.branch_tag in ("left", "right") for n in tree.nodes)
        by_parent = {}
        for i, n in enumerate(tree.nodes):
            by_parent.setdefault(n.parent, []).append(i)
        for kids in by_parent.values():
            tags = [tree.nodes[i].branch_tag for i in kids]
            # lefts precede rights among each parent's children
            if "left" in tags and "right" in tags:
                assert tags.index("right") > max(i for i, t in enumerate(tags) if t == "left")

    def test_left_right_score_ordering(self, draft, root_feature):
        # reconstructed emitting-branch score: exp(cum - parent_cum) / q
        tree = grow_moe_tree(make_session(draft), root_feature, 5, 2, 2, beam=8)
        by_parent = {}
        for i, n in enumerate(tree.nodes):
            by_parent.setdefault(n.parent, []).append(n)
        for kids in by_parent.values():
            def branch_score(n):
                pc = 0.0 if n.parent == -1 else tree.nodes[n.parent].cum_score
                return np.exp(n.cum_score - pc) / n.q_prob
            lefts = [branch_score(n) for n in kids if n.branch_tag == "left"]
            rights = [branch_score(n) for n in kids if n.branch_tag == "right"]
            if lefts and rights:
                assert min(lefts) >= max(rights) - 1e-12

    def test_gamma1_topk2_candidate_order(self, draft, root_feature):
        # direct sort of (branch score desc, token prob desc) pairs
        tree = grow_moe_tree(make_session(draft), root_feature, 5, 1, 2)
        s = make_session(draft)
        out = s.begin_round([5], [root_feature])
        dl = softmax(out.logits_left)
        dr = softmax(out.logits_right)
        lt = [int(t) for t in np.argsort(-dl, kind="stable")[:2]]
        rt = [int(t) for t in np.argsort(-dr, kind="stable")[:2]]
        expected = [(t, "left") for t in lt]
        seen = set(lt)
        for t in rt:
            if t not in seen:
                expected.append((t, "right"))
        got = [(n.token, n.branch_tag) for n in tree.nodes]
        assert got[: len(expected)] == expected
        assert len(tree) <= 4

    def test_identical_experts_reduce_to_static(self, target, root_feature):
        d = init_draft(DraftConfig(), target, seed=5)
        d.params["expert1_w1"] = d.params["expert0_w1"].copy()
        d.params["expert1_w2"] = d.params["expert0_w2"].copy()
        tree = grow_moe_tree(DraftSession(d), root_feature, 5, 2, 2, beam=8)
        # equal branch distributions collide token-for-token; dedup keeps the left copies
        assert all(n.branch_tag == "left" for n in tree.nodes)
        static = grow_static_tree(DraftSession(d), root_feature, 5, 2, 2, beam=8)
        assert [n.token for n in tree.nodes] == [n.token for n in static.nodes]

    def test_parallel_final_level_from_contrast_head(self, draft, root_feature):
        gamma = 3
        sess = make_session(draft)
        tree = grow_moe_tree(sess, root_feature, 5, gamma, 2, parallel=True, beam=8)
        assert sess.passes == gamma - 1
        deepest = [n for n in tree.nodes if n.depth == gamma]
        assert deepest and all(n.branch_tag == "none" for n in deepest)
        non_parallel = grow_moe_tree(make_session(draft), root_feature, 5, gamma, 2, beam=8)
        assert max(n.depth for n in non_parallel.nodes) == gamma

    def test_chain_parallel_pass_counts(self, draft, root_feature):
        # gamma=5 chain: 4 draft passes with the parallel final step, 5 without
        sess = make_session(draft)
        tree = grow_chain(sess, root_feature, 5, 5, parallel=True)
        assert sess.passes == 4
        assert [n.depth for n in tree.nodes] == [1, 2, 3, 4, 5]
        sess2 = make_session(draft)
        grow_chain(sess2, root_feature, 5, 5)
        assert sess2.passes == 5


class TestMask:
    def test_chain_mask_lower_triangular(self):
        nodes = [DraftNode(1, -1, 1, 1.0, 0.0), DraftNode(2, 0, 2, 1.0, 0.0),
                 DraftNode(3, 1, 3, 1.0, 0.0)]
        mask = build_mask(DraftTree(nodes, root_token=0))
        assert np.array_equal(mask, np.tril(np.ones((3, 3), dtype=bool)))

    def test_star_mask(self):
        nodes = [DraftNode(1, -1, 1, 1.0, 0.0)] + [DraftNode(t, 0, 2, 1.0, 0.0) for t in (2, 3, 4)]
        mask = build_mask(DraftTree(nodes, root_token=0))
        for i in range(1, 4):
            assert set(np.flatnonzero(mask[i])) == {0, i}

    def test_random_trees_match_ancestor_walk(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(1, 65))
            nodes = []
            for i in range(n):
                if i == 0 or rng.random() < 0.25:
                    nodes.append(DraftNode(int(rng.integers(0, 64)), -1, 1, 1.0, 0.0))
                else:
                    p = int(rng.integers(0, i))
                    nodes.append(
                        DraftNode(int(rng.integers(0, 64)), p, nodes[p].depth + 1, 1.0, 0.0)
                    )
            mask = build_mask(DraftTree(nodes, root_token=0))
            for i in range(n):
                walk = set()
                j = i
                while j != -1:
                    walk.add(j)
                    j = nodes[j].parent
                assert set(np.flatnonzero(mask[i])) == walk

    def test_malformed_trees(self):
        fwd = [DraftNode(1, 1, 1, 1.0, 0.0), DraftNode(2, -1, 1, 1.0, 0.0)]
        with pytest.raises(ValueError, match="malformed tree"):
            build_mask(DraftTree(fwd, root_token=0))
        bad_depth = [DraftNode(1, -1, 1, 1.0, 0.0), DraftNode(2, 0, 3, 1.0, 0.0)]
        with pytest.raises(ValueError, match="malformed tree"):
            build_mask(DraftTree(bad_depth, root_token=0))


class TestFlatten:
    def test_chain_layout(self):
        nodes = [DraftNode(4, -1, 1, 1.0, 0.0), DraftNode(7, 0, 2, 1.0, 0.0)]
        tokens, mask, positions = flatten_for_verification(DraftTree(nodes, 9, root_context_len=3))
        assert tokens == [4, 7]
        assert positions == [1, 2]
        assert mask.shape == (2, 5)
        assert mask[:, :3].all()

    def test_empty_tree(self):
        tokens, mask, positions = flatten_for_verification(DraftTree([], 1, root_context_len=2))
        assert tokens == [] and positions == []
        assert mask.shape == (0, 2)

    def test_unflatten_round_trip(self, draft, root_feature):
        tree = grow_moe_tree(make_session(draft), root_feature, 5, 3, 2, beam=6,
                             context_len=4)
        tokens, mask, positions = flatten_for_verification(tree)
        node_mask = mask[:, 4:]
        for i, n in enumerate(tree.nodes):
            anc = [j for j in np.flatnonzero(node_mask[i]) if j != i]
            if n.parent == -1:
                assert anc == []
            else:
                parents = [j for j in anc if tree.nodes[j].depth == n.depth - 1]
                assert parents == [n.parent]
            assert positions[i] == n.depth
            assert tokens[i] == n.token
