"""Mask losses, path scoring, bounded path search, and pair explanations."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import (
    enumerate_simple_paths,
    make_graph,
    max_rel_error,
    numeric_gradients,
    path_score_oracle,
    random_ego,
)
from whyrec.autodiff import FlatAdjacency, Tape
from whyrec.gnn import GnnConfig, GnnModel, LpTrainConfig, train_lp
from whyrec.graphstore import GraphError, NodeKind, ego_graph, item, user
from whyrec.pathexplain import (
    EdgeMask,
    MaskLearnConfig,
    PathExplanation,
    ScoredPath,
    explain,
    extract_paths,
    learn_mask,
    loss_path,
    loss_path_tensor,
    loss_pred,
    loss_pred_tensor,
    path_score,
    read_explanations,
    write_explanations,
)


def two_route_graph():
    """u0 and i1 joined by two 3-edge routes (via i0/u1 and via i2/u2)."""
    return make_graph(3, 3, [(0, 0), (1, 0), (1, 1), (0, 2), (2, 2), (2, 1)])


def two_route_ego():
    return ego_graph(two_route_graph(), user(0), item(1), 3)


def small_model(graph, dim=4, seed=0):
    return GnnModel.for_graph(GnnConfig(encoder="rgcn", dim=dim, layers=2, seed=seed),
                              graph)


class TestEdgeMask:
    def test_requires_one_logit_per_edge(self):
        ego = two_route_ego()
        with pytest.raises(GraphError, match="edges"):
            EdgeMask(ego, np.zeros(ego.n_edges() + 1))

    def test_edge_index_lookup(self):
        ego = two_route_ego()
        mask = EdgeMask(ego, np.zeros(ego.n_edges()))
        first_edge = ego.edge_list()[0]
        assert mask.edge_index(*first_edge) == 0
        with pytest.raises(GraphError, match="not in the ego graph"):
            mask.edge_index(0, 0)


class TestPredictionLoss:
    def test_saturated_mask_matches_unmasked_encoding(self):
        g = two_route_graph()
        ego = ego_graph(g, user(0), item(1), 3)
        model = small_model(g)
        mask = EdgeMask(ego, np.full(ego.n_edges(), 30.0))
        masked = loss_pred(model, ego, mask, (user(0), item(1)))

        tape = Tape()
        user_rows = [r.index for r in ego.nodes if r.kind == NodeKind.USER]
        item_rows = [r.index for r in ego.nodes if r.kind == NodeKind.ITEM]
        h = model.encode(tape, FlatAdjacency.from_lists(ego.adj), user_rows, item_rows)
        logit = model.link_logits(tape, h, [ego.local(user(0))], [ego.local(item(1))])
        unmasked = float(tape.bce_with_logits(logit, np.ones(1)).value)
        assert masked == pytest.approx(unmasked, abs=1e-9)

    def test_loss_is_positive(self, rng):
        g = two_route_graph()
        ego = ego_graph(g, user(0), item(1), 3)
        model = small_model(g)
        for _ in range(5):
            mask = EdgeMask(ego, rng.normal(0, 2, size=ego.n_edges()))
            assert loss_pred(model, ego, mask, (user(0), item(1))) > 0.0

    def test_gradient_matches_finite_differences(self, rng):
        g = two_route_graph()
        ego = ego_graph(g, user(0), item(1), 3)
        model = small_model(g)
        u_loc, i_loc = ego.local(user(0)), ego.local(item(1))
        start = {"logits": rng.normal(0, 1, size=ego.n_edges())}

        def build(tape, ts):
            return loss_pred_tensor(tape, model, ego, ts["logits"], u_loc, i_loc)

        tape = Tape()
        tensors = {k: tape.parameter(k, v) for k, v in start.items()}
        analytic = tape.backward(build(tape, tensors))
        numeric = numeric_gradients(build, start, epsilon=1e-5)
        assert max_rel_error(analytic, numeric) < 1e-4


class TestPathLoss:
    def test_zero_logits_give_zero(self):
        ego = two_route_ego()
        mask = EdgeMask(ego, np.zeros(ego.n_edges()))
        assert loss_path(mask, [0, 2]) == 0.0

    def test_on_minus_off_example(self):
        # on-path total 2, off-path total 1 -> -(2 - 1) = -1
        ego = ego_graph(make_graph(1, 2, [(0, 0), (0, 1)]), user(0), item(0), 1)
        mask = EdgeMask(ego, np.array([2.0, 1.0]))
        assert loss_path(mask, [0]) == -1.0

    @given(seed=st.integers(0, 5_000))
    @settings(max_examples=50, deadline=None)
    def test_matches_resummation(self, seed):
        rng = np.random.default_rng(seed)
        ego = two_route_ego()
        logits = rng.normal(0, 2, size=ego.n_edges())
        on = sorted(rng.choice(ego.n_edges(),
                               size=int(rng.integers(0, ego.n_edges() + 1)),
                               replace=False).tolist())
        expected = -(logits[on].sum() - np.delete(logits, on).sum())
        assert loss_path(EdgeMask(ego, logits), on) == pytest.approx(expected, abs=1e-12)

    def test_gradient_is_signed_unit(self):
        ego = two_route_ego()
        logits = np.linspace(-1, 1, ego.n_edges())
        on = [1, 4]

        def build(tape, ts):
            return loss_path_tensor(tape, ts["logits"], ego.n_edges(), on)

        tape = Tape()
        analytic = tape.backward(build(tape, {"logits": tape.parameter("logits", logits)}))
        expected = np.ones(ego.n_edges())
        expected[on] = -1.0
        assert np.array_equal(analytic["logits"], expected)
        numeric = numeric_gradients(build, {"logits": logits}, epsilon=1e-5)
        assert max_rel_error(analytic, numeric) < 1e-6

    def test_rejects_foreign_edge(self):
        ego = two_route_ego()
        with pytest.raises(GraphError, match="outside"):
            loss_path(EdgeMask(ego, np.zeros(ego.n_edges())), [99])


class TestPathScore:
    def test_single_edge_degree_one(self):
        ego = ego_graph(make_graph(1, 1, [(0, 0)]), user(0), item(0), 1)
        mask = EdgeMask(ego, np.zeros(1))
        # log sigmoid(0) - log 1
        assert path_score([(0, 1)], mask, ego) == pytest.approx(-0.6931471805599453,
                                                                abs=1e-12)

    def test_single_edge_degree_two(self):
        ego = two_route_ego()
        mask = EdgeMask(ego, np.zeros(ego.n_edges()))
        src, dst = ego.local(user(0)), ego.local(item(0))
        # every node has degree 2: log sigmoid(0) - log 2 = -2 log 2
        assert path_score([(src, dst)], mask, ego) == pytest.approx(
            -1.3862943611198906, abs=1e-12
        )

    def test_three_edge_path_matches_oracle(self, rng):
        ego = two_route_ego()
        logits = rng.normal(0, 2, size=ego.n_edges())
        mask = EdgeMask(ego, logits)
        locals_ = [ego.local(r) for r in (user(0), item(0), user(1), item(1))]
        steps = list(zip(locals_, locals_[1:]))
        assert path_score(steps, mask, ego) == pytest.approx(
            path_score_oracle(ego, logits, locals_), abs=1e-12
        )

    def test_unchained_steps_rejected(self):
        ego = two_route_ego()
        mask = EdgeMask(ego, np.zeros(ego.n_edges()))
        a = ego.local(user(0))
        b = ego.local(item(0))
        c = ego.local(user(1))
        d = ego.local(item(1))
        with pytest.raises(GraphError, match="chained"):
            path_score([(a, b), (d, c)], mask, ego)

    def test_empty_path_rejected(self):
        ego = two_route_ego()
        with pytest.raises(GraphError, match="at least one edge"):
            path_score([], EdgeMask(ego, np.zeros(ego.n_edges())), ego)


class TestScoredPath:
    def test_alternation_enforced(self):
        with pytest.raises(GraphError, match="alternate"):
            ScoredPath(nodes=(user(0), user(1)), edge_ids=(0,), sigmas=(0.5,), score=0.0)

    def test_length_bookkeeping(self):
        p = ScoredPath(nodes=(user(0), item(0)), edge_ids=(0,), sigmas=(0.5,), score=-1.0)
        assert p.length == 1


class TestExtractPaths:
    def test_dominant_route_wins(self):
        ego = two_route_ego()
        eids = ego.edge_ids()
        logits = np.full(ego.n_edges(), -3.0)
        route_a = [user(0), item(0), user(1), item(1)]
        locs = [ego.local(r) for r in route_a]
        for a, b in zip(locs, locs[1:]):
            key = (a, b) if ego.kind_of(a) == NodeKind.USER else (b, a)
            logits[eids[key]] = 3.0
        paths = extract_paths(ego, EdgeMask(ego, logits), (user(0), item(1)), 2, 5)
        assert len(paths) == 2
        assert list(paths[0].nodes) == route_a
        # the runner-up is the other route, using entirely different edges
        assert set(paths[0].edge_ids).isdisjoint(paths[1].edge_ids)
        assert paths[0].score > paths[1].score

    def test_unreachable_pair_yields_nothing(self):
        g = make_graph(2, 2, [(0, 0), (1, 1)])
        ego = ego_graph(g, user(0), item(1), 3)
        mask = EdgeMask(ego, np.zeros(ego.n_edges()))
        assert extract_paths(ego, mask, (user(0), item(1)), 2, 5) == []

    def test_stored_score_matches_recomputation(self, rng):
        ego = two_route_ego()
        mask = EdgeMask(ego, rng.normal(0, 2, size=ego.n_edges()))
        for p in extract_paths(ego, mask, (user(0), item(1)), 2, 5):
            locs = [ego.local(r) for r in p.nodes]
            again = path_score(list(zip(locs, locs[1:])), mask, ego)
            assert p.score == again

    def test_rejects_degenerate_limits(self):
        ego = two_route_ego()
        mask = EdgeMask(ego, np.zeros(ego.n_edges()))
        with pytest.raises(GraphError):
            extract_paths(ego, mask, (user(0), item(1)), 0, 5)
        with pytest.raises(GraphError):
            extract_paths(ego, mask, (user(0), item(1)), 2, 0)

    @given(seed=st.integers(0, 4_000))
    @settings(max_examples=50, deadline=None)
    def test_best_path_matches_exhaustive_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        ego = random_ego(rng)
        logits = rng.normal(0, 2, size=ego.n_edges())
        mask = EdgeMask(ego, logits)
        pair = (ego.center_user, ego.center_item)
        src, dst = ego.local(pair[0]), ego.local(pair[1])
        max_len = int(rng.integers(1, 6))
        found = extract_paths(ego, mask, pair, 1, max_len)
        candidates = enumerate_simple_paths(ego, src, dst, max_len)
        if not candidates:
            assert found == []
            return
        best = max(path_score_oracle(ego, logits, p) for p in candidates)
        assert len(found) == 1
        assert found[0].score == pytest.approx(best, abs=1e-9)

    @given(seed=st.integers(0, 4_000))
    @settings(max_examples=50, deadline=None)
    def test_path_set_invariants(self, seed):
        rng = np.random.default_rng(seed)
        ego = random_ego(rng)
        mask = EdgeMask(ego, rng.normal(0, 2, size=ego.n_edges()))
        pair = (ego.center_user, ego.center_item)
        paths = extract_paths(ego, mask, pair, 3, 5)
        assert len(paths) <= 3
        seen: set[int] = set()
        for p in paths:
            assert p.nodes[0] == pair[0]
            assert p.nodes[-1] == pair[1]
            assert 1 <= p.length <= 5
            for a, b in zip(p.nodes, p.nodes[1:]):
                assert a.kind != b.kind
            assert seen.isdisjoint(p.edge_ids)
            seen.update(p.edge_ids)
        for earlier, later in zip(paths, paths[1:]):
            assert earlier.score >= later.score


class TestLearnMask:
    def test_invalid_config_rejected(self):
        for bad in (
            MaskLearnConfig(steps=0),
            MaskLearnConfig(lr=0.0),
            MaskLearnConfig(refresh_interval=0),
            MaskLearnConfig(max_path_len=0),
            MaskLearnConfig(k=0),
        ):
            with pytest.raises(GraphError):
                bad.validate()

    def test_deterministic_repeat(self):
        g = two_route_graph()
        ego = ego_graph(g, user(0), item(1), 3)
        model = small_model(g)
        cfg = MaskLearnConfig(steps=20, lr=0.1, k=1)

        def run():
            mask, trace = learn_mask(model, ego, (user(0), item(1)), cfg)
            return mask.logits, trace

        logits_a, trace_a = run()
        logits_b, trace_b = run()
        assert logits_a.tobytes() == logits_b.tobytes()
        assert trace_a == trace_b

    def test_guided_edges_get_reinforced(self):
        g = two_route_graph()
        model, _ = train_lp(g, GnnConfig(encoder="rgcn", dim=8, layers=2, seed=0),
                            LpTrainConfig(steps=40, lr=0.05, seed=0))
        ego = ego_graph(g, user(0), item(1), 3)
        cfg = MaskLearnConfig(steps=60, lr=0.1, k=1)
        mask, trace = learn_mask(model, ego, (user(0), item(1)), cfg)
        assert len(trace) == 60
        assert {"step", "loss_pred", "loss_path", "loss"} <= set(trace[0])
        best = extract_paths(ego, mask, (user(0), item(1)), 1, 5)[0]
        sigma = mask.sigma()
        on = np.array(sorted(best.edge_ids))
        off = np.array(sorted(set(range(ego.n_edges())) - set(best.edge_ids)))
        assert sigma[on].mean() > sigma[off].mean()


class TestExplain:
    def config(self, **kwargs):
        defaults = dict(steps=30, lr=0.1, k=2, max_path_len=5)
        defaults.update(kwargs)
        return MaskLearnConfig(**defaults)

    def test_direct_edge_is_not_an_explanation(self):
        g = make_graph(3, 3, [(0, 0), (1, 0), (1, 1), (0, 2), (2, 2), (2, 1), (0, 1)])
        model = small_model(g)
        result = explain(g, model, (user(0), item(1)), m=2, hops=2, cfg=self.config())
        assert 1 <= len(result.paths) <= 2
        for p in result.paths:
            assert p.length >= 3  # bipartite parity: next odd length after 1
            assert p.nodes[0] == user(0)
            assert p.nodes[-1] == item(1)

    def test_disconnected_pair_yields_empty_explanation(self):
        g = make_graph(2, 2, [(0, 0), (1, 1)])
        model = small_model(g)
        result = explain(g, model, (user(0), item(1)), m=2, hops=2, cfg=self.config())
        assert result.paths == ()
        assert result.diagnostics["ego_nodes"] >= 2

    def test_unknown_node_rejected(self):
        g = two_route_graph()
        model = small_model(g)
        with pytest.raises(GraphError):
            explain(g, model, (user(99), item(1)), m=2, hops=2, cfg=self.config())


class TestExplanationFile:
    def test_round_trip(self, tmp_path):
        g = two_route_graph()
        model = small_model(g)
        cfg = MaskLearnConfig(steps=10, lr=0.1, k=2)
        exp = explain(g, model, (user(0), item(1)), m=1, hops=3, cfg=cfg)
        path = tmp_path / "paths.jsonl"
        write_explanations(path, g, [exp])
        records = read_explanations(path)
        assert len(records) == 1
        assert records[0]["user"] == g.node_id(user(0))
        assert records[0]["item"] == g.node_id(item(1))
        for rec_path, p in zip(records[0]["paths"], exp.paths):
            assert rec_path["score"] == p.score
            assert rec_path["nodes"][0] == g.node_id(user(0))

    def test_invalid_json_reports_line(self, tmp_path):
        path = tmp_path / "paths.jsonl"
        path.write_text('{"user": "u", "item": "i", "paths": []}\nnot json\n')
        with pytest.raises(GraphError, match=":2:"):
            read_explanations(path)

    def test_missing_field_reported(self, tmp_path):
        path = tmp_path / "paths.jsonl"
        path.write_text('{"user": "u", "item": "i"}\n')
        with pytest.raises(GraphError, match="paths"):
            read_explanations(path)
