"""Success metric, closed-loop rollouts, suite reports, and artifact export."""

import numpy as np
import pytest

from conftest import FAST_SPAWN
from langfold import cloth_sim as cs
from langfold import eval as E
from langfold import graph as G
from langfold import lang as L
from langfold import model as M
from langfold import train as TR
from langfold import util as U

CORNER = L.instruction_from_text("fold the bottom left corner to the center")
HALF = next(i for i in L.build_splits()[L.Split.SEEN]
            if i.task.task_type is L.TaskType.HALF)


class AlwaysDone:
    """Claims success immediately; never acts."""

    def reset(self, seed):
        pass

    def decide(self, instruction, state, t):
        return E.Decision(None, True)


class TestSuccessMetric:
    def test_identical_states(self):
        st = cs.make_grid_state(10, 10, 0.02)
        err, ok = E.success_metric(st, st.positions)
        assert err == 0.0 and ok

    def test_uniform_translation(self):
        st = cs.make_grid_state(10, 10, 0.02)
        err, ok = E.success_metric(st, st.positions + np.array([0.03, 0.04, 0.0]))
        assert err == pytest.approx(0.05, abs=1e-9)
        assert not ok

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            pos = rng.random((40, 3)).astype(np.float32)
            ref = rng.random((40, 3))
            st = cs.ClothState(pos, np.zeros((40, 3), np.float32), pos.copy(), (8, 5))
            expected = np.mean([np.sqrt(np.sum((pos[i].astype(np.float64) - ref[i]) ** 2))
                                for i in range(40)])
            err, ok = E.success_metric(st, ref)
            assert err == pytest.approx(expected, rel=1e-12)
            assert ok == (err < E.SUCCESS_THRESHOLD)

    def test_count_mismatch_rejected(self):
        st = cs.make_grid_state(5, 5, 0.02)
        with pytest.raises(E.EvalError, match="mismatch"):
            E.success_metric(st, np.zeros((24, 3)))


class TestRollout:
    def test_oracle_is_exact(self):
        r = E.rollout(E.OraclePolicy(), CORNER, seed=0, config=FAST_SPAWN)
        assert r.steps == 1
        assert r.error < 1e-6
        assert r.success and r.classifier_stop

    def test_oracle_half_takes_two_steps(self):
        r = E.rollout(E.OraclePolicy(), HALF, seed=1, config=FAST_SPAWN)
        assert r.steps == 2 and r.success

    def test_immediate_stop_scores_initial_state(self):
        r = E.rollout(AlwaysDone(), HALF, seed=0, config=FAST_SPAWN)
        assert r.steps == 0
        assert r.classifier_stop
        assert not r.success  # a flat spawn is nowhere near the half-folded goal

    def test_random_policy_fails(self):
        r = E.rollout(E.RandomPolicy(), HALF, seed=2, t_max=1, config=FAST_SPAWN)
        assert r.steps == 1
        assert not r.success

    def test_fixed_horizon_ignores_gating(self):
        r = E.rollout(AlwaysDone(), HALF, seed=0, gated=False, config=FAST_SPAWN)
        # the stub never supplies an action, so the episode just ends unscored steps
        assert r.steps == 0 and not r.classifier_stop

    def test_untrained_neural_policy_runs(self):
        policy = E.NeuralPolicy(TR.Models(G.init_edge_gnn(0), M.init_policy(0)))
        r = E.rollout(policy, CORNER, seed=3, t_max=1, config=FAST_SPAWN, keep_maps=True)
        assert r.steps == 1  # zero-initialized success head cannot fire (logit 0)
        assert not r.classifier_stop
        assert len(r.maps) == 1
        assert r.maps[0]["q_pick"].shape == (G.GRAPH_NODES,)
        assert r.maps[0]["q_place"].shape == (64, 64)

    def test_deterministic(self):
        a = E.rollout(E.RandomPolicy(), CORNER, seed=5, t_max=1, config=FAST_SPAWN)
        b = E.rollout(E.RandomPolicy(), CORNER, seed=5, t_max=1, config=FAST_SPAWN)
        assert a.error == b.error and a.steps == b.steps

    def test_neural_policy_needs_models(self):
        with pytest.raises(E.EvalError):
            E.NeuralPolicy(TR.Models(None, M.init_policy(0)))


@pytest.fixture(scope="module")
def oracle_report():
    return E.evaluate_suite(E.OraclePolicy(), n_per_cell=1, seed=3, config=FAST_SPAWN)


class TestSuite:
    def test_all_cells_present(self, oracle_report):
        assert len(oracle_report.cells) == 9
        seen = {(c.task, c.split) for c in oracle_report.cells}
        assert seen == {(t, s) for t in L.TaskType for s in L.Split}

    def test_oracle_ceiling(self, oracle_report):
        for c in oracle_report.cells:
            assert c.successes == c.episodes == 1
            assert c.mean_error < 1e-6
        assert oracle_report.grand_mean_pct == 100.0

    def test_csv_layout(self, oracle_report):
        text = E.report_csv(oracle_report)
        lines = text.strip().split("\n")
        data = [l for l in lines if not l.startswith("#")]
        assert data[0] == "task,split,episodes,successes,rate_pct,mean_error_m"
        assert len(data) == 10
        assert data[1].startswith("corner,seen,1,1,100.0,")
        assert any(l.startswith("#") for l in lines)  # threshold rationale comment

    def test_cell_accessor(self, oracle_report):
        c = oracle_report.cell(L.TaskType.HALF, L.Split.UNSEEN_TASK)
        assert c.task is L.TaskType.HALF
        with pytest.raises(E.EvalError):
            E.EvalReport([], 1, 0, True).cell(L.TaskType.HALF, L.Split.SEEN)

    def test_format_report_mentions_every_task(self, oracle_report):
        txt = E.format_report(oracle_report)
        for name in ("corner", "triangle", "half", "grand mean"):
            assert name in txt

    def test_write_report(self, oracle_report, tmp_path):
        p = tmp_path / "r.csv"
        E.write_report(oracle_report, p)
        assert p.read_text() == E.report_csv(oracle_report)


class TestExports:
    def test_uniform_place_heatmap_constant_pgm(self, tmp_path):
        p = tmp_path / "u.pgm"
        E.export_heatmap(np.full((64, 64), 0.25, np.float32), p)
        img = U.read_pgm16(p)
        assert img.shape == (64, 64)
        assert np.all(img == img[0, 0])

    def test_pgm_peak_matches_argmax(self, tmp_path):
        rng = np.random.default_rng(1)
        q = rng.random((64, 64)).astype(np.float32)
        p = tmp_path / "q.pgm"
        E.export_heatmap(q, p)
        img = U.read_pgm16(p)
        assert np.unravel_index(img.argmax(), img.shape) == np.unravel_index(q.argmax(), q.shape)

    def test_pick_csv_rows(self, tmp_path):
        rng = np.random.default_rng(2)
        q = rng.random(128).astype(np.float32)
        nodes = rng.random((128, 3)).astype(np.float32)
        p = tmp_path / "pick.csv"
        E.export_heatmap(q, p, nodes=nodes)
        lines = p.read_text().strip().split("\n")
        assert lines[0] == "node,x,y,probability"
        assert len(lines) == 129
        first = lines[1].split(",")
        assert int(first[0]) == 0
        assert float(first[3]) == pytest.approx(q[0], abs=1e-6)

    def test_pick_csv_needs_nodes(self, tmp_path):
        with pytest.raises(E.EvalError):
            E.export_heatmap(np.zeros(8), tmp_path / "x.csv")

    def test_bad_rank_rejected(self, tmp_path):
        with pytest.raises(E.EvalError):
            E.export_heatmap(np.zeros((2, 2, 2)), tmp_path / "x.pgm")
