import math
import warnings

import numpy as np
import pytest

from boxquery.errors import SamplingError, TrainingError
from boxquery.geometry import Box
from boxquery.model import ModelConfig, ModelParams, save_checkpoint
from boxquery.queries import bind, template
from boxquery.sampling import AnswerSet, GroundedQuery, generate_queries
from boxquery.training import loss, sample_negatives, train

from conftest import make_splits


class TestLoss:
    def test_at_margin_everywhere(self):
        for k in (1, 4, 128):
            value = loss(24.0, [24.0] * k, gamma=24.0)
            assert value == pytest.approx(2 * math.log(2.0), abs=1e-12)

    def test_perfect_separation_limit(self):
        value = loss(0.0, [1e9] * 4, gamma=24.0)
        expected = -math.log(1.0 / (1.0 + math.exp(-24.0)))
        assert value == pytest.approx(expected, rel=1e-6)
        assert value == pytest.approx(3.8e-11, rel=0.02)

    def test_monotone_in_positive_distance(self):
        negs = [3.0, 5.0]
        values = [loss(d, negs, gamma=4.0) for d in np.linspace(0, 10, 25)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_negative_order_irrelevant(self):
        negs = [1.0, 7.0, 3.0, 2.5]
        assert loss(2.0, negs, 4.0) == loss(2.0, list(reversed(negs)), 4.0)

    def test_positive_inside_box_bound(self, rng):
        # a positive inside its box is at most alpha*|offset|_1 away, so the
        # positive term never exceeds -log sigmoid(gamma - alpha*|offset|_1)
        from boxquery.geometry import dist_box

        gamma, alpha = 4.0, 0.2
        for _ in range(200):
            box = Box(rng.uniform(-2, 2, 6), rng.uniform(0, 2, 6))
            v = box.center + rng.uniform(-1, 1, 6) * box.offset
            pos = dist_box(v, box, alpha)
            bound = -math.log(1 / (1 + math.exp(-(gamma - alpha * float(np.sum(box.offset))))))
            positive_term = loss(pos, [gamma], gamma) - math.log(2)
            assert positive_term <= bound + 1e-12


class TestSampleNegatives:
    def splits_and_query(self):
        splits = make_splits(
            [("A", "r", "B"), ("A", "r", "C"), ("D", "s", "E")], augment=False
        )
        v = splits.vocab
        g = bind(template("1p").graph, {0: v.entity_id("A")}, {0: v.relation_id("r")})
        answers = (v.entity_id("B"), v.entity_id("C"))
        q = GroundedQuery(g, "1p", AnswerSet(answers, answers, answers))
        return splits, q, v

    def test_forced_complement(self, rng):
        splits, q, v = self.splits_and_query()
        negs = sample_negatives(q, 3, splits, rng)
        expected = {v.entity_id("A"), v.entity_id("D"), v.entity_id("E")}
        assert set(int(n) for n in negs) == expected

    def test_too_few_non_answers(self, rng):
        splits, q, _ = self.splits_and_query()
        with pytest.raises(SamplingError):
            sample_negatives(q, 4, splits, rng)

    def test_uniform_distribution(self, rng):
        triples = [(f"e{i}", "r", f"e{(i + 1) % 100}") for i in range(100)]
        splits = make_splits(triples, augment=False)
        v = splits.vocab
        g = bind(template("1p").graph, {0: v.entity_id("e0")}, {0: v.relation_id("r")})
        answers = (v.entity_id("e1"),)
        q = GroundedQuery(g, "1p", AnswerSet(answers, answers, answers))
        counts = np.zeros(100)
        draws = 10_000
        for _ in range(draws):
            for n in sample_negatives(q, 1, splits, rng):
                counts[int(n)] += 1
        assert counts[v.entity_id("e1")] == 0
        # chi-squared against uniform over the 99 allowed entities
        allowed = np.delete(counts, v.entity_id("e1"))
        expected = draws / 99
        chi2 = float(np.sum((allowed - expected) ** 2 / expected))
        # 99 - 1 = 98 degrees of freedom; 99.9th percentile is about 146
        assert chi2 < 146.0


class TestTrainLoop:
    def tiny_setup(self, seed=5):
        ring = [(f"e{i}", "r", f"e{(i + 1) % 8}") for i in range(8)]
        chords = [(f"e{i}", "s", f"e{(i + 3) % 8}") for i in range(8)]
        splits = make_splits(ring + chords)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            queries = generate_queries(
                splits, {n: 6 for n in ("1p", "2p", "2i")}, seed=2
            )["train"]
        config = ModelConfig(
            dim=8, gamma=2.0, negatives=3, learning_rate=0.01, epochs=3,
            batch_per_structure=4, seed=seed,
        )
        return splits, queries, config

    def test_no_training_queries_rejected(self):
        splits, queries, config = self.tiny_setup()
        only_3i = [q for q in queries if q.structure_name == "3i"]
        with pytest.raises(TrainingError):
            train(splits, only_3i, config)

    def test_zero_learning_rate_changes_nothing(self):
        splits, queries, config = self.tiny_setup()
        config.learning_rate = 0.0
        result = train(splits, queries, config, log=None)
        fresh = ModelParams(config, splits.train.n_entities, splits.train.n_relations)
        for name in fresh.tensors:
            assert np.array_equal(result.final_params.tensors[name], fresh.tensors[name])

    def test_bit_identical_checkpoints(self, tmp_path):
        splits, queries, config = self.tiny_setup()
        files = []
        for run in range(2):
            result = train(splits, queries, config, log=None)
            path = tmp_path / f"run{run}.ckpt"
            save_checkpoint(path, result.final_params, "e", "r")
            files.append(path)
        assert files[0].read_bytes() == files[1].read_bytes()

    def test_history_and_log(self):
        splits, queries, config = self.tiny_setup()
        lines = []
        result = train(splits, queries, config, log=lines.append)
        assert len(result.state.history) == config.epochs
        assert len(lines) == config.epochs
        assert lines[0].startswith("epoch=1 loss=")

    def test_max_iterations_smoke(self):
        splits, queries, config = self.tiny_setup()
        result = train(splits, queries, config, max_iterations=1)
        assert result.state.step == 1

    def test_1p_only_regime(self):
        # restricting the regime to 1p is the same as dropping the other
        # structures from the corpus
        splits, queries, config = self.tiny_setup()
        config.train_structures = ("1p",)
        restricted = train(splits, queries, config, log=None)
        only_1p = [q for q in queries if q.structure_name == "1p"]
        config_default = ModelConfig(**{**config.to_dict(),
                                        "train_structures": ("1p", "2p", "3p", "2i", "3i")})
        filtered = train(splits, only_1p, config_default, log=None)
        for name in restricted.final_params.tensors:
            assert np.array_equal(
                restricted.final_params.tensors[name], filtered.final_params.tensors[name]
            )

    def test_nonfinite_loss_writes_diagnostic_snapshot(self, tmp_path, monkeypatch):
        import boxquery.training as training_module

        splits, queries, config = self.tiny_setup()
        monkeypatch.setattr(
            training_module, "query_loss_and_grads", lambda *a, **k: float("nan")
        )
        diag = tmp_path / "failed.ckpt.diag"
        with pytest.raises(TrainingError, match="non-finite loss"):
            train(splits, queries, config, log=None, diagnostic_path=str(diag))
        assert diag.exists()
        from boxquery.model import load_checkpoint

        loaded, _, _ = load_checkpoint(diag)
        assert loaded.config == config

    def test_parallel_forward_matches_sequential(self):
        # sampling happens before dispatch, so worker count only reorders
        # float accumulation
        splits, queries, config = self.tiny_setup()
        sequential = train(splits, queries, config, log=None)
        parallel = train(splits, queries, config, log=None, workers=3)
        for name in sequential.final_params.tensors:
            assert np.allclose(
                sequential.final_params.tensors[name],
                parallel.final_params.tensors[name],
                atol=1e-10,
            )

    def test_best_checkpoint_tracking(self):
        ring = [(f"e{i}", "r", f"e{(i + 1) % 8}") for i in range(8)]
        chords = [(f"e{i}", "s", f"e{(i + 3) % 8}") for i in range(8)]
        splits = make_splits(ring + chords, valid_extra=[("e0", "s", "e2")])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = generate_queries(splits, {n: 6 for n in ("1p", "2p", "2i")}, seed=4)
        config = ModelConfig(
            dim=8, gamma=2.0, negatives=3, learning_rate=0.01, epochs=4,
            batch_per_structure=4, seed=9,
        )
        result = train(splits, out["train"], config, valid_queries=out["valid"], log=None)
        assert result.state.best_metric > 0
        assert result.state.best_params is not None
        assert all("val_mrr" in rec for rec in result.state.history)


class TestFloat32Switch:
    def test_float32_training_and_checkpoint(self, tmp_path):
        ring = [(f"e{i}", "r", f"e{(i + 1) % 8}") for i in range(8)]
        chords = [(f"e{i}", "s", f"e{(i + 3) % 8}") for i in range(8)]
        splits = make_splits(ring + chords)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            queries = generate_queries(splits, {"1p": 6, "2i": 6}, seed=2)["train"]
        config = ModelConfig(
            dim=8, gamma=2.0, negatives=3, learning_rate=0.01, epochs=2,
            batch_per_structure=4, seed=5, dtype="float32",
        )
        result = train(splits, queries, config, log=None)
        assert all(t.dtype == np.float32 for t in result.final_params.tensors.values())
        assert np.isfinite(result.state.history[-1]["loss"])

        from boxquery.model import load_checkpoint

        path = tmp_path / "f32.ckpt"
        save_checkpoint(path, result.final_params, "e", "r")
        loaded, _, _ = load_checkpoint(path)
        assert all(t.dtype == np.float32 for t in loaded.tensors.values())
        for name in loaded.tensors:
            assert np.array_equal(loaded.tensors[name], result.final_params.tensors[name])


class TestDeskScaleRun:
    def test_loss_drops_below_quarter(self, trained_bipartite):
        _, _, _, result = trained_bipartite
        history = result.state.history
        assert history[-1]["loss"] < 0.25 * history[0]["loss"]

    def test_heldin_h3_above_point_nine(self, trained_bipartite):
        from boxquery.evaluation import aggregate

        splits, queries, _, result = trained_bipartite
        report = aggregate(queries, result.params, splits, "train")
        h3 = np.mean([report.structures[s]["h3"] for s in report.structures])
        assert h3 > 0.9
