import numpy as np
import pytest

from clif import numcore as nc
from clif.adapters import AdapterModel
from clif.bihnet import (
    HyperNetwork,
    RegConfig,
    RepresentationMemory,
    bilevel_loss,
    compute_task_representation,
    regularization_term,
)
from clif.learners import LearnerConfig, build_learner
from clif.serialize import FormatError


@pytest.fixture(scope="module")
def model(small_encoder, small_shape):
    return AdapterModel(small_encoder, small_shape)


def make_examples(n, labels=("labelone", "labeltwo")):
    rng = np.random.default_rng(0)
    return [(f"text {rng.integers(10_000)} sample {i}", labels[i % len(labels)])
            for i in range(n)]


class TestTaskRepresentation:
    def test_full_sample_collapses_bitwise(self, small_encoder):
        examples = make_examples(12)
        rep = compute_task_representation(small_encoder, examples, k=12, sample_seed=7)
        assert np.array_equal(rep.z_h, rep.z_f)
        rep_over = compute_task_representation(small_encoder, examples, k=50, sample_seed=7)
        assert np.array_equal(rep_over.z_h, rep_over.z_f)
        assert rep_over.sample_size == 12

    def test_permutation_invariance_of_z_h(self, small_encoder):
        examples = make_examples(10)
        rep1 = compute_task_representation(small_encoder, examples, k=3, sample_seed=1)
        rep2 = compute_task_representation(small_encoder, examples[::-1], k=3, sample_seed=1)
        np.testing.assert_allclose(rep1.z_h, rep2.z_h, rtol=1e-12)

    def test_singleton_dataset(self, small_encoder):
        rep = compute_task_representation(small_encoder, [("one text", "labelone")], 5, 0)
        expect = small_encoder.represent_example("one text", "labelone")
        assert np.array_equal(rep.z_h, expect)
        assert np.array_equal(rep.z_f, expect)

    def test_empty_dataset_rejected(self, small_encoder):
        with pytest.raises(ValueError, match="empty"):
            compute_task_representation(small_encoder, [], 5, 0)


class TestHyperNetwork:
    def test_same_z_same_weights(self, small_shape):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=11)
        z = np.random.default_rng(1).normal(size=16) * 0.2
        assert np.array_equal(hnet.generate_flat(z).data, hnet.generate_flat(z).data)

    @pytest.mark.parametrize("seed", range(10))
    def test_fresh_hypernetwork_generates_near_zero(self, seed, small_shape, small_encoder):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=seed)
        z = compute_task_representation(small_encoder, make_examples(20), 10, seed).z_h
        assert np.abs(hnet.generate_flat(z).data).max() < 0.1

    def test_dimension_mismatch_rejected(self, small_shape):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=0)
        with pytest.raises(ValueError, match="dim"):
            hnet.generate_flat(np.zeros(7))

    def test_gradients_match_finite_differences(self, model, small_shape, small_encoder):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=3)
        rep = compute_task_representation(small_encoder, make_examples(16), 4, 2)
        label_mat = model.label_matrix(["labelone", "labeltwo"])
        texts = ["alpha beta", "gamma delta"]

        def build():
            return bilevel_loss(model, hnet, rep, texts, [0, 1], label_mat)

        report = nc.grad_check(build, store, max_entries_per_param=40, seed=1)
        assert report.max_rel_err < 1e-4, report


class TestBilevelLoss:
    def test_collapse_doubles_single_loss_exactly(self, model, small_shape, small_encoder):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=5)
        examples = make_examples(8)
        rep = compute_task_representation(small_encoder, examples, k=8, sample_seed=0)
        label_mat = model.label_matrix(["labelone", "labeltwo"])
        texts = [x for x, _ in examples[:4]]
        targets = [0, 1, 0, 1]
        double = bilevel_loss(model, hnet, rep, texts, targets, label_mat)
        single = model.batch_loss(texts, targets, label_mat, hnet.generate(rep.z_h))
        assert double.item() == 2.0 * single.item()

    def test_collapse_gradients_match_scaled_single(self, model, small_shape, small_encoder):
        examples = make_examples(8)
        rep = compute_task_representation(small_encoder, examples, k=8, sample_seed=0)
        label_mat = model.label_matrix(["labelone", "labeltwo"])
        texts = [x for x, _ in examples[:4]]

        store1 = nc.ParamStore()
        h1 = HyperNetwork(store1, small_shape, seed=5)
        bilevel_loss(model, h1, rep, texts, [0, 1, 0, 1], label_mat).backward()

        store2 = nc.ParamStore()
        h2 = HyperNetwork(store2, small_shape, seed=5)
        nc.scale(model.batch_loss(texts, [0, 1, 0, 1], label_mat, h2.generate(rep.z_h)), 2.0).backward()

        for name in store1.names():
            assert np.array_equal(store1[name].grad, store2[name].grad), name

    def test_loss_finite_and_ablation_drops_term(self, model, small_shape, small_encoder):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=6)
        examples = make_examples(20)
        rep = compute_task_representation(small_encoder, examples, k=4, sample_seed=3)
        label_mat = model.label_matrix(["labelone", "labeltwo"])
        texts = [x for x, _ in examples[:6]]
        targets = [0, 1] * 3
        full = bilevel_loss(model, hnet, rep, texts, targets, label_mat)
        high_only = bilevel_loss(model, hnet, rep, texts, targets, label_mat,
                                 include_fewshot=False)
        assert np.isfinite(full.item())
        single = model.batch_loss(texts, targets, label_mat, hnet.generate(rep.z_h))
        assert high_only.item() == single.item()

    def test_loss_decreases_on_separable_task(self, model, small_shape, mini_benchmark,
                                              small_encoder):
        task = mini_benchmark.task("up-1")
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=9)
        pairs = [(x, task.labels[y]) for x, y in task.train]
        rep = compute_task_representation(small_encoder, pairs, k=10, sample_seed=0)
        label_mat = np.stack([small_encoder.embed_label(y) for y in task.labels])
        opt = nc.Adam(store, lr=1e-2)
        first = None
        for step in range(200):
            texts = [x for x, _ in task.train[:32]]
            targets = [y for _, y in task.train[:32]]
            loss = bilevel_loss(model, hnet, rep, texts, targets, label_mat)
            if first is None:
                first = loss.item()
            loss.backward()
            opt.step()
        assert loss.item() < 0.2 * first


class TestMemoryAndRegularizer:
    def build_memory(self, small_shape, small_encoder, hnet, n_tasks=2):
        mem = RepresentationMemory(small_shape.dim, small_shape.param_count)
        for i in range(n_tasks):
            rep = compute_task_representation(
                small_encoder, make_examples(10, labels=(f"label{i}a", f"label{i}b")), 5, i
            )
            mem.store(f"task-{i}", rep.z_h, hnet)
        return mem

    def test_empty_memory_no_snapshot_no_penalty(self, small_shape):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=1)
        mem = RepresentationMemory(small_shape.dim, small_shape.param_count)
        mem.snapshot_all(hnet)
        assert len(mem) == 0
        assert regularization_term(hnet, mem, step_seed=0) is None

    def test_snapshot_idempotent_when_hnet_unchanged(self, small_shape, small_encoder):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=2)
        mem = self.build_memory(small_shape, small_encoder, hnet)
        mem.snapshot_all(hnet)
        first = {n: mem.snapshot_for(n).copy() for n in mem.names()}
        mem.snapshot_all(hnet)
        for n in mem.names():
            assert np.array_equal(first[n], mem.snapshot_for(n))

    def test_penalty_zero_right_after_snapshot(self, small_shape, small_encoder):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=3)
        mem = self.build_memory(small_shape, small_encoder, hnet, n_tasks=3)
        mem.snapshot_all(hnet)
        for seed in range(5):
            term = regularization_term(hnet, mem, step_seed=seed)
            assert term.item() == 0.0

    def test_penalty_arithmetic(self, small_shape, small_encoder):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=4)
        mem = self.build_memory(small_shape, small_encoder, hnet, n_tasks=1)
        name = mem.names()[0]
        delta = np.zeros(small_shape.param_count)
        delta[0], delta[1] = 1.0, 2.0
        mem._snapshots[name] = hnet.generate_flat(mem.z_for(name)).data - delta
        term = regularization_term(hnet, mem, step_seed=0)
        assert term.item() == pytest.approx(5.0, rel=1e-9)

    def test_penalty_quadratic_in_difference(self, small_shape, small_encoder):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=5)
        mem = self.build_memory(small_shape, small_encoder, hnet, n_tasks=1)
        name = mem.names()[0]
        gen = hnet.generate_flat(mem.z_for(name)).data
        delta = np.random.default_rng(0).normal(size=small_shape.param_count) * 0.1
        mem._snapshots[name] = gen - delta
        p1 = regularization_term(hnet, mem, step_seed=0).item()
        mem._snapshots[name] = gen - 2 * delta
        p2 = regularization_term(hnet, mem, step_seed=0).item()
        assert p2 == pytest.approx(4 * p1, rel=1e-9)
        assert p1 >= 0

    def test_penalty_uses_only_high_resource_vectors(self, small_shape, small_encoder):
        # the memory never holds z_f; entries are (name, z_h, snapshot)
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=6)
        mem = self.build_memory(small_shape, small_encoder, hnet)
        blob = mem.to_bytes()
        reread = RepresentationMemory.from_bytes(blob)
        for n in mem.names():
            assert np.array_equal(reread.z_for(n), mem.z_for(n))
            assert np.array_equal(reread.snapshot_for(n), mem.snapshot_for(n))

    def test_duplicate_store_rejected(self, small_shape, small_encoder):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=7)
        mem = self.build_memory(small_shape, small_encoder, hnet, n_tasks=1)
        rep = compute_task_representation(small_encoder, make_examples(5), 3, 0)
        with pytest.raises(ValueError, match="already stored"):
            mem.store(mem.names()[0], rep.z_h, hnet)

    def test_serialization_contains_no_training_text(self, small_shape, small_encoder):
        sentinel = "zqxjvzkwpq"
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=8)
        mem = RepresentationMemory(small_shape.dim, small_shape.param_count)
        examples = [(f"{sentinel} secret text {i}", "labelone") for i in range(6)]
        rep = compute_task_representation(small_encoder, examples, 3, 0)
        mem.store("some-task", rep.z_h, hnet)
        blob = mem.to_bytes()
        assert sentinel.encode() not in blob
        assert b"secret text" not in blob

    def test_bad_magic_rejected(self):
        with pytest.raises(FormatError, match="magic"):
            RepresentationMemory.from_bytes(b"NOTCLIF0" + b"\x00" * 32)

    def test_file_roundtrip(self, small_shape, small_encoder, tmp_path):
        store = nc.ParamStore()
        hnet = HyperNetwork(store, small_shape, seed=9)
        mem = self.build_memory(small_shape, small_encoder, hnet)
        path = tmp_path / "memory.bin"
        mem.save(path)
        reread = RepresentationMemory.load(path)
        assert reread.names() == mem.names()


class TestDriftAnchoring:
    def test_strong_regularizer_anchors_generated_weights(self, encoder_config, shape):
        # first two tasks of the shipped interference stream; margins frozen
        # from the oracle run (drift 0.287 at strength 1e4 vs 32.67 at 0)
        from clif.datagen import build_benchmark
        from clif.encoder import FrozenEncoder

        bench = build_benchmark("clif-interfere")
        drifts = {}
        for strength in (1e4, 0.0):
            cfg = LearnerConfig(algorithm="bihnet-reg", learning_rate=1e-2,
                                reg=RegConfig(reg_strength=strength))
            learner = build_learner(cfg, FrozenEncoder(encoder_config), shape, seed=1)
            t1 = bench.task("permuted-1")
            for task in (t1, bench.task("permuted-2")):
                learner.before_task(task)
                learner.train_task(task)
                learner.after_task(task)
            gen_now = learner.hnet.generate_flat(learner.memory.z_for(t1.name)).data
            drifts[strength] = float(np.linalg.norm(gen_now - learner.memory.snapshot_for(t1.name)))
        assert drifts[1e4] < 1.0
        assert drifts[0.0] > 5.0
        assert drifts[0.0] / drifts[1e4] > 20.0
