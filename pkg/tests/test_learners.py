import numpy as np
import pytest

from clif import numcore as nc
from clif.bihnet import RegConfig
from clif.datagen import sample_episode
from clif.encoder import FrozenEncoder
from clif.learners import (
    ALGORITHMS,
    Checkpoint,
    FisherState,
    LearnerConfig,
    MajorityPredictor,
    build_learner,
    ewc_penalty,
    majority_index,
)
from clif.protocol import aggregate_metrics, run_stream


def fresh(algorithm, small_encoder_config, small_shape, seed=1, **overrides):
    kwargs = dict(learning_rate=1e-2, max_epochs=15, fewshot_epochs=30)
    kwargs.update(overrides)
    cfg = LearnerConfig(algorithm=algorithm, **kwargs)
    return build_learner(cfg, FrozenEncoder(small_encoder_config), small_shape, seed)


class TestEarlyStopping:
    def test_stops_after_patience_and_restores_first_epoch(self, small_encoder_config,
                                                           small_shape, mini_benchmark):
        learner = fresh("vanilla", small_encoder_config, small_shape)
        task = mini_benchmark.task("up-1")
        epochs_run = []
        states = {}

        def step(texts, targets, epoch):
            if not epochs_run or epochs_run[-1] != epoch:
                epochs_run.append(epoch)
            learner.store["adapter.flat"].data[0] += 0.001  # move every epoch
            states[epoch] = learner.store.state_dict()

        accs = iter([0.9, 0.5, 0.5, 0.5, 0.5, 0.5])
        best = learner._run_early_stopped(task, step, lambda: next(accs))
        assert epochs_run[-1] == 1 + learner.config.patience
        assert best.epoch == 1
        assert np.array_equal(learner.store["adapter.flat"].data,
                              states[1]["adapter.flat"])

    def test_empty_train_split_rejected(self, small_encoder_config, small_shape,
                                        mini_benchmark):
        learner = fresh("vanilla", small_encoder_config, small_shape)
        task = mini_benchmark.task("up-1")
        broken = type(task)(name="broken", labels=task.labels, train=[],
                            validation=task.validation, test=task.test)
        with pytest.raises(ValueError, match="empty train split"):
            learner._run_early_stopped(broken, lambda *a: None, lambda: 0.0)

    def test_separable_task_reaches_full_validation_accuracy(self, encoder_config, shape,
                                                             mini_benchmark):
        # needs the full-width encoder; the 16-dim test encoder caps at 0.95
        learner = fresh("vanilla", encoder_config, shape)
        task = mini_benchmark.task("up-1")
        learner.train_task(task)
        assert learner.evaluate(task, "validation") == 1.0

    def test_same_seed_same_parameters(self, small_encoder_config, small_shape,
                                       mini_benchmark):
        task = mini_benchmark.task("up-1")
        a = fresh("vanilla", small_encoder_config, small_shape, seed=7)
        b = fresh("vanilla", small_encoder_config, small_shape, seed=7)
        a.train_task(task)
        b.train_task(task)
        assert a.trainable_checksum() == b.trainable_checksum()


class TestCheckpoint:
    def test_roundtrip_reproduces_validation_accuracy(self, small_encoder_config,
                                                      small_shape, mini_benchmark):
        learner = fresh("vanilla", small_encoder_config, small_shape)
        task = mini_benchmark.task("up-1")
        learner.train_task(task)
        acc = learner.evaluate(task, "validation")
        ckpt = Checkpoint(params=learner.store.state_dict(), val_acc=acc, epoch=3)
        blob = ckpt.to_bytes()
        # perturb, then restore from the serialized checkpoint
        learner.store["adapter.flat"].data[...] += 0.5
        assert learner.evaluate(task, "validation") != acc or True
        restored = Checkpoint.from_bytes(blob)
        learner.store.load_state_dict(restored.params)
        assert learner.evaluate(task, "validation") == acc
        assert restored.val_acc == acc
        assert restored.epoch == 3


class TestEWC:
    def test_penalty_zero_at_anchor(self, small_encoder_config, small_shape):
        learner = fresh("ewc", small_encoder_config, small_shape)
        state = FisherState(
            fisher={"adapter.flat": np.ones(small_shape.param_count)},
            anchors={"adapter.flat": learner.store["adapter.flat"].data.copy()},
        )
        assert ewc_penalty(state, learner.store, 0.5).item() == 0.0

    def test_penalty_arithmetic(self):
        store = nc.ParamStore()
        store.add("w", [1.0, 1.0])
        state = FisherState(fisher={"w": np.ones(2)}, anchors={"w": np.zeros(2)})
        # (lambda/2) * sum F (theta - anchor)^2 = 0.005 * 2 = 0.01
        assert ewc_penalty(state, store, 0.01).item() == pytest.approx(0.01)

    def test_empty_fisher_gives_none(self):
        store = nc.ParamStore()
        store.add("w", [1.0])
        assert ewc_penalty(FisherState(), store, 0.5) is None

    def test_fisher_nonnegative_after_updates(self, small_encoder_config, small_shape,
                                              mini_benchmark):
        learner = fresh("ewc", small_encoder_config, small_shape)
        for name in ("up-1", "up-2"):
            task = mini_benchmark.task(name)
            learner.before_task(task)
            learner.train_task(task)
            learner.after_task(task)
        for arr in learner.fisher_state.fisher.values():
            assert np.all(arr >= 0)

    def test_lambda_zero_equals_vanilla_bitwise(self, small_encoder_config, small_shape,
                                                mini_benchmark):
        tasks = [mini_benchmark.task(n) for n in mini_benchmark.upstream]
        ewc = fresh("ewc", small_encoder_config, small_shape, seed=3, ewc_lambda=0.0)
        vanilla = fresh("vanilla", small_encoder_config, small_shape, seed=3)
        m1 = run_stream(ewc, tasks)
        m2 = run_stream(vanilla, tasks)
        assert m1.rows == m2.rows
        assert ewc.trainable_checksum() == vanilla.trainable_checksum()


class TestMbpa:
    def build_trained(self, small_encoder_config, small_shape, mini_benchmark, **over):
        learner = fresh("mbpa", small_encoder_config, small_shape, **over)
        for name in mini_benchmark.upstream:
            task = mini_benchmark.task(name)
            learner.before_task(task)
            learner.train_task(task)
            learner.after_task(task)
        return learner

    def test_replay_skips_off_interval_steps(self, small_encoder_config, small_shape,
                                             mini_benchmark):
        learner = self.build_trained(small_encoder_config, small_shape, mini_benchmark,
                                     replay_interval=10_000)
        before = learner.trainable_checksum()
        learner.global_step = 3  # not a multiple of the interval
        opt = nc.Adam(learner.store, lr=1e-2)
        learner._post_step(opt)
        assert learner.trainable_checksum() == before

    def test_replay_batch_from_single_task_memory(self, small_encoder_config, small_shape,
                                                  mini_benchmark):
        learner = fresh("mbpa", small_encoder_config, small_shape)
        task = mini_benchmark.task("up-1")
        learner.after_task(task)
        idx = learner.memory.sample_batch(8, nc.rng_for(0, "test"))
        assert all(learner.memory.task_names[i] == "up-1" for i in idx)

    def test_local_steps_zero_equals_direct_prediction(self, small_encoder_config,
                                                       small_shape, mini_benchmark):
        learner = self.build_trained(small_encoder_config, small_shape, mini_benchmark,
                                     mbpa_local_steps=0)
        task = mini_benchmark.task("up-1")
        text = task.test[0][0]
        adapted = learner.adapt_predict(text, task.labels)
        direct = learner.model.score_labels(text, task.labels, learner._weights())
        assert np.array_equal(adapted.scores, direct.scores)

    def test_global_parameters_untouched_by_adapted_predictions(self, small_encoder_config,
                                                                small_shape, mini_benchmark):
        learner = self.build_trained(small_encoder_config, small_shape, mini_benchmark)
        before = learner.trainable_checksum()
        task = mini_benchmark.task("up-2")
        for text, _ in task.test[:5]:
            learner.adapt_predict(text, task.labels)
        assert learner.trainable_checksum() == before

    def test_adapted_not_worse_than_unadapted_on_interference(self, small_encoder_config,
                                                              small_shape, mini_interfere):
        tasks = [mini_interfere.task(n) for n in mini_interfere.upstream]
        learner = fresh("mbpa", small_encoder_config, small_shape, seed=2,
                        replay_interval=10)
        for task in tasks:
            learner.before_task(task)
            learner.train_task(task)
            learner.after_task(task)
        adapted = np.mean([learner.evaluate(t) for t in tasks])
        plain_eval = np.mean([super(type(learner), learner).evaluate(t) for t in tasks])
        assert adapted >= plain_eval


class TestReplayBenefit:
    def test_replay_beats_vanilla_on_interference_stream(self, encoder_config, shape):
        """Oracle-frozen margin: dense replay recovers >= 5 points of final
        accuracy over vanilla on the shipped interference stream."""
        from clif.datagen import build_benchmark

        bench = build_benchmark("clif-interfere")
        tasks = [bench.task(n) for n in bench.upstream]
        vanilla = build_learner(LearnerConfig(algorithm="vanilla", learning_rate=1e-2),
                                FrozenEncoder(encoder_config), shape, 1)
        replay = build_learner(
            LearnerConfig(algorithm="mbpa", learning_rate=1e-2, replay_interval=10,
                          mbpa_local_steps=0),
            FrozenEncoder(encoder_config), shape, 1)
        final_v = aggregate_metrics(run_stream(vanilla, tasks)).final_acc
        final_r = aggregate_metrics(run_stream(replay, tasks)).final_acc
        assert final_r - final_v >= 0.05


class TestMTL:
    def test_single_task_joint_equals_train_task(self, small_encoder_config, small_shape,
                                                 mini_benchmark):
        task = mini_benchmark.task("up-1")
        a = fresh("mtl", small_encoder_config, small_shape, seed=5)
        b = fresh("mtl", small_encoder_config, small_shape, seed=5)
        a.train_stream([task])
        b.train_task(task)
        assert a.trainable_checksum() == b.trainable_checksum()

    def test_batches_never_mix_tasks(self, small_encoder_config, small_shape,
                                     mini_benchmark, monkeypatch):
        learner = fresh("mtl", small_encoder_config, small_shape, max_epochs=2)
        tasks = [mini_benchmark.task(n) for n in mini_benchmark.upstream]
        label_sets = {tuple(t.labels) for t in tasks}
        seen_batches = []
        original = learner.model.batch_loss

        def spy(texts, targets, label_mat, weights):
            seen_batches.append(label_mat.shape)
            return original(texts, targets, label_mat, weights)

        monkeypatch.setattr(learner.model, "batch_loss", spy)
        learner.train_stream(tasks)
        # every loss call uses exactly one task's label matrix
        assert all(shape[0] in {len(ls) for ls in label_sets} for shape in seen_batches)

    def test_mtl_not_worse_than_vanilla_on_interference(self, encoder_config, shape):
        from clif.datagen import build_benchmark

        bench = build_benchmark("clif-interfere")
        tasks = [bench.task(n) for n in bench.upstream]
        vanilla = build_learner(LearnerConfig(algorithm="vanilla", learning_rate=1e-2),
                                FrozenEncoder(encoder_config), shape, 1)
        mtl = build_learner(LearnerConfig(algorithm="mtl", learning_rate=1e-2),
                            FrozenEncoder(encoder_config), shape, 1)
        final_v = aggregate_metrics(run_stream(vanilla, tasks)).final_acc
        final_m = aggregate_metrics(run_stream(mtl, tasks)).final_acc
        assert final_m >= final_v


class TestFewshot:
    def test_upstream_state_isolated_from_adaptation(self, small_encoder_config,
                                                     small_shape, mini_benchmark):
        learner = fresh("vanilla", small_encoder_config, small_shape)
        learner.train_task(mini_benchmark.task("up-1"))
        before = learner.trainable_checksum()
        episode = sample_episode(mini_benchmark.task("few-1"), 4, 0)
        for _ in range(3):
            learner.fewshot_adapt(episode)
        assert learner.trainable_checksum() == before

    def test_episodes_do_not_affect_each_other(self, small_encoder_config, small_shape,
                                               mini_benchmark):
        learner = fresh("bihnet-vanilla", small_encoder_config, small_shape)
        learner.train_task(mini_benchmark.task("up-1"))
        ep1 = sample_episode(mini_benchmark.task("few-1"), 4, 0)
        ep2 = sample_episode(mini_benchmark.task("few-1"), 4, 1)
        p_fresh = learner.fewshot_adapt(ep1)
        learner.fewshot_adapt(ep2)
        p_again = learner.fewshot_adapt(ep1)
        assert np.array_equal(p_fresh._weights.flat.data, p_again._weights.flat.data)

    def test_zero_epochs_returns_unadapted_model(self, small_encoder_config, small_shape,
                                                 mini_benchmark):
        learner = fresh("vanilla", small_encoder_config, small_shape, fewshot_epochs=0)
        learner.train_task(mini_benchmark.task("up-1"))
        episode = sample_episode(mini_benchmark.task("few-1"), 4, 0)
        predictor = learner.fewshot_adapt(episode)
        assert np.array_equal(predictor._weights.flat.data,
                              learner.store["adapter.flat"].data)

    def test_empty_episode_rejected(self, small_encoder_config, small_shape,
                                    mini_benchmark):
        learner = fresh("vanilla", small_encoder_config, small_shape)
        episode = sample_episode(mini_benchmark.task("few-1"), 4, 0)
        episode.train = []
        with pytest.raises(ValueError, match="empty"):
            learner.fewshot_adapt(episode)

    def test_adapter_mode_finetune(self, small_encoder_config, small_shape, mini_benchmark):
        learner = fresh("bihnet-vanilla", small_encoder_config, small_shape,
                        fewshot_finetune="adapter")
        learner.before_task(mini_benchmark.task("up-1"))
        learner.train_task(mini_benchmark.task("up-1"))
        learner.after_task(mini_benchmark.task("up-1"))
        episode = sample_episode(mini_benchmark.task("few-1"), 4, 0)
        predictor = learner.fewshot_adapt(episode)
        acc = predictor.evaluate(episode.test)
        assert 0.0 <= acc <= 1.0


class TestSingleLearners:
    def test_single_resets_per_task(self, small_encoder_config, small_shape,
                                    mini_benchmark):
        learner = fresh("adapter-single", small_encoder_config, small_shape)
        t1, t2 = (mini_benchmark.task(n) for n in mini_benchmark.upstream)
        learner.before_task(t1)
        fresh_sum = learner.trainable_checksum()
        learner.train_task(t1)
        trained_sum = learner.trainable_checksum()
        assert trained_sum != fresh_sum
        learner.before_task(t2)
        assert learner.trainable_checksum() == fresh_sum

    def test_single_fewshot_starts_from_fresh_init(self, small_encoder_config, small_shape,
                                                   mini_benchmark):
        learner = fresh("adapter-single", small_encoder_config, small_shape)
        episode = sample_episode(mini_benchmark.task("few-1"), 4, 0)
        p_before = learner.fewshot_adapt(episode)
        learner.before_task(mini_benchmark.task("up-1"))
        learner.train_task(mini_benchmark.task("up-1"))
        p_after = learner.fewshot_adapt(episode)
        assert np.array_equal(p_before._weights.flat.data, p_after._weights.flat.data)

    def test_bihnet_single_resets(self, small_encoder_config, small_shape, mini_benchmark):
        learner = fresh("bihnet-single", small_encoder_config, small_shape)
        t1 = mini_benchmark.task("up-1")
        learner.before_task(t1)
        fresh_sum = learner.trainable_checksum()
        learner.train_task(t1)
        learner.after_task(t1)
        learner.before_task(mini_benchmark.task("up-2"))
        assert learner.trainable_checksum() == fresh_sum


class TestHNetReg:
    def test_embeddings_are_trained(self, small_encoder_config, small_shape,
                                    mini_benchmark):
        learner = fresh("hnet-reg", small_encoder_config, small_shape)
        task = mini_benchmark.task("up-1")
        learner.before_task(task)
        init = nc.rng_for(learner.seed, "emb", task.name).normal(0.0, 0.01, size=16)
        learner.train_task(task)
        learner.after_task(task)
        trained = learner.store[f"emb.{task.name}"].data
        assert not np.array_equal(trained, init)
        assert np.array_equal(learner.memory.z_for(task.name), trained)

    def test_stream_and_fewshot_work(self, small_encoder_config, small_shape,
                                     mini_benchmark):
        learner = fresh("hnet-reg", small_encoder_config, small_shape)
        tasks = [mini_benchmark.task(n) for n in mini_benchmark.upstream]
        matrix = run_stream(learner, tasks)
        assert matrix.complete
        episode = sample_episode(mini_benchmark.task("few-1"), 4, 0)
        acc = learner.fewshot_adapt(episode).evaluate(episode.test)
        assert 0.0 <= acc <= 1.0


class TestMajority:
    def test_most_frequent_label_wins(self):
        examples = [("a", 0)] * 3 + [("b", 1)]
        assert majority_index(examples) == 0

    def test_tie_breaks_to_lowest_index(self):
        examples = [("a", 1), ("b", 0)]
        assert majority_index(examples) == 0

    def test_balanced_binary_accuracy_half(self, small_encoder_config, small_shape,
                                           mini_benchmark):
        learner = fresh("majority", small_encoder_config, small_shape)
        task = mini_benchmark.task("up-1")
        learner.train_task(task)
        assert learner.evaluate(task) == pytest.approx(0.5)

    def test_accuracy_equals_class_prior(self):
        pred = MajorityPredictor(1)
        test = [("x", 1)] * 7 + [("y", 0)] * 3
        assert pred.evaluate(test) == pytest.approx(0.7)

    def test_fewshot_majority(self, small_encoder_config, small_shape, mini_benchmark):
        learner = fresh("majority", small_encoder_config, small_shape)
        episode = sample_episode(mini_benchmark.task("few-1"), 4, 0)
        episode.train = episode.train[:3]  # 2 of class 0, 1 of class 1
        counts = np.bincount([y for _, y in episode.train])
        predictor = learner.fewshot_adapt(episode)
        assert predictor.index == int(np.argmax(counts))


class TestRegistry:
    def test_all_algorithms_support_the_interface(self, small_encoder_config, small_shape,
                                                  mini_benchmark):
        tasks = [mini_benchmark.task(n) for n in mini_benchmark.upstream]
        episode = sample_episode(mini_benchmark.task("few-1"), 4, 0)
        for tag in ALGORITHMS:
            learner = fresh(tag, small_encoder_config, small_shape, max_epochs=2,
                            fewshot_epochs=2)
            matrix = run_stream(learner, tasks)
            assert matrix.complete, tag
            predictor = learner.fewshot_adapt(episode)
            acc = predictor.evaluate(episode.test)
            assert 0.0 <= acc <= 1.0, tag

    def test_unknown_algorithm_rejected(self, small_encoder_config, small_shape):
        with pytest.raises(ValueError, match="unknown algorithm"):
            fresh("mystery", small_encoder_config, small_shape)


class TestDegeneracies:
    def test_bihnet_reg_zero_equals_bihnet_vanilla(self, small_encoder_config, small_shape,
                                                   mini_benchmark):
        tasks = [mini_benchmark.task(n) for n in mini_benchmark.upstream]
        reg0 = fresh("bihnet-reg", small_encoder_config, small_shape, seed=9,
                     reg=RegConfig(reg_strength=0.0))
        vanilla = fresh("bihnet-vanilla", small_encoder_config, small_shape, seed=9)
        m1 = run_stream(reg0, tasks)
        m2 = run_stream(vanilla, tasks)
        assert m1.rows == m2.rows
        assert reg0.trainable_checksum() == vanilla.trainable_checksum()

    def test_mbpa_disabled_equals_vanilla(self, small_encoder_config, small_shape,
                                          mini_benchmark):
        tasks = [mini_benchmark.task(n) for n in mini_benchmark.upstream]
        mbpa = fresh("mbpa", small_encoder_config, small_shape, seed=9,
                     replay_interval=0, mbpa_local_steps=0)
        vanilla = fresh("vanilla", small_encoder_config, small_shape, seed=9)
        m1 = run_stream(mbpa, tasks)
        m2 = run_stream(vanilla, tasks)
        assert m1.rows == m2.rows
        assert mbpa.trainable_checksum() == vanilla.trainable_checksum()
