import csv
import math

import numpy as np
import pytest

from pyreid.data_synth import GenConfig, generate_dataset
from pyreid.errors import ConfigError, TrainingDiverged
from pyreid.evaluation import evaluate_checkpoint
from pyreid.scheduler import TRACE_COLUMNS
from pyreid.trainer import (PROFILES, SGD, TrainConfig, build_model,
                            load_checkpoint, lr_schedule, make_config,
                            make_label_map, parse_config_file, rebuild_model,
                            resolved_config_text, sgd_step, train)


def read_trace(path):
    return list(csv.DictReader(open(path)))


@pytest.fixture(scope="module")
def short_run(toy_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("short_run")
    config = TrainConfig(seed=3, epochs=6)
    result = train(config, toy_dataset, out)
    return config, result


class TestLrSchedule:
    def test_base_rate_before_first_halving(self):
        assert lr_schedule(0, 0.01, (60, 70, 80, 90)) == pytest.approx(0.01)

    def test_one_halving_applied(self):
        assert lr_schedule(65, 0.01, (60, 70, 80, 90)) == pytest.approx(0.005)

    def test_four_halvings(self):
        assert lr_schedule(95, 0.01, (60, 70, 80, 90)) == pytest.approx(0.000625)

    def test_halving_applies_at_the_epoch_itself(self):
        assert lr_schedule(60, 0.01, (60, 70, 80, 90)) == pytest.approx(0.005)


class TestSgdStep:
    def test_plain_gradient_step(self):
        w = np.array([1.0])
        v = np.zeros(1)
        sgd_step(w, np.array([0.5]), v, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert w[0] == pytest.approx(0.95)

    def test_zero_gradient_is_fixed_point(self):
        w = np.array([2.0])
        v = np.zeros(1)
        sgd_step(w, np.array([0.0]), v, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert w[0] == 2.0

    def test_two_momentum_steps(self):
        # v1 = 1, w1 = -0.1; v2 = 1.9, w2 = -0.29
        w = np.array([0.0])
        v = np.zeros(1)
        for _ in range(2):
            sgd_step(w, np.array([1.0]), v, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert w[0] == pytest.approx(-0.29)

    def test_weight_decay_enters_velocity(self):
        w = np.array([10.0])
        v = np.zeros(1)
        sgd_step(w, np.array([0.0]), v, lr=0.1, momentum=0.0, weight_decay=0.1)
        assert w[0] == pytest.approx(10.0 - 0.1 * 1.0)

    def test_optimizer_exempts_batch_norm_params(self, toy_dataset):
        model = build_model(TrainConfig(), toy_dataset.image_hw, 10)
        opt = SGD(list(model.named_parameters()), momentum=0.9, weight_decay=5e-4)
        for name, _ in opt.params:
            if name.endswith((".gamma", ".beta")):
                assert not opt.decays(name), name
            else:
                assert opt.decays(name), name

    def test_non_finite_gradient_aborts_with_name(self, toy_dataset):
        model = build_model(TrainConfig(), toy_dataset.image_hw, 10)
        opt = SGD(list(model.named_parameters()), momentum=0.9, weight_decay=0.0)
        bad = opt.params[0]
        bad[1].grad = np.full_like(bad[1].data, np.nan)
        with pytest.raises(TrainingDiverged, match=bad[0]):
            opt.step(0.01)


class TestConfig:
    def test_desk_profile_defaults(self):
        c = PROFILES["desk"]
        assert (c.n, c.margin, c.alpha, c.gamma, c.switch_ratio) == \
            (6, 1.4, 0.25, 2.0, 0.16)
        assert (c.momentum, c.weight_decay, c.base_lr) == (0.9, 0.0005, 0.01)

    def test_paper_profile_values(self):
        c = PROFILES["paper"]
        assert (c.feature_dim, c.batch_size, c.p_ids, c.k_imgs) == (128, 64, 8, 8)
        assert c.epochs == 120
        assert c.lr_halving_epochs == (60, 70, 80, 90)

    def test_pk_product_must_match_batch(self):
        with pytest.raises(ConfigError, match="batch_size"):
            TrainConfig(p_ids=4, k_imgs=8, batch_size=16).validate()

    def test_mask_length_must_match_n(self):
        with pytest.raises(ConfigError, match="digits"):
            TrainConfig(pyramid_mask="11111").validate()

    def test_halvings_must_increase(self):
        with pytest.raises(ConfigError, match="increasing"):
            TrainConfig(lr_halving_epochs=(20, 15)).validate()

    def test_config_file_roundtrip(self, tmp_path):
        base = make_config("desk", overrides={"feature_dim": 8, "seed": 42,
                                              "pyramid_mask": "100001"})
        path = tmp_path / "run.ini"
        path.write_text(resolved_config_text(base))
        assert make_config("desk", file_path=path) == base

    def test_config_file_parse_errors(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("feature_dim 8\n")
        with pytest.raises(ConfigError, match="key=value"):
            parse_config_file(path)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            make_config("desk", overrides={"not_a_field": 1})

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("# comment\n\nfeature_dim = 8  # inline\n")
        assert parse_config_file(path) == {"feature_dim": "8"}


class TestTrainingRuns:
    def test_trace_row_per_iteration(self, toy_dataset, short_run):
        config, result = short_run
        rows = read_trace(result.trace_path)
        iters_per_epoch = math.ceil(len(toy_dataset.train_split()) / config.batch_size)
        assert len(rows) == config.epochs * iters_per_epoch
        assert [r["tau"] for r in rows] == [str(i + 1) for i in range(len(rows))]
        assert list(rows[0]) == list(TRACE_COLUMNS)

    def test_first_iteration_is_id_only(self, short_run):
        _, result = short_run
        assert read_trace(result.trace_path)[0]["phase"] == "id_only"

    def test_phase_matches_effective_loss_weights(self, short_run):
        _, result = short_run
        for row in read_trace(result.trace_path):
            assert row["phase"] in ("id_only", "combined")
            assert row["L_id"] != ""

    def test_bitwise_identical_reruns(self, toy_dataset, short_run, tmp_path):
        config, result = short_run
        again = train(config, toy_dataset, tmp_path / "again")
        assert open(result.trace_path, "rb").read() == \
            open(again.trace_path, "rb").read()
        assert open(result.checkpoint_path, "rb").read() == \
            open(again.checkpoint_path, "rb").read()

    def test_resume_reproduces_uninterrupted_trace(self, toy_dataset, short_run,
                                                   tmp_path):
        config, result = short_run
        first = train(TrainConfig(seed=3, epochs=3), toy_dataset, tmp_path / "a")
        resumed = train(TrainConfig(seed=3, epochs=6), toy_dataset, tmp_path / "b",
                        resume_from=first.checkpoint_path)
        full_rows = open(result.trace_path).read().splitlines()
        resumed_rows = open(resumed.trace_path).read().splitlines()
        cut = 3 * math.ceil(len(toy_dataset.train_split()) / config.batch_size)
        assert resumed_rows[1:] == full_rows[1 + cut:]
        assert open(result.checkpoint_path, "rb").read() == \
            open(resumed.checkpoint_path, "rb").read()

    def test_resume_with_wrong_architecture_refused(self, toy_dataset, short_run,
                                                    tmp_path):
        _, result = short_run
        bad = TrainConfig(seed=3, epochs=8, n=4, pyramid_mask="1111")
        with pytest.raises(ConfigError, match="n"):
            train(bad, toy_dataset, tmp_path / "c", resume_from=result.checkpoint_path)

    def test_resume_on_other_dataset_refused(self, short_run, tmp_path):
        _, result = short_run
        other = generate_dataset(GenConfig(num_ids=8, imgs_per_id=6, seed=99))
        with pytest.raises(ConfigError, match="fingerprint"):
            train(TrainConfig(seed=3, epochs=8), other, tmp_path / "d",
                  resume_from=result.checkpoint_path)

    def test_checkpoint_save_load_save_is_byte_identical(self, short_run, tmp_path):
        from pyreid.container import load_tensors, save_tensors
        _, result = short_run
        entries = load_tensors(result.checkpoint_path)
        save_tensors(tmp_path / "copy.pyrt", entries)
        assert (tmp_path / "copy.pyrt").read_bytes() == \
            open(result.checkpoint_path, "rb").read()

    def test_rebuilt_model_matches_trained_state(self, short_run):
        _, result = short_run
        entries = load_checkpoint(result.checkpoint_path)
        model, config = rebuild_model(entries)
        for name, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, entries[f"param/{name}"])
        for name, buf in model.named_buffers():
            np.testing.assert_array_equal(buf, entries[f"buffer/{name}"])

    def test_random_stream_consumes_whole_split_per_cycle(self, toy_dataset,
                                                          short_run):
        """Images drawn by random-sampling iterations form whole permutations
        of the train split, in order."""
        from pyreid.batching import random_batches
        config, result = short_run
        split = toy_dataset.train_split()
        rows = read_trace(result.trace_path)
        n_random = sum(1 for r in rows if r["phase"] == "id_only")
        expected: list = []
        epoch = 0
        while len(expected) < n_random:
            expected.extend(random_batches(split, config.batch_size, config.seed,
                                           epoch))
            epoch += 1
        consumed = np.concatenate([b.indices for b in expected[:n_random]])
        full_cycles = len(consumed) // len(split)
        for c in range(full_cycles):
            chunk = consumed[c * len(split):(c + 1) * len(split)]
            assert sorted(chunk.tolist()) == sorted(split.indices.tolist())

    def test_evaluation_of_trained_checkpoint(self, toy_dataset, short_run):
        _, result = short_run
        metrics = evaluate_checkpoint(result.checkpoint_path, toy_dataset)
        assert 0.0 <= metrics["mAP"] <= 1.0
        assert metrics["rank1"] >= 0.3  # six epochs already separate the toy set

    def test_combined_phase_reached_early(self, short_run):
        # seeded regression: the seed-3 desk run leaves the id_only regime
        # well inside its 6 epochs
        _, result = short_run
        assert "combined" in [r["phase"] for r in read_trace(result.trace_path)]

    def test_eval_geometry_mismatch_refused(self, short_run):
        _, result = short_run
        other = generate_dataset(GenConfig(num_ids=8, imgs_per_id=6, seed=1,
                                           img_h=24, img_w=8))
        with pytest.raises(ConfigError, match="images"):
            evaluate_checkpoint(result.checkpoint_path, other)


class TestAblationModes:
    def test_no_triplet_mode_never_computes_triplet(self, toy_dataset, tmp_path):
        result = train(TrainConfig(seed=1, epochs=2, no_triplet_alternating=True),
                       toy_dataset, tmp_path / "nt")
        rows = read_trace(result.trace_path)
        assert all(r["L_tp"] == "" for r in rows)
        phases = [r["phase"] for r in rows]
        assert phases[:4] == ["id_only", "combined", "id_only", "combined"]

    def test_masked_training_leaves_disabled_branches_at_init(self, toy_dataset,
                                                              tmp_path):
        config = TrainConfig(seed=2, epochs=1, pyramid_mask="000001")
        result = train(config, toy_dataset, tmp_path / "mask")
        model, _ = rebuild_model(load_checkpoint(result.checkpoint_path))
        init = build_model(config, toy_dataset.image_hw, model.num_identities)
        for (name, p), (_, q) in zip(model.named_parameters(),
                                     init.named_parameters()):
            if name.startswith("branch_l6"):
                assert not np.array_equal(p.data, q.data), name
            elif name.startswith("branch"):
                np.testing.assert_array_equal(p.data, q.data, err_msg=name)

    def test_mask_narrows_embedding_at_eval(self, toy_dataset, tmp_path):
        from pyreid.pyramid import BranchMask
        result = train(TrainConfig(seed=2, epochs=1), toy_dataset, tmp_path / "m2")
        model, _ = rebuild_model(load_checkpoint(result.checkpoint_path))
        assert model.embedding_dim(BranchMask.from_string("000001")) == \
            model.feature_dim
