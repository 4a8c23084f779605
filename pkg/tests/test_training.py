"""Training loop contracts: scheduling, mixing, determinism, freezing."""
import json

import numpy as np
import pytest

from seq2bold import autograd as ag
from seq2bold.checkpoint import load_checkpoint
from seq2bold.errors import ConfigError, ContractError
from seq2bold.model import ModelConfig, adapt_new_subject
from seq2bold.optim import Adam
from seq2bold.synth import synth_session
from seq2bold.training import (
    NormStats,
    TrainConfig,
    anneal_gamma,
    finetune_subject,
    model_from_checkpoint,
    teacher_mix,
    train,
)

TINY_MODEL = dict(
    parcels=6,
    modalities={"m0": 4, "m1": 3},
    d=16,
    l_enc=1,
    l_dec=1,
    heads=2,
    d_sum=8,
    dropout=0.1,
    max_len=32,
)


def tiny_train_cfg(**overrides):
    base = dict(
        epochs=2,
        seed=11,
        w_in=20,
        w_out=15,
        delay=3,
        stride=3,
        batch_size=16,
        val_fraction=0.25,
        val_stride=5,
        gamma_start=1.0,
        gamma_end=0.5,
        gamma_anneal_epochs=2,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    path = synth_session(
        root, t_len=120, dims=(4, 3), parcels=6, subjects=2, noise_sd=0.1, seed=21
    )
    return path


class TestAnnealGamma:
    def test_epoch_zero_is_start(self):
        assert anneal_gamma(0, (1.0, 0.2, 10)) == 1.0

    def test_midpoint(self):
        assert abs(anneal_gamma(5, (1.0, 0.2, 10)) - 0.6) < 1e-12

    def test_clamped_after_anneal(self):
        for epoch in (10, 11, 50):
            assert anneal_gamma(epoch, (1.0, 0.2, 10)) == 0.2

    def test_monotone_non_increasing(self):
        vals = [anneal_gamma(e, (0.9, 0.1, 7)) for e in range(20)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestTeacherMix:
    def test_gamma_one_always_truth(self):
        rng = np.random.default_rng(0)
        truth = np.ones(4)
        pred = np.zeros(4)
        for _ in range(50):
            assert np.array_equal(teacher_mix(truth, pred, 1.0, rng), truth)

    def test_gamma_zero_always_prediction(self):
        rng = np.random.default_rng(1)
        truth = np.ones(4)
        pred = np.zeros(4)
        for _ in range(50):
            assert np.array_equal(teacher_mix(truth, pred, 0.0, rng), pred)

    def test_whole_vector_selection(self):
        rng = np.random.default_rng(2)
        truth = np.array([1.0, 1.0, 1.0])
        pred = np.array([0.0, 0.0, 0.0])
        for _ in range(100):
            out = teacher_mix(truth, pred, 0.5, rng)
            assert np.array_equal(out, truth) or np.array_equal(out, pred)

    def test_binomial_fraction(self):
        rng = np.random.default_rng(3)
        truth = np.ones(1)
        pred = np.zeros(1)
        picks = sum(
            teacher_mix(truth, pred, 0.5, rng)[0] == 1.0 for _ in range(10_000)
        )
        assert 0.48 <= picks / 10_000 <= 0.52

    def test_gamma_range_checked(self):
        with pytest.raises(ContractError):
            teacher_mix(np.ones(2), np.zeros(2), 1.5, np.random.default_rng(0))


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = ag.parameter(np.array([1.0, 2.0]))
        opt = Adam({"p": p})
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        assert np.array_equal(p.data, before)

    def test_trainable_mask_is_structural(self):
        p = ag.parameter(np.ones(2))
        q = ag.parameter(np.ones(2))
        opt = Adam({"p": p, "q": q}, trainable={"p"})
        p.grad = np.ones(2)
        q.grad = np.ones(2)
        opt.step()
        assert not np.array_equal(p.data, np.ones(2))
        assert np.array_equal(q.data, np.ones(2))

    def test_unknown_trainable_rejected(self):
        p = ag.parameter(np.ones(2))
        with pytest.raises(ConfigError):
            Adam({"p": p}, trainable={"nope"})


class TestConfig:
    def test_gamma_order_enforced(self):
        with pytest.raises(ConfigError):
            tiny_train_cfg(gamma_start=0.2, gamma_end=0.9).validate()

    def test_epochs_floor(self):
        with pytest.raises(ConfigError):
            tiny_train_cfg(epochs=0).validate(min_epochs=1)
        tiny_train_cfg(epochs=0).validate(min_epochs=0)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": 3, "nope": 1})


class TestNormStats:
    def test_train_region_statistics(self, dataset):
        from seq2bold.manifest import load_manifest, load_session

        manifest = load_manifest(dataset)
        sess = load_session(manifest, manifest.sessions[0])
        stats = NormStats.compute([(sess, 90)], ["m0", "m1"])
        ref = sess.features["m0"].data[:90].astype(np.float64)
        assert np.allclose(stats.mean["m0"], ref.mean(axis=0))
        assert np.allclose(stats.sd["m0"], np.maximum(ref.std(axis=0), 1e-6))
        x = stats.apply(sess, ["m0", "m1"])
        assert x.shape == (sess.t_len, 7)
        assert np.allclose(x[:90, :4].mean(axis=0), 0.0, atol=1e-9)

    def test_sd_floor(self):
        from seq2bold.manifest import FeatureSequence, SessionData

        sess = SessionData(
            session_id="s",
            split="train",
            features={"m0": FeatureSequence("m0", np.ones((10, 2)), 1.5)},
            fmri={},
            summary=None,
            t_len=10,
            tr_seconds=1.5,
        )
        stats = NormStats.compute([(sess, 10)], ["m0"])
        assert (stats.sd["m0"] == 1e-6).all()


class TestTrainLoop:
    def test_deterministic_metrics(self, dataset, tmp_path):
        cfg = tiny_train_cfg()
        mc = ModelConfig(**TINY_MODEL)
        r1 = train(dataset, mc, cfg, tmp_path / "run1")
        r2 = train(dataset, mc, cfg, tmp_path / "run2")
        assert r1.metrics_path.read_bytes() == r2.metrics_path.read_bytes()
        assert (tmp_path / "run1/last.ckpt").read_bytes() == (
            tmp_path / "run2/last.ckpt"
        ).read_bytes()

    def test_metrics_log_schema(self, dataset, tmp_path):
        cfg = tiny_train_cfg()
        mc = ModelConfig(**TINY_MODEL)
        res = train(dataset, mc, cfg, tmp_path / "run")
        lines = [json.loads(l) for l in res.metrics_path.read_text().splitlines()]
        train_recs = [l for l in lines if l["split"] == "train"]
        val_recs = [l for l in lines if l["split"] == "val"]
        assert len(train_recs) == cfg.epochs and len(val_recs) == cfg.epochs
        for rec in train_recs:
            assert {"epoch", "loss", "mse", "corr", "gamma", "windows"} <= set(rec)
        # gamma logged per epoch follows the schedule
        assert train_recs[0]["gamma"] == 1.0
        assert train_recs[1]["gamma"] == 0.75

    def test_constant_gamma_run_completes(self, dataset, tmp_path):
        cfg = tiny_train_cfg(gamma_start=1.0, gamma_end=1.0)
        mc = ModelConfig(**TINY_MODEL)
        res = train(dataset, mc, cfg, tmp_path / "run")
        recs = [json.loads(l) for l in res.metrics_path.read_text().splitlines()]
        assert all(r["gamma"] == 1.0 for r in recs if r["split"] == "train")

    def test_empty_training_set_rejected(self, dataset, tmp_path):
        cfg = tiny_train_cfg(w_in=500, w_out=400)
        with pytest.raises(ContractError):
            train(dataset, ModelConfig(**TINY_MODEL), cfg, tmp_path / "run")

    def test_missing_subject_rejected(self, dataset, tmp_path):
        cfg = tiny_train_cfg(subjects=["ghost"])
        with pytest.raises(ConfigError):
            train(dataset, ModelConfig(**TINY_MODEL), cfg, tmp_path / "run")

    def test_checkpoint_contains_norm_stats_and_moments(self, dataset, tmp_path):
        cfg = tiny_train_cfg(epochs=1)
        res = train(dataset, ModelConfig(**TINY_MODEL), cfg, tmp_path / "run")
        ckpt = load_checkpoint(res.last_checkpoint)
        names = set(ckpt.tensors)
        assert "norm.mean.m0" in names and "norm.sd.m1" in names
        assert any(n.startswith("adam.m.") for n in names)
        assert ckpt.meta["subjects"] == ["sub01", "sub02"]

    def test_nonfinite_loss_aborts_with_diagnostic(self, dataset, tmp_path):
        # An absurd learning rate drives activations past float range within
        # a few steps; the loop must abort rather than keep training.
        from seq2bold.errors import TrainingAbortError

        cfg = tiny_train_cfg(epochs=3, lr=1e150)
        with np.errstate(all="ignore"):
            with pytest.raises(TrainingAbortError, match="non-finite loss"):
                train(dataset, ModelConfig(**TINY_MODEL), cfg, tmp_path / "run")


@pytest.fixture(scope="module")
def base_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("ft")
    data = synth_session(
        root / "data", t_len=120, dims=(4, 3), parcels=6, subjects=3, noise_sd=0.1, seed=22
    )
    cfg = tiny_train_cfg(epochs=2, subjects=["sub01", "sub02"])
    res = train(data, ModelConfig(**TINY_MODEL), cfg, root / "run")
    return data, res


class TestFinetune:

    def test_shared_tensors_bit_identical(self, base_run, tmp_path):
        data, res = base_run
        model, stats, _ = model_from_checkpoint(res.last_checkpoint)
        rng = np.random.default_rng(5)
        trainable = adapt_new_subject(model, "sub03", rng)
        from seq2bold.checkpoint import Checkpoint, save_checkpoint

        tensors = {n: p.data for n, p in model.params().items()}
        tensors.update(stats.tensors())
        adapted_path = tmp_path / "adapted.ckpt"
        save_checkpoint(
            adapted_path,
            Checkpoint(
                config={"model": model.cfg.to_dict(), "train": tiny_train_cfg().to_dict()},
                tensors=tensors,
                meta={"subjects": sorted(model.subjects)},
                trainable=sorted(trainable),
            ),
        )
        cfg = tiny_train_cfg(epochs=2)
        out = finetune_subject(adapted_path, data, "sub03", cfg, tmp_path / "ft")
        before = load_checkpoint(adapted_path)
        after = load_checkpoint(out.last_checkpoint)
        moved = 0
        for name in before.tensors:
            if name.startswith(("adam.", "norm.")):
                continue
            same = np.array_equal(before.tensors[name], after.tensors[name])
            if "subject.sub03" in name:
                moved += not same
            else:
                assert same, f"shared tensor {name} changed during fine-tuning"
        assert moved == 3  # e, w_out, b_out all updated

    def test_zero_epochs_leaves_parameters_unchanged(self, base_run, tmp_path):
        data, res = base_run
        model, stats, _ = model_from_checkpoint(res.last_checkpoint)
        rng = np.random.default_rng(6)
        trainable = adapt_new_subject(model, "sub03", rng)
        from seq2bold.checkpoint import Checkpoint, save_checkpoint

        tensors = {n: p.data for n, p in model.params().items()}
        tensors.update(stats.tensors())
        adapted_path = tmp_path / "adapted.ckpt"
        save_checkpoint(
            adapted_path,
            Checkpoint(
                config={"model": model.cfg.to_dict(), "train": tiny_train_cfg().to_dict()},
                tensors=tensors,
                meta={"subjects": sorted(model.subjects)},
                trainable=sorted(trainable),
            ),
        )
        cfg = tiny_train_cfg(epochs=0)
        out = finetune_subject(adapted_path, data, "sub03", cfg, tmp_path / "ft0")
        before = load_checkpoint(adapted_path)
        after = load_checkpoint(out.last_checkpoint)
        for name, arr in before.tensors.items():
            if name.startswith("adam."):
                continue
            assert np.array_equal(arr, after.tensors[name])

    def test_unregistered_subject_rejected(self, base_run, tmp_path):
        data, res = base_run
        with pytest.raises(ContractError):
            finetune_subject(
                res.last_checkpoint, data, "sub03", tiny_train_cfg(), tmp_path / "x"
            )


class TestFinetuneLearnability:
    @pytest.mark.slow
    def test_third_subject_reaches_04(self, tmp_path):
        """A third subject drawn from the same readout family fine-tunes to
        >= 0.4 held-out correlation with only its head trainable."""
        from seq2bold.checkpoint import Checkpoint, save_checkpoint

        data = synth_session(
            tmp_path / "data", t_len=500, dims=(6, 4), parcels=10, subjects=3,
            noise_sd=0.05, seed=41, subject_scale=0.15,
        )
        mc = ModelConfig(
            parcels=10, modalities={"m0": 6, "m1": 4}, d=48, l_enc=2, l_dec=2,
            heads=4, d_sum=8, dropout=0.1, max_len=48,
        )
        base_cfg = TrainConfig(
            epochs=22, seed=7, w_in=40, w_out=35, delay=5, stride=2, batch_size=32,
            val_fraction=0.2, val_stride=5, gamma_end=0.5, gamma_anneal_epochs=8,
            subjects=["sub01", "sub02"], early_stop_corr=0.5,
        )
        res = train(data, mc, base_cfg, tmp_path / "base")
        model, stats, _ = model_from_checkpoint(res.best_checkpoint or res.last_checkpoint)
        trainable = adapt_new_subject(model, "sub03", np.random.default_rng(3))
        tensors = {n: p.data for n, p in model.params().items()}
        tensors.update(stats.tensors())
        ft_cfg = TrainConfig(
            epochs=15, seed=9, w_in=40, w_out=35, delay=5, stride=2, batch_size=32,
            val_fraction=0.2, val_stride=5, gamma_end=0.5, gamma_anneal_epochs=8,
            early_stop_corr=0.45,
        )
        adapted = tmp_path / "adapted.ckpt"
        save_checkpoint(
            adapted,
            Checkpoint(
                config={"model": model.cfg.to_dict(), "train": ft_cfg.to_dict()},
                tensors=tensors,
                meta={"subjects": sorted(model.subjects)},
                trainable=sorted(trainable),
            ),
        )
        out = finetune_subject(adapted, data, "sub03", ft_cfg, tmp_path / "ft")
        assert out.best_val_corr is not None and out.best_val_corr >= 0.4
