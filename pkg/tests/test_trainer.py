import numpy as np
import pytest

from sgm.errors import ContractError, DimensionError, TrainingDiverged
from sgm.model import Mode
from sgm.synth import SynthSpec, generate_synthetic
from sgm.trainer import Checkpoint, TrainConfig, Trainer, make_batches, train


def small_cfg(**kw):
    base = dict(batch_size=4, lr=0.005, epochs=3, seed=0, d2=4, dim=6)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(11, 8)


class TestMakeBatches:
    def test_drops_short_batch(self):
        batches = make_batches(10, 4, seed=0, epoch=0)
        assert [len(b) for b in batches] == [4, 4]
        assert len(set(np.concatenate(batches).tolist())) == 8

    def test_same_seed_same_order(self):
        a, b = make_batches(20, 5, 3, 2), make_batches(20, 5, 3, 2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_epochs_differ(self):
        orders = {tuple(np.concatenate(make_batches(20, 5, 3, e)).tolist()) for e in range(10)}
        assert len(orders) == 10

    def test_rejects_tiny_batch(self):
        with pytest.raises(ValueError):
            make_batches(10, 1, 0, 0)


class TestConfig:
    def test_batch_size_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)

    def test_dims_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(dim=0)

    def test_d1_mismatch(self, corpus):
        with pytest.raises(DimensionError):
            small_cfg(d1=corpus.d1 + 1).model_config(corpus)

    def test_corpus_smaller_than_batch(self, corpus):
        with pytest.raises(ContractError):
            Trainer(corpus, small_cfg(batch_size=16))


class TestTraining:
    def test_deterministic(self, corpus):
        a = train(corpus, small_cfg())
        b = train(corpus, small_cfg())
        assert a.history == b.history
        assert a.to_bytes() == b.to_bytes()

    def test_log_records(self, corpus):
        records = []
        Trainer(corpus, small_cfg(), log=records.append).fit(2)
        assert [r["epoch"] for r in records] == [1, 2]
        assert set(records[0]) == {"epoch", "loss", "val_r1_caption", "val_r1_image", "val_r1_sum"}

    def test_small_step_decreases_batch_loss(self, corpus):
        rng = np.random.default_rng(0)
        checked = 0
        for k in range(20):
            t = Trainer(corpus, small_cfg(lr=1e-4, clip_norm=None, seed=k))
            idx = rng.choice(len(corpus), size=4, replace=False)
            before = t.batch_loss(idx).item()
            if before == 0.0:
                continue
            t.step(idx)
            assert t.batch_loss(idx).item() < before
            checked += 1
        assert checked >= 10

    def test_zero_margin_converges_no_slower(self, corpus):
        def first_zero(margin):
            t = Trainer(corpus, small_cfg(margin=margin))
            for e in range(80):
                if t.run_epoch()["loss"] < 1e-3:
                    return e
            return 80
        assert first_zero(0.0) <= first_zero(0.2)

    def test_oom_relationship_parameters_get_no_gradient(self, corpus):
        t = Trainer(corpus, small_cfg(mode=Mode.OOM))
        t.run_epoch()
        rel = t.model.relationship_parameter_names()
        assert rel
        assert all(t.grad_mass[n] == 0.0 for n in rel)
        assert all(t.grad_mass[n] > 0.0 for n in t.grad_mass if n not in rel and not n.startswith("tsg.iso"))

    def test_sgm_relationship_parameters_train(self, corpus):
        t = Trainer(corpus, small_cfg())
        t.run_epoch()
        assert any(t.grad_mass[n] > 0 for n in t.model.relationship_parameter_names())

    def test_divergence_names_tensor(self, corpus):
        t = Trainer(corpus, small_cfg())
        t.params["vsg.W_u"].data[0, 0] = np.nan
        with pytest.raises(TrainingDiverged, match="vsg.W_u"):
            t.run_epoch()


class TestCheckpoint:
    def test_resume_is_bitwise(self, corpus, tmp_path):
        cfg = small_cfg()
        a = Trainer(corpus, cfg)
        a.fit(2)
        a.checkpoint().save(tmp_path / "c.sgmc")
        b = Trainer(corpus, cfg, checkpoint=Checkpoint.load(tmp_path / "c.sgmc"))
        ra, rb = a.run_epoch(), b.run_epoch()
        assert ra == rb
        for name, p in a.params.items():
            assert p.data.tobytes() == b.params[name].data.tobytes()

    def test_round_trip_fields(self, corpus):
        t = Trainer(corpus, small_cfg(mode=Mode.OOM_TREL))
        t.fit(1)
        ck = t.checkpoint()
        again = Checkpoint.from_bytes(ck.to_bytes())
        assert again.config == ck.config and again.model_config == ck.model_config
        assert again.epoch == 1 and again.history == ck.history
        assert again.adam.step == ck.adam.step
        for name, arr in ck.params.items():
            assert again.params[name].tobytes() == arr.tobytes()
            assert again.adam.first_moment[name].tobytes() == ck.adam.first_moment[name].tobytes()
        assert again.to_bytes() == ck.to_bytes()

    def test_header(self, corpus):
        raw = Trainer(corpus, small_cfg()).checkpoint().to_bytes()
        assert raw[:4] == b"SGMC"
        assert int.from_bytes(raw[4:8], "little") == 1

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            Checkpoint.from_bytes(b"XXXX" + bytes(8))

    def test_best_checkpoint_is_returned(self):
        c = generate_synthetic(2, 8, SynthSpec(group_size=1))
        ck = Trainer(c, small_cfg()).fit(30)
        best = max(r["val_r1_sum"] for r in ck.history)
        assert ck.history[-1]["val_r1_sum"] == best
