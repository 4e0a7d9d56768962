import math

import numpy as np
import pytest

from agevlm.data import DataConfig, generate_synthetic
from agevlm.model import Model, ModelConfig
from agevlm.training import (OptimizerConfig, apply_freeze, group_of,
                             load_model, lr_schedule, save_model, stage_config,
                             train_stage, write_log_csv)

TINY = ModelConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=27,
                   cross_attn_indices=(1,), image_size=16, patch_size=4,
                   encoder_dim=4, adapter_hidden=6, mlp_hidden=16,
                   max_seq_len=12)
DATA = DataConfig(image_size=16, patch_size=4, guided_fraction=0.5)


def snapshot(model):
    return {p.name: p.value.data.copy() for p in model.parameters()}


class TestStageSchedule:
    def test_rows(self):
        s1 = stage_config(1)
        assert (s1.vision_encoder, s1.adapter, s1.llm_cross_attn,
                s1.llm_self_attn, s1.use_guidance_loss) == ("frozen", True, True, False, False)
        s2 = stage_config(2)
        assert s2.vision_encoder == "final" and not s2.use_guidance_loss
        s3 = stage_config(3)
        assert s3.vision_encoder == "final" and s3.use_guidance_loss
        s4a = stage_config(4, variant="age-vlm")
        assert s4a.llm_self_attn and s4a.vision_encoder == "full"
        assert not s4a.use_guidance_loss and s4a.answer_only_lm
        s4b = stage_config(4, variant="age-vlm-lm")
        assert s4b.use_guidance_loss

    def test_variant_validation(self):
        with pytest.raises(ValueError):
            stage_config(2, variant="age-vlm")
        with pytest.raises(ValueError):
            stage_config(4)
        with pytest.raises(ValueError):
            stage_config(4, variant="bogus")
        with pytest.raises(ValueError):
            stage_config(5)

    def test_group_of(self):
        assert group_of("encoder.final.w") == "encoder_final"
        assert group_of("encoder.patch.w") == "vision_encoder"
        assert group_of("adapter.fc1.w") == "adapter"
        assert group_of("layers.3.cross_attn.w_q") == "llm_cross_attn"
        assert group_of("layers.3.self_attn.w_q") == "llm_self_attn"
        assert group_of("layers.0.mlp.w1") == "llm_self_attn"
        assert group_of("embed.tok") == "llm_self_attn"
        with pytest.raises(KeyError):
            group_of("mystery.w")

    def test_every_parameter_has_a_group(self):
        model = Model(TINY, seed=0)
        for p in model.parameters():
            group_of(p.name)

    def test_apply_freeze_stage1(self):
        model = Model(TINY, seed=0)
        apply_freeze(model, stage_config(1))
        for p in model.parameters():
            grp = group_of(p.name)
            expected = grp in ("adapter", "llm_cross_attn")
            assert p.trainable == expected, p.name

    def test_apply_freeze_stage2_final_block_only(self):
        model = Model(TINY, seed=0)
        apply_freeze(model, stage_config(2))
        assert any(p.trainable for p in model.parameters()
                   if p.name.startswith("encoder.final."))
        assert not any(p.trainable for p in model.parameters()
                       if group_of(p.name) == "vision_encoder")

    def test_apply_freeze_stage4_all_trainable(self):
        model = Model(TINY, seed=0)
        apply_freeze(model, stage_config(4, variant="age-vlm"))
        assert all(p.trainable for p in model.parameters())


class TestLrSchedule:
    def test_warmup_fraction(self):
        cfg = OptimizerConfig(lr=3e-3, warmup_ratio=0.03)
        # 100 steps: warmup = ceil(3) = 3 steps
        assert lr_schedule(1, 100, cfg) == pytest.approx(3e-3 / 3)
        assert lr_schedule(2, 100, cfg) == pytest.approx(2 * 3e-3 / 3)
        assert lr_schedule(3, 100, cfg) == pytest.approx(3e-3)
        assert lr_schedule(100, 100, cfg) == pytest.approx(3e-3)

    def test_single_step_run(self):
        cfg = OptimizerConfig(lr=1e-2)
        assert lr_schedule(1, 1, cfg) == pytest.approx(1e-2)

    def test_out_of_range(self):
        cfg = OptimizerConfig()
        with pytest.raises(ValueError):
            lr_schedule(0, 10, cfg)
        with pytest.raises(ValueError):
            lr_schedule(11, 10, cfg)

    def test_warmup_ratio_validated(self):
        with pytest.raises(ValueError):
            OptimizerConfig(warmup_ratio=0.0)
        with pytest.raises(ValueError):
            OptimizerConfig(warmup_ratio=1.0)


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_synthetic(123, 12, DATA)


class TestTrainStage:
    def test_frozen_groups_bitwise_unchanged(self, tiny_dataset):
        samples, vocab = tiny_dataset
        model = Model(TINY, seed=1)
        before = snapshot(model)
        opt = OptimizerConfig(lr=1e-3, batch_size=4)
        train_stage(model, stage_config(1), opt, samples, vocab, DATA, seed=5)
        moved = set()
        for p in model.parameters():
            if not np.array_equal(before[p.name], p.value.data):
                moved.add(group_of(p.name))
                assert p.trainable, p.name
            elif group_of(p.name) in ("vision_encoder", "encoder_final",
                                      "llm_self_attn"):
                assert np.array_equal(before[p.name], p.value.data)
        assert "adapter" in moved
        # frozen groups identical down to the last bit
        for p in model.parameters():
            if group_of(p.name) not in ("adapter", "llm_cross_attn"):
                assert p.value.data.tobytes() == before[p.name].tobytes(), p.name

    def test_stage3_guidance_moves_cross_attn(self, tiny_dataset):
        samples, vocab = tiny_dataset
        model = Model(TINY, seed=2)
        before = snapshot(model)
        opt = OptimizerConfig(lr=1e-3, batch_size=4)
        rows = train_stage(model, stage_config(3), opt, samples, vocab, DATA, seed=5)
        assert any(r["guidance_loss"] > 0 for r in rows)
        assert any(not np.array_equal(before[p.name], p.value.data)
                   for p in model.parameters() if ".cross_attn." in p.name)

    def test_training_is_deterministic(self, tiny_dataset):
        samples, vocab = tiny_dataset
        outs = []
        for _ in range(2):
            model = Model(TINY, seed=3)
            opt = OptimizerConfig(lr=1e-3, batch_size=4)
            train_stage(model, stage_config(1), opt, samples, vocab, DATA, seed=9)
            outs.append(snapshot(model))
        for name in outs[0]:
            assert outs[0][name].tobytes() == outs[1][name].tobytes(), name

    def test_loss_decreases(self, tiny_dataset):
        samples, vocab = tiny_dataset
        model = Model(TINY, seed=4)
        opt = OptimizerConfig(lr=1e-2, batch_size=12)
        stage = stage_config(4, variant="age-vlm", epochs=30)
        rows = train_stage(model, stage, opt, samples, vocab, DATA, seed=6)
        assert rows[-1]["lm_loss"] < rows[0]["lm_loss"] * 0.8

    def test_empty_dataset_rejected(self, tiny_dataset):
        _, vocab = tiny_dataset
        model = Model(TINY, seed=0)
        with pytest.raises(ValueError):
            train_stage(model, stage_config(1), OptimizerConfig(), [], vocab, DATA, seed=0)


class TestCheckpointing:
    def test_roundtrip_bitwise(self, tiny_dataset, tmp_path):
        samples, vocab = tiny_dataset
        model = Model(TINY, seed=7)
        opt = OptimizerConfig(lr=1e-3, batch_size=4)
        train_stage(model, stage_config(1), opt, samples, vocab, DATA, seed=1,
                    checkpoint_dir=str(tmp_path / "ck"))
        loaded = load_model(str(tmp_path / "ck"))
        a, b = snapshot(model), snapshot(loaded)
        assert a.keys() == b.keys()
        for name in a:
            assert a[name].tobytes() == b[name].tobytes(), name
        assert loaded.config == model.config

    def test_save_then_load_fresh(self, tmp_path):
        model = Model(TINY, seed=11)
        save_model(str(tmp_path / "m"), model)
        loaded = load_model(str(tmp_path / "m"))
        ids = np.array([1, 5, 2], dtype=np.int64)
        la, _ = model.forward(ids, None)
        lb, _ = loaded.forward(ids, None)
        assert la.data.tobytes() == lb.data.tobytes()


class TestLogCsv:
    def test_header_and_float_roundtrip(self, tmp_path):
        rows = [{"step": 1, "stage": 2, "lm_loss": 1.0 / 3.0, "guidance_loss": 0.0,
                 "total": 1.0 / 3.0, "guided_fraction": 0.5}]
        path = tmp_path / "log.csv"
        write_log_csv(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,stage,lm_loss,guidance_loss,total,guided_fraction"
        cells = lines[1].split(",")
        assert float(cells[2]) == 1.0 / 3.0
