import dataclasses

import numpy as np
import numpy.testing as npt
import pytest

from caterpillar.blocks import BlockConfig
from caterpillar.errors import BuildError, ConfigError, FormatError
from caterpillar.models import (
    ModelSpec,
    ResnetSpec,
    adapt_small_images,
    build_caterpillar,
    build_model,
    build_resnet18,
    caterpillar_param_formula,
    count_params,
    estimate_flops,
    load_checkpoint,
    local_mixer_param_count,
    parse_model_spec,
    save_checkpoint,
)
from caterpillar.layers import Linear
from caterpillar.spc import SpcConfig
from caterpillar.tensor import Rng


MICRO = ModelSpec(
    variant="custom",
    base_width=8,
    depths=(1, 1, 1, 1),
    patch_size=1,
    input=(16, 16, 3),
    num_classes=5,
    block=BlockConfig(ffn_ratio=2),
)


def rand(shape, seed=0):
    return Rng(seed).normal(int(np.prod(shape))).reshape(shape)


class TestStagePlans:
    def test_preset_t_at_224(self):
        plan = ModelSpec.preset("T").stage_plan()
        assert [(s["h"], s["w"], s["c"]) for s in plan] == [
            (56, 56, 80),
            (28, 28, 160),
            (14, 14, 320),
            (7, 7, 640),
        ]
        assert [s["depth"] for s in plan] == [2, 8, 14, 2]

    def test_preset_mi(self):
        spec = ModelSpec.preset("Mi")
        assert spec.widths == (40, 80, 160, 320)
        assert spec.depths == (2, 6, 10, 2)

    def test_all_preset_tables(self):
        expect = {
            "Mi": (40, (2, 6, 10, 2)),
            "Tx": (60, (2, 8, 14, 2)),
            "T": (80, (2, 8, 14, 2)),
            "S": (96, (2, 10, 24, 2)),
            "B": (112, (2, 10, 24, 2)),
        }
        for name, (width, depths) in expect.items():
            spec = ModelSpec.preset(name)
            assert spec.base_width == width and spec.depths == depths

    def test_small_image_profiles(self):
        t = ModelSpec.preset("T")
        cifar = adapt_small_images(t, "CIFAR")
        assert [(s["h"], s["w"]) for s in cifar.stage_plan()] == [
            (32, 32), (16, 16), (8, 8), (4, 4)
        ]
        fashion = adapt_small_images(t, "FASHION")
        assert [(s["h"], s["w"]) for s in fashion.stage_plan()] == [
            (28, 28), (14, 14), (7, 7), (7, 7)
        ]
        assert fashion.input == (28, 28, 1)
        mini = adapt_small_images(t, "MIN")
        assert [(s["h"], s["w"]) for s in mini.stage_plan()] == [
            (28, 28), (14, 14), (7, 7), (7, 7)
        ]
        assert mini.patch_size == 3

    def test_channel_schedule_override(self):
        t_dag = ModelSpec.preset("T", channel_schedule=(72, 144, 288, 576))
        assert t_dag.widths == (72, 144, 288, 576)
        assert [s["c"] for s in t_dag.stage_plan()] == [72, 144, 288, 576]

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            adapt_small_images(ModelSpec.preset("T"), "IMAGENET")

    def test_patch_mismatch_names_stage(self):
        bad = dataclasses.replace(MICRO, patch_size=3)
        with pytest.raises(BuildError, match="stage 1"):
            bad.stage_plan()

    def test_spc_divisibility_names_stage(self):
        bad = dataclasses.replace(MICRO, base_width=6)  # 6 % 4 != 0
        with pytest.raises(BuildError, match="stage 1"):
            bad.stage_plan()


class TestBuildAndForward:
    def test_micro_forward_shape(self):
        model = build_caterpillar(MICRO, seed=1)
        out = model.forward(rand((3, 16, 16, 3), 1), training=True)
        assert out.shape == (3, 5)
        assert np.all(np.isfinite(out))

    def test_micro_32px_patch1(self):
        spec = ModelSpec(
            variant="custom", base_width=16, depths=(1, 1, 1, 1), patch_size=1,
            input=(32, 32, 3), num_classes=10, block=BlockConfig(ffn_ratio=2),
        )
        model = build_caterpillar(spec)
        out = model.forward(rand((2, 32, 32, 3), 2))
        assert out.shape == (2, 10)

    def test_backward_runs_and_shapes(self):
        model = build_caterpillar(MICRO, seed=2)
        x = rand((2, 16, 16, 3), 3)
        out = model.forward(x, training=True)
        model.zero_grad()
        dx = model.backward(np.ones_like(out))
        assert dx.shape == x.shape
        assert any(np.abs(p.grad).max() > 0 for p in model.parameters())

    def test_stage_features_match_plan(self):
        spec = adapt_small_images(ModelSpec.preset("Mi"), "CIFAR")
        model = build_caterpillar(spec, seed=1)
        feats = model.stage_features(rand((1, 32, 32, 3), 9))
        plan = spec.stage_plan()
        assert [f.shape for f in feats] == [
            (1, st["h"], st["w"], st["c"]) for st in plan
        ]
        out = model.forward(rand((2, 32, 32, 3), 10))
        assert out.shape == (2, spec.num_classes)

    def test_parameter_names_unique_and_structured(self):
        model = build_caterpillar(MICRO, seed=0)
        names = [n for n, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        assert "stage1.block1.spc.fuse.w" in names
        assert "stage2.downsample.w" in names
        assert "head.fc.b" in names


class TestAccounting:
    def test_local_mixer_closed_forms(self):
        d = 13
        assert local_mixer_param_count(d, d, "conv", 3) == 9 * d * d
        assert local_mixer_param_count(d, d, "spc") == 2 * d * d
        assert local_mixer_param_count(d, d, "conv", 3) / local_mixer_param_count(d, d, "spc") == 4.5
        assert local_mixer_param_count(64, 64, "dwconv", 3) == 576
        assert local_mixer_param_count(80, 80, "spc") == 12800

    def test_enumeration_matches_formula_across_specs(self):
        specs = [
            MICRO,
            adapt_small_images(ModelSpec.preset("Mi"), "CIFAR"),
            dataclasses.replace(
                MICRO, block=BlockConfig(local_mixer="dwconv", combine="sum", ffn_ratio=2)
            ),
            dataclasses.replace(
                MICRO,
                block=BlockConfig(combine="concat_reduce", ffn_ratio=4),
            ),
            dataclasses.replace(
                MICRO,
                block=BlockConfig(
                    combine="weighted_sum",
                    ffn_ratio=2,
                    spc=SpcConfig.preset(8, mixing="concat_fuse"),
                ),
            ),
        ]
        for spec in specs:
            total, _ = count_params(build_caterpillar(spec))
            assert total == caterpillar_param_formula(spec), spec

    def test_delta_independent_of_ffn_ratio(self):
        deltas = []
        for ratio in (2, 3, 4):
            spc_spec = dataclasses.replace(
                MICRO, block=dataclasses.replace(MICRO.block, ffn_ratio=ratio)
            )
            dw_spec = dataclasses.replace(
                spc_spec,
                block=dataclasses.replace(spc_spec.block, local_mixer="dwconv"),
            )
            deltas.append(
                caterpillar_param_formula(spc_spec) - caterpillar_param_formula(dw_spec)
            )
        assert deltas[0] == deltas[1] == deltas[2]

    def test_single_projection_macs(self):
        lin = Linear(6, 11, rng=Rng(1))
        assert lin.macs((1, 7, 5, 6)) == 7 * 5 * 6 * 11

    def test_estimate_flops_input_binding(self):
        model = build_caterpillar(MICRO)
        with pytest.raises(Exception):
            estimate_flops(model, (1, 32, 32, 3))

    def test_flops_rows_cover_model(self):
        model = build_caterpillar(MICRO)
        total, rows = estimate_flops(model, (1, 16, 16, 3))
        names = [n for n, _ in rows]
        assert names[0] == "embed" and names[-1] == "head"
        assert total == sum(m for _, m in rows) and total > 0


class TestResnet:
    def test_conv_baseline_params(self):
        total, _ = count_params(build_resnet18(64, "conv3x3", 1000, (224, 224, 3)))
        assert abs(total - 12e6) <= 0.10 * 12e6

    def test_spc_small_image_params(self):
        total, _ = count_params(build_resnet18(64, "spc", 10, (32, 32, 3)))
        assert abs(total - 2.6e6) <= 0.15 * 2.6e6

    def test_spc_nc128_builds_and_runs(self):
        model = build_resnet18(128, "spc", 10, (32, 32, 3))
        out = model.forward(rand((2, 32, 32, 3), 4))
        assert out.shape == (2, 10)

    def test_spc_divisibility_error(self):
        with pytest.raises(BuildError, match="divisible"):
            build_resnet18(6, "spc", 10, (32, 32, 3))

    def test_small_stem_auto(self):
        assert ResnetSpec(input=(32, 32, 3)).use_small_stem
        assert not ResnetSpec(input=(224, 224, 3)).use_small_stem

    def test_backward_runs(self):
        model = build_resnet18(8, "spc", 4, (16, 16, 3), seed=3)
        x = rand((2, 16, 16, 3), 5)
        out = model.forward(x, training=True)
        model.zero_grad()
        dx = model.backward(np.ones_like(out))
        assert dx.shape == x.shape


class TestSerialization:
    def test_spec_text_roundtrip(self):
        for spec in (
            ModelSpec.preset("T"),
            adapt_small_images(ModelSpec.preset("Mi"), "FASHION"),
            dataclasses.replace(
                MICRO,
                block=BlockConfig(
                    local_mixer="dwconv",
                    combine="weighted_sum",
                    ffn_ratio=4,
                    spc=SpcConfig.preset(8, steps=2, padding="reflect", mixing="sum"),
                ),
                channel_schedule=(8, 16, 32, 64),
            ),
            ResnetSpec(n_c=32, local_mixer="spc", num_classes=7, input=(32, 32, 3)),
        ):
            assert parse_model_spec(spec.serialize()) == spec

    def test_rebuild_identical_table(self):
        model = build_caterpillar(MICRO, seed=4)
        rebuilt = build_model(parse_model_spec(MICRO.serialize()), seed=9)
        table = lambda m: [(n, p.value.shape) for n, p in m.named_parameters()]
        assert table(model) == table(rebuilt)

    def test_checkpoint_roundtrip_bit_exact(self, tmp_path):
        model = build_caterpillar(MICRO, seed=5).astype(np.float32)
        # make running stats nontrivial before saving
        model.forward(rand((2, 16, 16, 3), 6).astype(np.float32), training=True)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(str(p1), model)
        loaded = load_checkpoint(str(p1))
        save_checkpoint(str(p2), loaded)
        assert p1.read_bytes() == p2.read_bytes()
        x = rand((2, 16, 16, 3), 7).astype(np.float32)
        npt.assert_array_equal(model.forward(x), loaded.forward(x))

    def test_checkpoint_rejects_garbage(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint\n")
        with pytest.raises(FormatError):
            load_checkpoint(str(bad))

    def test_resnet_checkpoint_roundtrip(self, tmp_path):
        model = build_resnet18(8, "spc", 4, (16, 16, 3), seed=6).astype(np.float32)
        path = tmp_path / "r.ckpt"
        save_checkpoint(str(path), model)
        loaded = load_checkpoint(str(path))
        x = rand((1, 16, 16, 3), 8).astype(np.float32)
        npt.assert_array_equal(model.forward(x), loaded.forward(x))
