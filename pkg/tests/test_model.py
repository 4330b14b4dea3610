import struct

import numpy as np
import pytest

from downscale_lab.losses import l2_loss
from downscale_lab.model import (
    CKPT_MAGIC,
    PAPER_BASE_WIDTH,
    CheckpointFormatError,
    ConfigError,
    UNetConfig,
    ablate_skip,
    build_unet,
    conv_param_count,
    count_instantiated,
    layer_plan,
    load_checkpoint,
    paper_config,
    parameter_count,
    save_checkpoint,
)
from downscale_lab.tensor import ShapeError, Tensor

from conftest import central_difference, rel_err


def test_desk_shape_contract(rng):
    model = build_unet(UNetConfig(), seed=0)
    out = model.forward(Tensor(rng.standard_normal((1, 6, 32, 32))), "eval")
    assert out.shape == (1, 1, 32, 32)


@pytest.mark.parametrize("hw", [(8, 8), (16, 24), (40, 8)])
def test_shape_preserved(rng, hw):
    model = build_unet(UNetConfig(in_channels=3, base_width=4), seed=1)
    out = model.forward(Tensor(rng.standard_normal((2, 3) + hw)), "train")
    assert out.shape == (2, 1) + hw


def test_rejects_bad_input(rng):
    model = build_unet(UNetConfig(base_width=4), 0)
    with pytest.raises(ShapeError):
        model.forward(Tensor(rng.standard_normal((1, 6, 12, 16))))
    with pytest.raises(ShapeError):
        model.forward(Tensor(rng.standard_normal((1, 5, 16, 16))))


def test_same_seed_same_params():
    a, b = build_unet(UNetConfig(base_width=8), 7), build_unet(UNetConfig(base_width=8), 7)
    c = build_unet(UNetConfig(base_width=8), 8)
    sa, sb, sc = a.state(), b.state(), c.state()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert any(not np.array_equal(sa[k], sc[k]) for k in sa)


def test_zero_final_layer_gives_bias(rng):
    model = build_unet(UNetConfig(base_width=4), 0)
    model.params["dec3.conv.weight"].data[...] = 0.0
    model.params["dec3.conv.bias"].data[...] = 0.7
    out = model.forward(Tensor(np.zeros((1, 6, 16, 16))), "eval")
    assert np.all(out.data == 0.7)


def test_eval_is_pure(rng):
    model = build_unet(UNetConfig(base_width=4), 0)
    x = Tensor(rng.standard_normal((2, 6, 16, 16)))
    model.forward(x, "train")  # move running stats away from init
    a = model.forward(x, "eval").data
    b = model.forward(x, "eval").data
    assert np.array_equal(a, b)


def test_final_block_has_no_bn():
    plan = layer_plan(UNetConfig())
    assert plan[-1][0] == "dec3.conv" and plan[-1][4] is False
    assert all(bn for *_, bn in plan[:-1])
    assert [p[3] for p in plan[:6]] == [2, 1, 2, 1, 2, 1]


@pytest.mark.parametrize("n,mode", [(1, "eval"), (2, "train")])
def test_end_to_end_gradient(rng, n, mode):
    # a single 8x8 sample reaches the bottleneck as 1x1, too small for batch statistics
    model = build_unet(UNetConfig(base_width=4), 2)
    for k, buf in model.buffers.items():
        buf.data[...] = rng.uniform(0.5, 1.5, buf.shape) if k.endswith("var") else rng.uniform(-0.2, 0.2, buf.shape)
    x = Tensor(rng.standard_normal((n, 6, 8, 8)))
    y = Tensor(rng.standard_normal((n, 1, 8, 8)))
    params = model.parameters()

    def loss():
        return l2_loss(model.forward(x, mode), y)

    for p in params:
        p.grad = None
    loss().backward()
    errs = []
    for _ in range(60):
        p = params[rng.integers(len(params))]
        j = int(rng.integers(p.size))
        num = central_difference(lambda: loss().item(), p, j)
        errs.append(rel_err(p.grad.reshape(-1)[j], num))
    assert max(errs) < 1e-4


class TestParameterCount:
    def test_single_conv(self):
        assert conv_param_count(1, 1, 1) == 2

    @pytest.mark.parametrize(
        "cfg",
        [UNetConfig(), UNetConfig(in_channels=3, base_width=5), UNetConfig(skip_links={1, 3}, width_multipliers=(1, 3, 2))],
    )
    def test_closed_form_matches_instantiated(self, cfg):
        assert parameter_count(cfg) == count_instantiated(build_unet(cfg, 0))

    def test_paper_preset(self):
        cfg = paper_config()
        assert cfg.base_width == PAPER_BASE_WIDTH
        assert abs(parameter_count(cfg) - 7.5e6) / 7.5e6 <= 0.02
        assert 7.35e6 <= parameter_count(paper_config(3)) <= 7.65e6

    def test_sweep_picks_nearest(self):
        """The preset width is the base width whose count lands closest to 7.5M."""
        counts = {b: parameter_count(UNetConfig(base_width=b)) for b in range(100, 150)}
        best = min(counts, key=lambda b: abs(counts[b] - 7.5e6))
        assert best == PAPER_BASE_WIDTH

    @pytest.mark.parametrize("group", [2, 3])
    def test_skip_ablation_delta(self, group):
        cfg = UNetConfig()
        ablated = ablate_skip(cfg, group)
        delta = parameter_count(cfg) - parameter_count(ablated)
        skip_ch = cfg.in_channels if group == 1 else cfg.widths[group - 2]
        dec_out = dict((n, co) for n, _, co, _, _ in layer_plan(cfg))[f"dec{4 - group}.conv"]
        assert delta == cfg.kernel_size**2 * skip_ch * dec_out
        assert parameter_count(ablated) == count_instantiated(build_unet(ablated, 0))


class TestConfigValidation:
    def test_two_skips_required(self):
        with pytest.raises(ConfigError):
            UNetConfig(skip_links={1, 2, 3})
        with pytest.raises(ConfigError):
            UNetConfig(skip_links={3})
        with pytest.raises(ConfigError):
            UNetConfig(skip_links={0, 2})

    def test_other_invariants(self):
        with pytest.raises(ConfigError):
            UNetConfig(kernel_size=4)
        with pytest.raises(ConfigError):
            UNetConfig(width_multipliers=(1, 2))
        with pytest.raises(ConfigError):
            UNetConfig(skip_links={1, 3}, skip_mode="add")  # 6 input channels cannot be added to 32

    def test_add_mode(self, rng):
        cfg = UNetConfig(in_channels=4, base_width=4, width_multipliers=(1, 1, 1), skip_links={2, 3}, skip_mode="add")
        out = build_unet(cfg, 0).forward(Tensor(rng.standard_normal((1, 4, 16, 16))))
        assert out.shape == (1, 1, 16, 16)

    def test_dict_round_trip(self):
        cfg = UNetConfig(base_width=12, skip_links={1, 3})
        assert UNetConfig.from_dict(cfg.to_dict()) == cfg


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        model = build_unet(UNetConfig(base_width=4), 5)
        x = Tensor(rng.standard_normal((2, 6, 16, 16)))
        model.forward(x, "train")
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, {"theta": np.array(0.3)}, {"note": "x"})
        back, extra, meta = load_checkpoint(path)
        s0, s1 = model.state(), back.state()
        assert s0.keys() == s1.keys()
        assert all(s0[k].tobytes() == s1[k].tobytes() for k in s0)
        assert np.array_equal(model.forward(x, "eval").data, back.forward(x, "eval").data)
        assert float(extra["theta"]) == 0.3 and meta == {"note": "x"}
        save_checkpoint(tmp_path / "again.ckpt", back, {"theta": np.array(0.3)}, {"note": "x"})
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_layout(self, tmp_path):
        model = build_unet(UNetConfig(base_width=2), 0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        assert raw[:8] == CKPT_MAGIC
        version, hlen = struct.unpack_from("<II", raw, 8)
        assert version == 1
        (count,) = struct.unpack_from("<I", raw, 16 + hlen)
        assert count == len(model.state())
        payload = sum(8 * v.size + 2 + len(k.encode()) + 1 + 4 * v.ndim for k, v in model.state().items())
        assert len(raw) == 16 + hlen + 4 + payload

    def test_rejects_corruption(self, tmp_path):
        model = build_unet(UNetConfig(base_width=2), 0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "bad.ckpt")
        (tmp_path / "short.ckpt").write_bytes(raw[:-5])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "short.ckpt")
        (tmp_path / "ver.ckpt").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "ver.ckpt")
