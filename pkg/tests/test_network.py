"""Network construction, shapes, gradients, inference, checkpoints."""

import numpy as np
import pytest

from neuvol.autograd import Tape, backward, sgd_step
from neuvol.losses import softmax_channels, total_loss_nodes
from neuvol.network import (
    NetConfig,
    SegNetwork,
    load_checkpoint,
    save_checkpoint,
)
from neuvol.volume import LabelVolume, Volume4

DESK = dict(num_classes=3, base_channels=8, channel_cap=64)
TINY = dict(num_classes=3, base_channels=4, channel_cap=16)

ANISO = ((1, 2, 2),) + ((2, 2, 2),) * 4


def tiny_net(seed=0, **over):
    cfg = NetConfig(**{**TINY, **over})
    return SegNetwork(cfg, seed=seed)


# --------------------------------------------------------------- config

def test_config_channel_schedule():
    cfg = NetConfig(**DESK)
    assert cfg.channels == (8, 16, 32, 64, 64, 64)
    cfg = NetConfig(num_classes=2)
    assert cfg.channels == (32, 64, 128, 256, 320, 320)


def test_config_kernels_follow_strides():
    cfg = NetConfig(num_classes=2, stride_schedule=ANISO)
    assert cfg.kernels == ((1, 3, 3), (1, 3, 3)) + ((3, 3, 3),) * 4
    cfg = NetConfig(num_classes=2)
    assert cfg.kernels == ((3, 3, 3),) * 6


def test_config_wavelet_channels_floor():
    cfg = NetConfig(**DESK)
    assert [cfg.wavelet_channels(t) for t in range(1, 6)] == [8, 8, 16, 16, 16]


def test_config_total_stride():
    assert NetConfig(num_classes=2).total_stride == (32, 32, 32)
    assert NetConfig(num_classes=2, stride_schedule=ANISO).total_stride == (16, 32, 32)


def test_config_rejects_bad_inputs():
    with pytest.raises(ValueError):
        NetConfig(num_classes=2, num_layers=5)
    with pytest.raises(ValueError):
        NetConfig(num_classes=1)
    with pytest.raises(ValueError):
        NetConfig(num_classes=2, stride_schedule=((2, 2, 2),) * 4)
    with pytest.raises(ValueError):
        NetConfig(num_classes=2, stride_schedule=((1, 1, 1),) + ((2, 2, 2),) * 4)
    with pytest.raises(ValueError):
        NetConfig(num_classes=2, stride_schedule=((3, 2, 2),) + ((2, 2, 2),) * 4)
    with pytest.raises(ValueError):
        NetConfig(num_classes=2, channel_cap=8, base_channels=16)


# --------------------------------------------------------------- shapes

def test_head_shapes_isotropic():
    net = tiny_net()
    vol = Volume4(np.random.default_rng(0).standard_normal((32, 32, 32, 1)).astype(np.float32))
    heads = net.forward(vol)
    assert [h.shape for h in heads] == [
        (32, 32, 32, 3), (16, 16, 16, 3), (8, 8, 8, 3), (4, 4, 4, 3), (2, 2, 2, 3)]
    assert heads[0].spacing == (1.0, 1.0, 1.0)
    assert heads[1].spacing == (2.0, 2.0, 2.0)
    assert heads[4].spacing == (16.0, 16.0, 16.0)


def test_head_shapes_anisotropic_first_stage():
    net = tiny_net(stride_schedule=ANISO)
    vol = Volume4(np.zeros((16, 32, 32, 1), np.float32), (4.0, 1.0, 1.0))
    heads = net.forward(vol)
    assert heads[0].shape == (16, 32, 32, 3)
    assert heads[1].shape == (16, 16, 16, 3)   # axis 0 untouched by stage 1
    assert heads[4].shape == (2, 2, 2, 3)
    assert heads[1].spacing == (4.0, 2.0, 2.0)


def test_forward_rejects_indivisible_shape():
    net = tiny_net()
    with pytest.raises(ValueError, match="divisible"):
        net.forward(Volume4(np.zeros((30, 32, 32, 1), np.float32)))


def test_forward_rejects_wrong_channels():
    net = tiny_net()
    with pytest.raises(ValueError, match="channels"):
        net.forward(Volume4(np.zeros((32, 32, 32, 2), np.float32)))


def test_subpixel_weights_follow_block_contract():
    net = tiny_net()
    ch = net.config.channels
    up = net.upsamples[0]  # deepest: ch[5] -> ch[4], factors (2, 2, 2)
    assert up.w1.value.shape == (2 * ch[5], ch[5], 5, 5, 5)
    assert up.w2.value.shape == (8 * ch[4], 2 * ch[5], 3, 3, 3)
    assert np.all(up.b1.value == 0) and np.all(up.b2.value == 0)


def test_parameter_count_matches_hand_formula():
    cfg = NetConfig(**DESK)
    ch, ks = cfg.channels, cfg.kernels

    def unit(in_c, out_c, k):
        return out_c * in_c * k[0] * k[1] * k[2] + 3 * out_c  # bias + gamma + beta

    expect = unit(1, ch[0], ks[0]) + unit(ch[0], ch[0], ks[0])
    for t in range(1, 6):
        wbc = cfg.wavelet_channels(t)
        iw_ch = 2 ** sum(1 for s in cfg.stride_schedule[t - 1] if s == 2)
        expect += unit(ch[t - 1], ch[t], ks[t])
        expect += unit(ch[t] + wbc, ch[t], ks[t])
        expect += unit(iw_ch, wbc, ks[t])
    for t in range(5, 0, -1):
        r = int(np.prod(cfg.stride_schedule[t - 1]))
        expect += 2 * ch[t] * ch[t] * 125 + 2 * ch[t]
        expect += r * ch[t - 1] * 2 * ch[t] * 27 + r * ch[t - 1]
        expect += unit(2 * ch[t - 1], ch[t - 1], ks[t - 1])
        expect += unit(ch[t - 1], ch[t - 1], ks[t - 1])
        expect += 3 * ch[t - 1] + 3  # head weights + bias
    assert SegNetwork(cfg).num_parameters() == expect


# ------------------------------------------------------------- behavior

def test_same_seed_same_parameters():
    a, b = tiny_net(seed=3), tiny_net(seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name
        assert np.array_equal(pa.value, pb.value)
    c = tiny_net(seed=4)
    assert any(not np.array_equal(pa.value, pc.value)
               for pa, pc in zip(a.parameters(), c.parameters()))


def test_zeroed_parameters_give_zero_logits():
    net = tiny_net()
    for p in net.parameters():
        p.value[...] = 0.0
    vol = Volume4(np.random.default_rng(1).standard_normal((32, 32, 32, 1)).astype(np.float32))
    for head in net.forward(vol):
        assert np.all(head.data == 0.0)


def test_ablation_same_parameters_different_signal():
    rng = np.random.default_rng(2)
    vol = Volume4(rng.standard_normal((32, 32, 32, 1)).astype(np.float32))
    full = tiny_net(seed=5)
    ablated = tiny_net(seed=5, use_wavelet=False)
    assert [p.name for p in full.parameters()] == [p.name for p in ablated.parameters()]
    for pf, pa in zip(full.parameters(), ablated.parameters()):
        assert np.array_equal(pf.value, pa.value)
    hf = full.forward(vol)
    ha = ablated.forward(vol)
    assert [h.shape for h in hf] == [h.shape for h in ha]
    assert all(np.all(np.isfinite(h.data)) for h in ha)
    assert not np.allclose(hf[0].data, ha[0].data)


def test_full_forward_backward_touches_all_live_parameters():
    net = tiny_net(seed=6)
    rng = np.random.default_rng(6)
    vol = Volume4(rng.standard_normal((32, 32, 32, 1)).astype(np.float32))
    lab = LabelVolume(rng.integers(0, 3, (32, 32, 32)).astype(np.int32))
    tape = Tape()
    loss = total_loss_nodes(tape, net.forward_nodes(tape, vol), lab, 3)
    assert np.isfinite(loss.value)
    backward(tape, loss)
    for p in net.parameters():
        g = tape.grad_of(p)
        assert g is not None, p.name
        assert np.all(np.isfinite(g)), p.name
        assert g.shape == p.value.shape, p.name


def test_ablated_wavelet_parameters_get_no_gradient():
    net = tiny_net(seed=6, use_wavelet=False)
    rng = np.random.default_rng(6)
    vol = Volume4(rng.standard_normal((32, 32, 32, 1)).astype(np.float32))
    lab = LabelVolume(rng.integers(0, 3, (32, 32, 32)).astype(np.int32))
    tape = Tape()
    loss = total_loss_nodes(tape, net.forward_nodes(tape, vol), lab, 3)
    backward(tape, loss)
    for p in net.parameters():
        g = tape.grad_of(p)
        if ".wavelet." in p.name:
            assert g is None, p.name
        else:
            assert g is not None, p.name


def test_training_step_reduces_loss_on_fixed_batch():
    net = tiny_net(seed=7)
    rng = np.random.default_rng(7)
    vol = Volume4(rng.standard_normal((32, 32, 32, 1)).astype(np.float32))
    lab = LabelVolume((rng.standard_normal((32, 32, 32)) > 0.5).astype(np.int32),
                      num_classes=3)

    def step():
        tape = Tape()
        loss = total_loss_nodes(tape, net.forward_nodes(tape, vol), lab, 3)
        backward(tape, loss)
        grads = {p.name: tape.grad_of(p) for p in net.parameters()
                 if tape.grad_of(p) is not None}
        sgd_step(net.parameters(), grads, lr=0.01)
        return float(loss.value)

    first = step()
    for _ in range(4):
        last = step()
    assert last < first


# ------------------------------------------------------------ inference

def test_infer_matches_whole_volume_argmax_when_patch_covers():
    net = tiny_net(seed=8)
    rng = np.random.default_rng(8)
    vol = Volume4(rng.standard_normal((32, 32, 32, 1)).astype(np.float32))
    pred = net.infer(vol, (32, 32, 32))
    head = net.forward(vol)[0]
    want = np.argmax(softmax_channels(head.data.astype(np.float64)), axis=3)
    assert np.array_equal(pred.data, want)
    assert pred.spacing == vol.spacing
    assert pred.num_classes == 3


def test_infer_handles_smaller_and_indivisible_volumes():
    net = tiny_net(seed=9)
    rng = np.random.default_rng(9)
    for shape in ((20, 32, 32), (33, 40, 32), (32, 32, 32)):
        vol = Volume4(rng.standard_normal(shape + (1,)).astype(np.float32))
        pred = net.infer(vol, (32, 32, 32))
        assert pred.data.shape == shape
        assert pred.data.min() >= 0 and pred.data.max() < 3


def test_infer_rejects_indivisible_patch():
    net = tiny_net()
    vol = Volume4(np.zeros((32, 32, 32, 1), np.float32))
    with pytest.raises(ValueError, match="divisible"):
        net.infer(vol, (30, 32, 32))


# ----------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_bitwise(tmp_path):
    net = tiny_net(seed=10)
    rng = np.random.default_rng(10)
    vol = Volume4(rng.standard_normal((32, 32, 32, 1)).astype(np.float32))
    lab = LabelVolume(rng.integers(0, 3, (32, 32, 32)).astype(np.int32))
    for _ in range(2):  # creates momentum buffers
        tape = Tape()
        loss = total_loss_nodes(tape, net.forward_nodes(tape, vol), lab, 3)
        backward(tape, loss)
        grads = {p.name: tape.grad_of(p) for p in net.parameters()
                 if tape.grad_of(p) is not None}
        sgd_step(net.parameters(), grads, lr=0.01)

    ckpt = str(tmp_path / "model.nvckpt")
    save_checkpoint(ckpt, net, {"epoch": "2", "best": "0.5"})

    other = tiny_net(seed=99)
    extra = load_checkpoint(ckpt, other)
    assert extra == {"epoch": "2", "best": "0.5"}
    for pa, pb in zip(net.parameters(), other.parameters()):
        assert np.array_equal(pa.value, pb.value), pa.name
        if pa.velocity is None:
            assert pb.velocity is None
        else:
            assert np.array_equal(pa.velocity, pb.velocity), pa.name


def test_checkpoint_rejects_mismatched_network(tmp_path):
    net = tiny_net(seed=11)
    ckpt = str(tmp_path / "model.nvckpt")
    save_checkpoint(ckpt, net, {})
    bigger = SegNetwork(NetConfig(num_classes=3, base_channels=8, channel_cap=16))
    with pytest.raises(ValueError):
        load_checkpoint(ckpt, bigger)


def test_checkpoint_rejects_multiline_extra(tmp_path):
    net = tiny_net(seed=12)
    with pytest.raises(ValueError):
        save_checkpoint(str(tmp_path / "m.nvckpt"), net, {"note": "a\nb"})
