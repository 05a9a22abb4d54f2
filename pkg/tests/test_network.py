import numpy as np
import pytest

from partseg import autodiff as ad
from partseg.autodiff import OperatorGraph, OpNode, Tensor
from partseg.dataset import GeneratorConfig, generate_synthetic
from partseg.errors import ConfigError, DataFormatError, ShapeError
from partseg.network import (
    Adam,
    MultiPathNet,
    TrainConfig,
    gradient_check,
    hash_params,
    load_checkpoint,
    save_checkpoint,
    soft_dice_loss,
    train,
    train_step,
)


def decoder_hashes(net):
    return [hash_params(d.parameters) for d in net.decoders]


def encoder_hash(net):
    return hash_params(net.encoder.parameters)


@pytest.fixture(scope="module")
def scans():
    return generate_synthetic(GeneratorConfig(n_scans=8, image_size=(16, 16), seed=2))


# -- forward -----------------------------------------------------------------

def test_forward_shapes_and_range():
    net = MultiPathNet(3, seed=1)
    x = np.random.default_rng(0).random((2, 16, 12))
    out = net.forward(x)
    assert len(out) == 3
    for o in out:
        assert o.shape == (2, 16, 12)
        assert np.all((o > 0) & (o < 1))
    assert net(x[0])[0].shape == (1, 16, 12)


def test_identical_decoders_identical_outputs():
    net = MultiPathNet(2, seed=4, identical_decoders=True)
    x = np.random.default_rng(1).random((1, 8, 8))
    a, b = net.forward(x)
    np.testing.assert_array_equal(a, b)


def test_zero_encoder_feeds_zero_features():
    net = MultiPathNet(3, seed=0)
    for v in net.encoder.parameters.values():
        v[...] = 0.0
    feats = net.encode(np.random.default_rng(0).random((2, 8, 8)))
    assert all(not np.any(t.value) for t in feats.values())
    outs = net.forward(np.random.default_rng(1).random((2, 8, 8)))
    # every decoder sees the same (zero) input, so each output is its constant sigmoid(bias)
    for o in outs:
        np.testing.assert_allclose(o, 0.5)


def test_decoder_change_leaves_encoding():
    net = MultiPathNet(2, seed=0)
    x = np.random.default_rng(0).random((1, 8, 8))
    before = {k: t.value.copy() for k, t in net.encode(x).items()}
    for d in net.decoders:
        for v in d.parameters.values():
            v += 1.0
    after = net.encode(x)
    for k in before:
        np.testing.assert_array_equal(before[k], after[k].value)


def test_shape_error_names_node():
    g = OperatorGraph([OpNode("concat", ("x", "z"), "y")], {}, inputs=("x", "z"))
    with pytest.raises(ShapeError, match="'y'"):
        g.run({"x": Tensor(np.zeros((1, 1, 4, 4))), "z": Tensor(np.zeros((1, 1, 2, 2)))})
    with pytest.raises(ShapeError):
        MultiPathNet(1).forward(np.zeros((1, 10, 8)))


def test_graph_validation():
    with pytest.raises(ValueError, match="before"):
        OperatorGraph([OpNode("relu", ("q",), "y")], {}).validate()
    with pytest.raises(ValueError, match="reachable"):
        OperatorGraph([OpNode("relu", ("x",), "y")], {"w": np.ones(1)}).validate()
    with pytest.raises(ValueError, match="unknown operator"):
        OperatorGraph([OpNode("maxpool", ("x",), "y")], {}).validate()


def test_backward_populates_every_parameter():
    net = MultiPathNet(2, seed=3)
    x = Tensor(np.random.default_rng(0).random((1, 2, 8, 8)))
    enc = net.encoder.param_tensors()
    feats = net.encoder.run({"x": x}, enc)
    dec = [d.param_tensors() for d in net.decoders]
    outs = [d.run(feats, p)["y"] for d, p in zip(net.decoders, dec)]
    loss = ad.add(*(ad.soft_dice_loss(o, np.ones_like(o.value), batch_axis=1) for o in outs))
    ad.backward(loss)
    for group, arrays in [(enc, net.encoder.parameters)] + list(
            zip(dec, [d.parameters for d in net.decoders])):
        for k, t in group.items():
            assert t.grad is not None and t.grad.shape == arrays[k].shape


# -- loss --------------------------------------------------------------------

def test_soft_dice_examples():
    ref = np.zeros((32, 32))
    ref[4:28, 4:28] = 1
    assert soft_dice_loss(ref, ref) < 0.01
    z = np.zeros((32, 32))
    assert soft_dice_loss(np.full((32, 32), 0.5), z) == 1 - 1 / (512 + 1)
    with pytest.raises(ShapeError):
        soft_dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_soft_dice_gradient_fd():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, (2, 6, 6))
    r = (rng.random((2, 6, 6)) > 0.5).astype(float)
    t = Tensor(p.copy(), requires_grad=True)
    ad.backward(ad.soft_dice_loss(t, r, batch_axis=0))
    for idx in [(0, 0, 0), (1, 3, 2), (0, 5, 5), (1, 1, 4)]:
        num = ad.numeric_gradient(
            lambda: float(ad.soft_dice_loss(Tensor(p), r, batch_axis=0).value), p, idx)
        assert abs(t.grad[idx] - num) / max(abs(num), 1e-12) < 1e-4


# -- gradient checks ---------------------------------------------------------

def _conv(cin, cout, k, rng):
    return rng.standard_normal((cout, cin, k, k)) * 0.5, rng.standard_normal(cout) * 0.1


def op_graph(op, rng):
    w, b = _conv(2, 3, 3, rng)
    params = {"w": w, "b": b}
    nodes = [OpNode("conv2d", ("x",), "c", ("w", "b"), padding=1)]
    if op == "conv_stride2":
        nodes = [OpNode("conv2d", ("x",), "y", ("w", "b"), stride=2, padding=1)]
    elif op == "conv2d":
        nodes[0] = OpNode("conv2d", ("x",), "y", ("w", "b"), padding=1)
    elif op in ("relu", "sigmoid", "upsample2x"):
        nodes.append(OpNode(op, ("c",), "y"))
    elif op in ("concat", "add"):
        w2, b2 = _conv(2, 3, 1, rng)
        params.update({"w2": w2, "b2": b2})
        nodes.append(OpNode("conv2d", ("x",), "c2", ("w2", "b2")))
        nodes.append(OpNode(op, ("c", "c2"), "y"))
    return OperatorGraph(nodes, params)


@pytest.mark.parametrize("op", ["conv2d", "conv_stride2", "relu", "sigmoid", "upsample2x",
                                "concat", "add"])
@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_check_per_operator(op, seed):
    rng = np.random.default_rng(seed)
    g = op_graph(op, rng)
    x = rng.standard_normal((2, 2, 6, 6))
    assert gradient_check(g, x, seed=seed) < 1e-4


def test_gradient_check_single_conv_soft_dice():
    rng = np.random.default_rng(3)
    w, b = _conv(1, 1, 3, rng)
    g = OperatorGraph([OpNode("conv2d", ("x",), "c", ("w", "b"), padding=1),
                       OpNode("sigmoid", ("c",), "y")], {"w": w, "b": b})
    x = rng.random((1, 2, 8, 8))
    ref = (rng.random((1, 2, 8, 8)) > 0.5).astype(float)
    assert gradient_check(g, x, seed=0, ref=ref) < 1e-4


def test_gradient_check_identity_network():
    g = OperatorGraph([OpNode("conv2d", ("x",), "y", ("w",))], {"w": np.ones((1, 1, 1, 1))})
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
    assert gradient_check(g, x, seed=0) < 1e-7


def test_gradient_check_full_net():
    net = MultiPathNet(2, seed=5)
    x = np.random.default_rng(5).random((2, 8, 8))
    ref = (np.random.default_rng(6).random((2, 8, 8)) > 0.5).astype(float)
    assert gradient_check(net, x, seed=5, ref=ref) < 1e-3


def test_gradient_check_rejects_non_finite():
    g = op_graph("relu", np.random.default_rng(0))
    with pytest.raises(ValueError):
        gradient_check(g, np.full((2, 1, 4, 4), np.nan))


# -- training ----------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(adam_betas=(1.0, 0.9))
    with pytest.raises(ConfigError):
        TrainConfig(n_epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(loss="bce")


def test_update_scope_single_step(scans):
    net = MultiPathNet(3, seed=0)
    before = decoder_hashes(net)
    enc = encoder_hash(net)
    train_step(net, 1, scans.images[:2], scans.masks[:2], Adam())
    after = decoder_hashes(net)
    assert after[0] == before[0] and after[2] == before[2]
    assert after[1] != before[1]
    assert encoder_hash(net) != enc


def test_alpha_one_sees_all_data(scans):
    seen = []
    cfg = TrainConfig(n_epochs=2, batch_size=3, seed=0)
    train(MultiPathNet(1), [list(scans)], cfg, callback=lambda e, d, l: seen.append((e, d)))
    assert seen == [(0, 0)] * 3 + [(1, 0)] * 3  # 8 scans in batches of 3, last one short


def test_train_visits_each_decoder_per_epoch(scans):
    seen = []
    parts = [list(scans)[:3], list(scans)[3:5], list(scans)[5:]]
    train(MultiPathNet(3), parts, TrainConfig(n_epochs=4, batch_size=2, seed=9),
          callback=lambda e, d, l: seen.append((e, d)))
    for epoch in range(4):
        decs = [d for e, d in seen if e == epoch]
        assert sorted(set(decs)) == [0, 1, 2]
        assert sorted(decs) == [0, 0, 1, 2, 2]  # ceil(3/2), ceil(2/2), ceil(3/2)


def test_train_is_deterministic(scans):
    parts = [list(scans)[:4], list(scans)[4:]]
    cfg = TrainConfig(n_epochs=2, seed=11)
    a = train(MultiPathNet(2, seed=1), parts, cfg)
    b = train(MultiPathNet(2, seed=1), parts, cfg)
    c = train(MultiPathNet(2, seed=1), parts, TrainConfig(n_epochs=2, seed=12))
    ha = [hash_params(dict(a.named_parameters()))]
    assert ha == [hash_params(dict(b.named_parameters()))]
    assert ha != [hash_params(dict(c.named_parameters()))]


def test_empty_subset_rejected(scans):
    with pytest.raises(ConfigError, match="subset 2"):
        train(MultiPathNet(2), [list(scans), []], TrainConfig(n_epochs=1))
    with pytest.raises(ConfigError):
        train(MultiPathNet(2), [list(scans)], TrainConfig(n_epochs=1))


def test_loss_decreases_on_fixed_data(scans):
    sub = list(scans)[:4]
    for seed in range(5):
        losses = []
        train(MultiPathNet(1, seed=seed), [sub], TrainConfig(n_epochs=50, seed=seed),
              callback=lambda e, d, l: losses.append(l))
        assert losses[-1] < losses[0]


def test_adam_state_per_parameter():
    opt = Adam(lr=0.1)
    a, b = np.zeros(2), np.zeros(3)
    opt.update("a", a, np.ones(2))
    opt.update("a", a, np.ones(2))
    opt.update("b", b, np.ones(3))
    assert opt.state["a"].t == 2 and opt.state["b"].t == 1
    np.testing.assert_allclose(b, -0.1, rtol=1e-6)  # bias-corrected first step is lr*sign


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, scans):
    net = train(MultiPathNet(2, seed=3), [list(scans)[:4], list(scans)[4:]],
                TrainConfig(n_epochs=1))
    save_checkpoint(net, tmp_path / "net.ckpt")
    raw = (tmp_path / "net.ckpt").read_bytes()
    assert raw[:4] == b"PNET"
    back = load_checkpoint(tmp_path / "net.ckpt")
    assert back.alpha == 2
    for (n1, a1), (n2, a2) in zip(net.named_parameters(), back.named_parameters()):
        assert n1 == n2 and a1.tobytes() == a2.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + b"\0" * 60)
    with pytest.raises(DataFormatError):
        load_checkpoint(tmp_path / "bad")
