"""Multi-path encoder/decoder network and its per-subset training routine.

One encoder is shared by ``alpha`` decoders of identical architecture; the
i-th segmentation variant of an image is ``decoder_i(encoder(x))``.  Training
follows the per-decoder scheme: every epoch visits the decoders in a fresh
random order, and each decoder only ever sees batches from its own subset of
the training scans while the encoder is updated on every step.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import OperatorGraph, OpNode, Tensor
from .errors import ConfigError, DataFormatError, ShapeError

ENC_CH1, ENC_CH2, DEC_CH = 8, 16, 8


@dataclass
class TrainConfig:
    n_epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "soft_dice"

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.n_epochs < 1:
            raise ConfigError(f"n_epochs must be >= 1, got {self.n_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        b1, b2 = self.adam_betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ConfigError(f"adam_betas must lie in (0, 1), got {self.adam_betas}")
        if self.loss != "soft_dice":
            raise ConfigError(f"unsupported loss {self.loss!r}")


# -- architecture ------------------------------------------------------------

def encoder_nodes() -> list[OpNode]:
    return [
        OpNode("conv2d", ("x",), "e1_pre", ("e1.w", "e1.b"), padding=1),
        OpNode("relu", ("e1_pre",), "skip"),
        OpNode("conv2d", ("skip",), "e2_pre", ("e2.w", "e2.b"), stride=2, padding=1),
        OpNode("relu", ("e2_pre",), "e2"),
        OpNode("conv2d", ("e2",), "e3_pre", ("e3.w", "e3.b"), stride=2, padding=1),
        OpNode("relu", ("e3_pre",), "bottleneck"),
    ]


def decoder_nodes() -> list[OpNode]:
    return [
        OpNode("upsample2x", ("bottleneck",), "u1"),
        OpNode("conv2d", ("u1",), "d1_pre", ("d1.w", "d1.b"), padding=1),
        OpNode("relu", ("d1_pre",), "d1"),
        OpNode("upsample2x", ("d1",), "u2"),
        OpNode("concat", ("u2", "skip"), "cat"),
        OpNode("conv2d", ("cat",), "d2_pre", ("d2.w", "d2.b"), padding=1),
        OpNode("relu", ("d2_pre",), "d2"),
        OpNode("conv2d", ("d2",), "logit", ("out.w", "out.b")),
        OpNode("sigmoid", ("logit",), "y"),
    ]


ENCODER_SHAPES = {
    "e1.w": (ENC_CH1, 1, 3, 3), "e1.b": (ENC_CH1,),
    "e2.w": (ENC_CH2, ENC_CH1, 3, 3), "e2.b": (ENC_CH2,),
    "e3.w": (ENC_CH2, ENC_CH2, 3, 3), "e3.b": (ENC_CH2,),
}
DECODER_SHAPES = {
    "d1.w": (DEC_CH, ENC_CH2, 3, 3), "d1.b": (DEC_CH,),
    "d2.w": (DEC_CH, DEC_CH + ENC_CH1, 3, 3), "d2.b": (DEC_CH,),
    "out.w": (1, DEC_CH, 1, 1), "out.b": (1,),
}


def he_uniform(shapes: dict[str, tuple], rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in shapes.items():
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def architecture_hash() -> str:
    desc = repr((encoder_nodes(), sorted(ENCODER_SHAPES.items()),
                 decoder_nodes(), sorted(DECODER_SHAPES.items())))
    return hashlib.sha256(desc.encode()).hexdigest()


class MultiPathNet:
    """Shared encoder feeding ``alpha`` independently parameterized decoders."""

    def __init__(self, alpha: int, seed: int = 0, identical_decoders: bool = False):
        if alpha < 1:
            raise ConfigError(f"alpha must be >= 1, got {alpha}")
        self.alpha = alpha
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = OperatorGraph(encoder_nodes(), he_uniform(ENCODER_SHAPES, rng),
                                     inputs=("x",), outputs=("skip", "bottleneck"))
        first = he_uniform(DECODER_SHAPES, rng)
        self.decoders = []
        for i in range(alpha):
            params = first if i == 0 else (
                {k: v.copy() for k, v in first.items()} if identical_decoders
                else he_uniform(DECODER_SHAPES, rng))
            self.decoders.append(OperatorGraph(decoder_nodes(), params,
                                               inputs=("skip", "bottleneck"), outputs=("y",)))
        self.encoder.validate()
        for d in self.decoders:
            d.validate()

    def encode(self, x) -> dict[str, Tensor]:
        return self.encoder.run({"x": Tensor(_as_batch(x))})

    def forward(self, x) -> list[np.ndarray]:
        """Return ``alpha`` arrays of shape (B, H, W) with values in (0, 1)."""
        feats = self.encode(x)
        return [d.run(feats)["y"].value[0] for d in self.decoders]

    __call__ = forward

    def named_parameters(self):
        """Yield ``(qualified_name, array)`` in the fixed checkpoint order."""
        for name in sorted(self.encoder.parameters):
            yield f"encoder/{name}", self.encoder.parameters[name]
        for i, d in enumerate(self.decoders):
            for name in sorted(d.parameters):
                yield f"decoder{i}/{name}", d.parameters[name]

    def copy(self) -> "MultiPathNet":
        new = object.__new__(MultiPathNet)
        new.alpha, new.seed = self.alpha, self.seed
        new.encoder = _copy_graph(self.encoder)
        new.decoders = [_copy_graph(d) for d in self.decoders]
        return new


def _copy_graph(g: OperatorGraph) -> OperatorGraph:
    out = OperatorGraph(list(g.nodes), {k: v.copy() for k, v in g.parameters.items()},
                        inputs=g.inputs, outputs=g.outputs)
    out.validate()
    return out


def _as_batch(x) -> np.ndarray:
    """Images shaped (H, W) or (B, H, W) -> network layout (1, B, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"expected images shaped (H, W) or (B, H, W), got {x.shape}")
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ShapeError(f"image height and width must be multiples of 4, got {x.shape[1:]}")
    return x[None]


def forward(net: MultiPathNet, x) -> list[np.ndarray]:
    return net.forward(x)


def soft_dice_loss(pred, ref, eps: float = 1.0) -> float:
    """Plain-array convenience wrapper around :func:`autodiff.soft_dice_loss`."""
    return float(ad.soft_dice_loss(Tensor(np.asarray(pred, dtype=np.float64)), ref, eps).value)


def hash_params(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


# -- optimization ------------------------------------------------------------

@dataclass
class _Moments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class Adam:
    """Adam with independent state (including step count) per parameter array."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    state: dict = field(default_factory=dict)

    def update(self, key, param: np.ndarray, grad: np.ndarray) -> None:
        st = self.state.get(key)
        if st is None:
            st = self.state[key] = _Moments(np.zeros_like(param), np.zeros_like(param))
        b1, b2 = self.betas
        st.t += 1
        st.m *= b1
        st.m += (1 - b1) * grad
        st.v *= b2
        st.v += (1 - b2) * grad * grad
        mhat = st.m / (1 - b1 ** st.t)
        vhat = st.v / (1 - b2 ** st.t)
        param -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train_step(net: MultiPathNet, decoder: int, images: np.ndarray, masks: np.ndarray,
               opt: Adam) -> float:
    """One backprop update of the encoder and decoder ``decoder`` on a batch."""
    x = _as_batch(images)
    y = np.asarray(masks, dtype=np.float64).reshape(x.shape)
    enc_p = net.encoder.param_tensors()
    dec_p = net.decoders[decoder].param_tensors()
    feats = net.encoder.run({"x": Tensor(x)}, enc_p)
    pred = net.decoders[decoder].run(feats, dec_p)["y"]
    loss = ad.soft_dice_loss(pred, y, batch_axis=1)
    ad.backward(loss)
    for name, t in enc_p.items():
        if t.grad is not None:
            opt.update(("encoder", name), net.encoder.parameters[name], t.grad)
    for name, t in dec_p.items():
        if t.grad is not None:
            opt.update(("decoder", decoder, name), net.decoders[decoder].parameters[name], t.grad)
    return float(loss.value)


def _stack(subset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(subset, tuple) and len(subset) == 2 and isinstance(subset[0], np.ndarray):
        return np.asarray(subset[0], np.float64), np.asarray(subset[1], np.float64)
    scans = list(subset)
    return (np.stack([s.image for s in scans]).astype(np.float64),
            np.stack([s.reference_mask for s in scans]).astype(np.float64))


def train(net: MultiPathNet, partition: Sequence, cfg: TrainConfig,
          callback: Callable[[int, int, float], None] | None = None) -> MultiPathNet:
    """Train ``net`` in place on ``partition`` (one scan subset per decoder) and return it.

    Each subset is either a sequence of scans or an ``(images, masks)`` pair
    of arrays.  ``callback(epoch, decoder, loss)`` is called after every step.
    """
    if len(partition) != net.alpha:
        raise ConfigError(f"need {net.alpha} subsets, got {len(partition)}")
    data = [_stack(s) if len(s) else None for s in partition]
    for i, d in enumerate(data):
        if d is None or len(d[0]) == 0:
            raise ConfigError(f"subset {i + 1} is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
    for epoch in range(cfg.n_epochs):
        for i in rng.permutation(net.alpha):
            images, masks = data[i]
            order = rng.permutation(len(images))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                loss = train_step(net, int(i), images[idx], masks[idx], opt)
                if callback is not None:
                    callback(epoch, int(i), loss)
    return net


# -- gradient checking -------------------------------------------------------

def _rel_err(a: float, n: float) -> float:
    scale = max(abs(a), abs(n))
    return 0.0 if scale < 1e-10 else abs(a - n) / scale


def gradient_check(graph, x, seed: int = 0, ref=None, h: float = 1e-4,
                   n_coords: int = 20) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``graph`` is an :class:`OperatorGraph` with one input and one output, or a
    :class:`MultiPathNet` (all decoders, losses summed).  With ``ref`` the
    scalar loss is the soft Dice loss of each output against ``ref``; without
    it the output is projected onto a fixed random tensor.  ``n_coords``
    coordinates are sampled per parameter array (all of them if fewer).

    Coordinates whose +-h perturbation flips any ReLU are resampled: across a
    kink the central difference does not estimate the derivative.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("gradient_check input contains non-finite values")
    if isinstance(graph, MultiPathNet):
        x = _as_batch(x)
        arrays = dict(graph.named_parameters())

        def build(trainable):
            enc_p = graph.encoder.param_tensors(trainable)
            env = graph.encoder.run({"x": Tensor(x)}, enc_p, return_all=True)
            kinks = [env[k].value > 0 for k in graph.encoder.relu_inputs()]
            feats = {k: env[k] for k in graph.encoder.outputs}
            outs, tensors = [], {f"encoder/{k}": v for k, v in enc_p.items()}
            for i, d in enumerate(graph.decoders):
                dp = d.param_tensors(trainable)
                tensors.update({f"decoder{i}/{k}": v for k, v in dp.items()})
                denv = d.run(feats, dp, return_all=True)
                kinks += [denv[k].value > 0 for k in d.relu_inputs()]
                outs.append(denv["y"])
            return outs, tensors, kinks
    else:
        arrays = graph.parameters

        def build(trainable):
            tensors = graph.param_tensors(trainable)
            env = graph.run({graph.inputs[0]: Tensor(x)}, tensors, return_all=True)
            kinks = [env[k].value > 0 for k in graph.relu_inputs()]
            return [env[graph.outputs[0]]], tensors, kinks

    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name} contains non-finite values")

    outs, tensors, base_kinks = build(True)
    proj = [rng.standard_normal(o.value.shape) for o in outs]

    def scalar(outs_):
        total = None
        for o, p in zip(outs_, proj):
            if ref is not None:
                term = ad.soft_dice_loss(o, np.broadcast_to(ref, o.value.shape),
                                         batch_axis=1 if o.value.ndim == 4 else None)
            else:
                term = Tensor(np.asarray(np.sum(o.value * p)), (o,), _proj_back(o, p))
            total = term if total is None else ad.add(total, term)
        return total

    ad.backward(scalar(outs))

    def probe(arr, idx, delta):
        old = arr[idx]
        arr[idx] = old + delta
        try:
            o, _, kinks = build(False)
            return float(scalar(o).value), kinks
        finally:
            arr[idx] = old

    worst = 0.0
    for name, arr in arrays.items():
        grad = tensors[name].grad
        if grad is None:
            grad = np.zeros_like(arr)
        checked = 0
        for k in rng.permutation(arr.size):
            if checked >= n_coords:
                break
            idx = np.unravel_index(k, arr.shape)
            fp, kp = probe(arr, idx, h)
            fm, km = probe(arr, idx, -h)
            if any(not (np.array_equal(a, b) and np.array_equal(a, c))
                   for a, b, c in zip(base_kinks, kp, km)):
                continue
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, _rel_err(float(grad[idx]), num))
            checked += 1
    if not np.isfinite(worst):
        raise ValueError("gradient_check produced non-finite values")
    return worst


def _proj_back(o: Tensor, p: np.ndarray):
    def _back(g):
        ad._accumulate(o, g * p)
    return _back


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"PNET"
CKPT_VERSION = 1


def save_checkpoint(net: MultiPathNet, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HH", CKPT_VERSION, net.alpha))
        fh.write(bytes.fromhex(architecture_hash()))
        fh.write(struct.pack("<q", net.seed))
        items = list(net.named_parameters())
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> MultiPathNet:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise DataFormatError(f"{path} is not a network checkpoint")
    version, alpha = struct.unpack_from("<HH", data, 4)
    if version != CKPT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    arch = data[8:40].hex()
    if arch != architecture_hash():
        raise DataFormatError("checkpoint architecture does not match this network")
    (seed,) = struct.unpack_from("<q", data, 40)
    (count,) = struct.unpack_from("<I", data, 48)
    off = 52
    net = MultiPathNet(alpha, seed)
    params = dict(net.named_parameters())
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(data[off:off + size], dtype="<f8").reshape(shape)
        off += size
        if name not in params or params[name].shape != arr.shape:
            raise DataFormatError(f"unexpected parameter {name} {shape}", record_id=name)
        params[name][...] = arr
    return net
