"""3D conditional GAN mapping a base-station coordinate to its channel gain map.

Generator: the coordinate enters as a 3-channel 1x1x1 volume and is
upsampled by ``n = log2(side)`` transposed convolutions (kernel 4, stride 2,
padding 1).  All but the last are followed by batch norm and ReLU; the last
by tanh, matching maps normalized to [-1, 1].

Discriminator: the map is concatenated with the coordinate broadcast over
the volume (4 channels) and reduced by ``n`` convolutions of the same
geometry, batch norm + LeakyReLU after all but the last, sigmoid at the end.

Losses are the least-squares pair::

    L_D = E[(D(C|o) - 1)^2] + E[D(G(o)|o)^2]
    L_G = E[(D(G(o)|o) - 1)^2] + lambda_re * E[mean((G(o) - C)^2)]
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nncore as nn
from .grid import Point3
from .radiosim import Cgm


class TrainingDivergedError(FloatingPointError):
    """Raised when a loss becomes NaN or infinite during training."""


@dataclass(frozen=True)
class Normalizer:
    gain_min_db: float = -250.0
    gain_max_db: float = -70.0
    extents: tuple[float, float, float] = (256.0, 256.0, 128.0)

    def __post_init__(self) -> None:
        if not self.gain_min_db < self.gain_max_db:
            raise ValueError("gain_min_db must be below gain_max_db")
        if len(self.extents) != 3 or min(self.extents) <= 0:
            raise ValueError(f"extents must be three positive lengths, got {self.extents}")
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))

    def to_dict(self) -> dict:
        return {"gain_min_db": self.gain_min_db, "gain_max_db": self.gain_max_db,
                "extents": list(self.extents)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(float(d["gain_min_db"]), float(d["gain_max_db"]), tuple(d["extents"]))


def encode_coordinate(o, norm: Normalizer) -> np.ndarray:
    """Map a point inside the region to a (3, 1, 1, 1) tensor in [-1, 1]."""
    o = np.asarray(o, dtype=np.float64)
    ext = np.asarray(norm.extents)
    if o.shape != (3,) or (o < 0).any() or (o > ext).any():
        raise ValueError(f"coordinate {o.tolist()} outside extents {tuple(norm.extents)}")
    return (2.0 * o / ext - 1.0).astype(nn.DTYPE).reshape(3, 1, 1, 1)


def encode_coordinates(coords: np.ndarray, norm: Normalizer) -> np.ndarray:
    """Batch form of :func:`encode_coordinate`: (n, 3) -> (n, 3, 1, 1, 1)."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    return np.stack([encode_coordinate(c, norm) for c in coords]) if len(coords) else \
        np.zeros((0, 3, 1, 1, 1), dtype=nn.DTYPE)


def encode_cgm(gains_db, norm: Normalizer) -> np.ndarray:
    g = np.asarray(gains_db, dtype=np.float64)
    span = norm.gain_max_db - norm.gain_min_db
    return (2.0 * (g - norm.gain_min_db) / span - 1.0).astype(nn.DTYPE)


def decode_cgm(unit, norm: Normalizer) -> np.ndarray:
    u = np.asarray(unit, dtype=np.float64)
    span = norm.gain_max_db - norm.gain_min_db
    g = (u + 1.0) * 0.5 * span + norm.gain_min_db
    return np.clip(g, norm.gain_min_db, norm.gain_max_db).astype(np.float32)


@dataclass
class Hyper:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_re: float = 100.0
    batch_size: int | None = None
    epochs: int = 200
    seed: int = 0
    width: int = 64
    leaky_slope: float = 0.2
    # fraction of training after which lr decays linearly to zero; None keeps it constant
    decay_start: float | None = None

    def lr_at(self, epoch: int) -> float:
        if self.decay_start is None:
            return self.lr
        start = int(self.decay_start * self.epochs)
        if epoch < start:
            return self.lr
        return self.lr * (self.epochs - epoch) / (self.epochs - start + 1)

    def resolved_batch(self, train_count: int) -> int:
        if self.batch_size is not None:
            return int(self.batch_size)
        return max(1, min(16, math.ceil(train_count / 10)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        return cls(**d)


def channel_plan(side: int, width: int = 64) -> tuple[list[int], list[int]]:
    """Generator and discriminator channel ladders for a cube of ``side`` cells.

    For side 32 and width 64 this is 3-512-256-128-64-1 and 4-64-128-256-512-1.
    """
    blocks = int(round(math.log2(side)))
    if side < 2 or 2 ** blocks != side:
        raise ValueError(f"grid side must be a power of two, got {side}")
    hidden = [width * 2 ** i for i in range(blocks - 1)]
    return [3] + hidden[::-1] + [1], [4] + hidden + [1]


def _build_generator(chs: list[int], rng: np.random.Generator) -> nn.Sequential:
    layers = []
    last = len(chs) - 2
    for i in range(len(chs) - 1):
        layers.append((f"deconv{i}", nn.ConvTranspose3d(chs[i], chs[i + 1], rng=rng)))
        if i < last:
            layers.append((f"bn{i}", nn.BatchNorm3d(chs[i + 1], rng=rng)))
            layers.append((f"relu{i}", nn.ReLU()))
    layers.append(("tanh", nn.Tanh()))
    return nn.Sequential(layers)


def _build_discriminator(chs: list[int], rng: np.random.Generator, slope: float) -> nn.Sequential:
    layers = []
    last = len(chs) - 2
    for i in range(len(chs) - 1):
        layers.append((f"conv{i}", nn.Conv3d(chs[i], chs[i + 1], rng=rng)))
        if i < last:
            layers.append((f"bn{i}", nn.BatchNorm3d(chs[i + 1], rng=rng)))
            layers.append((f"lrelu{i}", nn.LeakyReLU(slope)))
    layers.append(("sigmoid", nn.Sigmoid()))
    return nn.Sequential(layers)


def _layer_shapes(net: nn.Sequential, in_shape) -> list[tuple[str, tuple]]:
    shapes = []
    shape = tuple(in_shape)
    for name, layer in net.layers:
        shape = layer.output_shape(shape)
        if isinstance(layer, (nn.Conv3d, nn.ConvTranspose3d)):
            shapes.append((name, shape))
    return shapes


@dataclass
class GanModel:
    side: int
    normalizer: Normalizer
    hyper: Hyper
    generator: nn.Sequential
    discriminator: nn.Sequential | None
    env_ref: bytes = b"\x00" * 32
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, side: int, normalizer: Normalizer, hyper: Hyper | None = None,
               env_ref: bytes = b"\x00" * 32) -> "GanModel":
        hyper = hyper or Hyper()
        g_ch, d_ch = channel_plan(side, hyper.width)
        seeds = np.random.SeedSequence(hyper.seed).spawn(3)
        gen = _build_generator(g_ch, np.random.default_rng(seeds[0]))
        disc = _build_discriminator(d_ch, np.random.default_rng(seeds[1]), hyper.leaky_slope)
        model = cls(side=side, normalizer=normalizer, hyper=hyper, generator=gen,
                    discriminator=disc, env_ref=env_ref)
        model.check_architecture()
        return model

    def check_architecture(self) -> None:
        """Assert the per-layer output shapes of both networks."""
        side = self.side
        g_ch, d_ch = channel_plan(side, self.hyper.width)
        got = [s for _, s in _layer_shapes(self.generator, (3, 1, 1, 1))]
        want = [(c, 2 ** (i + 1), 2 ** (i + 1), 2 ** (i + 1)) for i, c in enumerate(g_ch[1:])]
        if got != want:
            raise AssertionError(f"generator shapes {got} != {want}")
        if got[-1] != (1, side, side, side):
            raise AssertionError(f"generator output {got[-1]} is not (1, {side}, {side}, {side})")
        if self.discriminator is not None:
            got = [s for _, s in _layer_shapes(self.discriminator, (4, side, side, side))]
            want = [(c, side >> (i + 1), side >> (i + 1), side >> (i + 1))
                    for i, c in enumerate(d_ch[1:])]
            if got != want or got[-1] != (1, 1, 1, 1):
                raise AssertionError(f"discriminator shapes {got} != {want}")

    def param_counts(self) -> dict:
        out = {"generator": self.generator.param_count()}
        if self.discriminator is not None:
            out["discriminator"] = self.discriminator.param_count()
        return out


# ---------------------------------------------------------------------------
# Forward passes and losses


def _condition(maps: np.ndarray, coords: np.ndarray) -> np.ndarray:
    b, _, d, h, w = maps.shape
    cond = np.broadcast_to(coords.reshape(b, 3, 1, 1, 1), (b, 3, d, h, w))
    return np.concatenate([maps, cond], axis=1)


def generator_forward(model: GanModel, coords: np.ndarray, training: bool = False):
    """Generated unit maps for coordinate tensors; accepts (3,1,1,1) or (B,3,1,1,1)."""
    single = coords.ndim == 4
    x = coords[None] if single else coords
    y, _ = model.generator.forward(np.asarray(x, dtype=nn.DTYPE), training)
    return y[0] if single else y


def discriminator_forward(model: GanModel, maps: np.ndarray, coords: np.ndarray,
                          training: bool = False) -> np.ndarray:
    """Scores in (0, 1), one per batch element."""
    if maps.ndim == 4:
        maps, coords = maps[None], coords[None]
    x = _condition(np.asarray(maps, dtype=nn.DTYPE), np.asarray(coords, dtype=nn.DTYPE))
    if x.shape[1] != 4:
        raise ValueError(f"discriminator expects 4 input channels, got {x.shape[1]}")
    y, _ = model.discriminator.forward(x, training)
    return y.reshape(-1)


def d_loss_from_scores(d_real, d_fake) -> float:
    return nn.lsgan_term(d_real, 1.0)[0] + nn.lsgan_term(d_fake, 0.0)[0]


def g_loss_from_scores(d_fake, fake, real, lambda_re: float) -> float:
    return nn.lsgan_term(d_fake, 1.0)[0] + lambda_re * nn.mse(fake, real)[0]


def d_loss(model: GanModel, real: np.ndarray, coords: np.ndarray) -> float:
    """Discriminator objective on a batch of real unit maps (inference mode)."""
    fake = generator_forward(model, coords)
    return d_loss_from_scores(discriminator_forward(model, real, coords),
                              discriminator_forward(model, fake, coords))


def g_loss(model: GanModel, real: np.ndarray, coords: np.ndarray) -> float:
    fake = generator_forward(model, coords)
    return g_loss_from_scores(discriminator_forward(model, fake, coords), fake, real,
                              model.hyper.lambda_re)


# ---------------------------------------------------------------------------
# Training


@dataclass
class EpochStats:
    epoch: int
    d_loss: float
    g_loss: float
    recon: float


def _snapshot(model: GanModel) -> list[np.ndarray]:
    arrays = []
    for net in (model.generator, model.discriminator):
        arrays += [p.copy() for _, p in net.named_params()]
        arrays += [b.copy() for _, b in net.named_buffers()]
    return arrays


def _restore(model: GanModel, arrays: list[np.ndarray]) -> None:
    it = iter(arrays)
    for net in (model.generator, model.discriminator):
        for _, p in net.named_params():
            p[...] = next(it)
        for _, b in net.named_buffers():
            b[...] = next(it)


def train(model: GanModel, coords: np.ndarray, gains_db: np.ndarray,
          hyper: Hyper | None = None, log=None) -> tuple[GanModel, list[EpochStats]]:
    """Adversarial training with a reconstruction term.

    ``coords`` is (M, 3) in meters, ``gains_db`` is (M, side, side, side).
    Each batch takes one discriminator step then one generator step.  The
    returned model carries the weights of the epoch with the lowest mean
    reconstruction loss; the input model is left untouched.
    """
    hyper = hyper or model.hyper
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    m = len(coords)
    if m == 0:
        raise ValueError("training set is empty")
    if gains_db.shape != (m, model.side, model.side, model.side):
        raise ValueError(f"gains shape {gains_db.shape} does not match {m} maps of side {model.side}")
    model = copy.deepcopy(model)
    model.hyper = hyper
    x = encode_coordinates(coords, model.normalizer)
    y = encode_cgm(gains_db, model.normalizer)[:, None]
    batch = hyper.resolved_batch(m)
    G, D = model.generator, model.discriminator
    opt_g = nn.Adam(G.named_params(), hyper.lr, (hyper.beta1, hyper.beta2))
    opt_d = nn.Adam(D.named_params(), hyper.lr, (hyper.beta1, hyper.beta2))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(hyper.seed).spawn(3)[2])

    trace: list[EpochStats] = []
    best = (math.inf, -1, None)
    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(m)
        opt_g.lr = opt_d.lr = hyper.lr_at(epoch)
        sums = np.zeros(3)
        for start in range(0, m, batch):
            idx = order[start:start + batch]
            c, real = x[idx], y[idx]
            n = len(idx)

            fake, g_tape = G.forward(c, training=True)
            D.zero_grad()
            s_real, tape_r = D.forward(_condition(real, c), training=True)
            s_fake, tape_f = D.forward(_condition(fake, c), training=True)
            l_real, grad_real = nn.lsgan_term(s_real, 1.0)
            l_fake, grad_fake = nn.lsgan_term(s_fake, 0.0)
            D.backward(grad_real, tape_r)
            D.backward(grad_fake, tape_f)
            opt_d.step(D.named_params(), D.named_grads())

            s_fake, tape_f = D.forward(_condition(fake, c), training=True)
            l_adv, grad_adv = nn.lsgan_term(s_fake, 1.0)
            d_fake_in = D.backward(grad_adv, tape_f, need_weight_grad=False)[:, :1]
            l_re, grad_re = nn.mse(fake, real)
            G.zero_grad()
            G.backward(d_fake_in + hyper.lambda_re * grad_re, g_tape)
            opt_g.step(G.named_params(), G.named_grads())

            losses = (l_real + l_fake, l_adv + hyper.lambda_re * l_re, l_re)
            if not all(math.isfinite(v) for v in losses):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: d={losses[0]}, g={losses[1]}, re={losses[2]}")
            sums += np.asarray(losses) * n
        stats = EpochStats(epoch, *(float(v) for v in sums / m))
        trace.append(stats)
        if log is not None:
            log(stats)
        if stats.recon < best[0]:
            best = (stats.recon, epoch, _snapshot(model))
    _restore(model, best[2])
    model.meta = dict(model.meta, best_epoch=best[1], best_recon=best[0], train_count=m)
    return model, trace


def train_on_dataset(model: GanModel, ds, hyper: Hyper | None = None, log=None):
    """Train on the dataset's training split."""
    if not ds.train:
        raise ValueError("dataset has an empty training split")
    return train(model, ds.coords(ds.train), ds.stack(ds.train), hyper, log)


def infer(model: GanModel, o) -> Cgm:
    """CGM for a base station at ``o`` from the generator alone."""
    unit = generator_forward(model, encode_coordinate(o, model.normalizer), training=False)
    return Cgm(bs=Point3(*(float(v) for v in o)), gains_db=decode_cgm(unit[0], model.normalizer),
               env_ref=model.env_ref)


def infer_many(model: GanModel, coords, batch: int = 32) -> list[Cgm]:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    out = []
    for start in range(0, len(coords), batch):
        chunk = coords[start:start + batch]
        unit = generator_forward(model, encode_coordinates(chunk, model.normalizer))
        for o, u in zip(chunk, unit):
            out.append(Cgm(bs=Point3(*o), gains_db=decode_cgm(u[0], model.normalizer),
                           env_ref=model.env_ref))
    return out


# ---------------------------------------------------------------------------
# Checkpoints


def _metadata(model: GanModel) -> dict:
    return {
        "format": "cgmgan-checkpoint",
        "side": model.side,
        "normalizer": model.normalizer.to_dict(),
        "hyper": model.hyper.to_dict(),
        "env_ref": model.env_ref.hex(),
        "meta": model.meta,
        "has_discriminator": model.discriminator is not None,
    }


def save_checkpoint(path, model: GanModel, optimizers=()) -> int:
    tensors = [(f"G.{n}", a) for n, a in model.generator.named_params()]
    tensors += [(f"G.{n}", a) for n, a in model.generator.named_buffers()]
    if model.discriminator is not None:
        tensors += [(f"D.{n}", a) for n, a in model.discriminator.named_params()]
        tensors += [(f"D.{n}", a) for n, a in model.discriminator.named_buffers()]
    for prefix, opt in optimizers:
        tensors += [(f"{prefix}.{n}", a) for n, a in opt.state_tensors()]
    meta = json.dumps(_metadata(model), sort_keys=True).encode("utf-8")
    return nn.write_tensors(path, meta, tensors)


def load_checkpoint(path) -> GanModel:
    raw_meta, tensors = nn.read_tensors(path)
    meta = json.loads(raw_meta)
    if meta.get("format") != "cgmgan-checkpoint":
        raise nn.CheckpointError(f"{path}: not a GAN checkpoint")
    model = GanModel.create(int(meta["side"]), Normalizer.from_dict(meta["normalizer"]),
                            Hyper.from_dict(meta["hyper"]), bytes.fromhex(meta["env_ref"]))
    model.meta = meta.get("meta", {})
    nets = [("G", model.generator)]
    if meta.get("has_discriminator", True):
        nets.append(("D", model.discriminator))
    else:
        model.discriminator = None
    for prefix, net in nets:
        for name, arr in net.named_params() + net.named_buffers():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise nn.CheckpointError(f"{path}: missing tensor {key}")
            if tensors[key].shape != arr.shape:
                raise nn.CheckpointError(f"{path}: tensor {key} has shape {tensors[key].shape}, "
                                         f"expected {arr.shape}")
            arr[...] = tensors[key]
    return model
