"""Gated-CNN CycleGAN over mel-cepstral sequences.

Generators are 1-D fully convolutional (downsample → gated residual blocks
→ pixel-shuffle upsample); discriminators are 2-D gated convolution stacks
over the (coefficient, time) plane ending in a mean of sigmoid patches.

Generator-side sign convention: the full objective is minimized over the
generators.  The ``E[log D(y)]`` half of each adversarial term does not
depend on the generators, so the generator step only evaluates
``E[log(1 - D(G(x)))]``; the discriminator step maximizes the whole
adversarial term (minimizes its negation).
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Conv1d, Conv2d, InstanceNorm, Module, Parameter, Tensor
from .errors import DataError, EmptyDataset, ShapeMismatch
from .features import N_MCEP, F0Stats, VoiceFeatures, f0_convert

PROB_EPS = 1e-7
MIN_FRAMES = 32


class SequenceTooShort(DataError):
    pass


# ----------------------------------------------------------------- config

@dataclass
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    id_decay_epoch: int | None = None  # None: identity term always active

    def __post_init__(self):
        if self.lambda_cyc < 0 or self.lambda_id < 0:
            raise ValueError("loss weights must be non-negative")

    def lambda_id_at(self, epoch: int | None) -> float:
        if epoch is not None and self.id_decay_epoch is not None and epoch > self.id_decay_epoch:
            return 0.0
        return self.lambda_id


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    segment_frames: int = 128
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    seed: int = 0
    adversarial: str = "log"  # "log" or "least_squares"
    steps_per_epoch: int | None = None  # default: ceil(len(X) / batch_size)

    def __post_init__(self):
        if self.segment_frames < MIN_FRAMES or self.segment_frames % 4:
            raise ValueError("segment_frames must be >= 32 and divisible by 4")
        if self.adversarial not in ("log", "least_squares"):
            raise ValueError(f"unknown adversarial loss '{self.adversarial}'")


@dataclass
class GeneratorSpec:
    channels: int = 24
    base: int = 16
    residual_blocks: int = 3
    kernel_in: int = 15
    kernel_down: int = 5
    kernel_res: int = 3


@dataclass
class DiscriminatorSpec:
    base: int = 8


# ----------------------------------------------------------------- layers

class GatedConv1d(Module):
    """conv → (instance norm) on a linear and a gate path, combined by a GLU."""

    def __init__(self, cin, cout, kernel, stride=1, norm=True, rng=None):
        self.lin = Conv1d(cin, cout, kernel, stride, rng=rng)
        self.gate = Conv1d(cin, cout, kernel, stride, rng=rng)
        self.norm = norm
        if norm:
            self.lin_norm = InstanceNorm(cout)
            self.gate_norm = InstanceNorm(cout)

    def forward(self, x):
        if not self.norm:
            return ad.glu_layer(x, self.lin.weight, self.lin.bias, self.gate.weight, self.gate.bias,
                                self.lin.stride, self.lin.padding)
        return ad.glu(self.lin_norm(self.lin(x)), self.gate_norm(self.gate(x)))


class GatedResidual(Module):
    def __init__(self, ch, kernel, rng=None):
        self.inner = GatedConv1d(ch, 2 * ch, kernel, rng=rng)
        self.out = Conv1d(2 * ch, ch, kernel, rng=rng)
        self.out_norm = InstanceNorm(ch)

    def forward(self, x):
        return x + self.out_norm(self.out(self.inner(x)))


class GatedUpsample(Module):
    """Convolution to r×channels, pixel shuffle by 2, instance norm, GLU."""

    def __init__(self, cin, cout, kernel, rng=None):
        self.lin = Conv1d(cin, 2 * cout, kernel, rng=rng)
        self.gate = Conv1d(cin, 2 * cout, kernel, rng=rng)
        self.lin_norm = InstanceNorm(cout)
        self.gate_norm = InstanceNorm(cout)

    def forward(self, x):
        a = self.lin_norm(ad.pixel_shuffle_1d(self.lin(x), 2))
        b = self.gate_norm(ad.pixel_shuffle_1d(self.gate(x), 2))
        return ad.glu(a, b)


class Generator(Module):
    """Maps (B, 24, T) to (B, 24, T) for any T divisible by 4."""

    def __init__(self, spec: GeneratorSpec | None = None, rng=None):
        spec = spec or GeneratorSpec()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = spec.base
        self.spec = spec
        self.inp = GatedConv1d(spec.channels, c, spec.kernel_in, norm=False, rng=rng)
        self.down = [
            GatedConv1d(c, 2 * c, spec.kernel_down, stride=2, rng=rng),
            GatedConv1d(2 * c, 4 * c, spec.kernel_down, stride=2, rng=rng),
        ]
        self.res = [GatedResidual(4 * c, spec.kernel_res, rng=rng) for _ in range(spec.residual_blocks)]
        self.up = [
            GatedUpsample(4 * c, 2 * c, spec.kernel_down, rng=rng),
            GatedUpsample(2 * c, c, spec.kernel_down, rng=rng),
        ]
        self.out = Conv1d(c, spec.channels, spec.kernel_in, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.spec.channels or x.shape[2] % 4:
            raise ShapeMismatch(f"generator expects (B, {self.spec.channels}, 4k), got {x.shape}")
        h = self.inp(x)
        for blk in self.down:
            h = blk(h)
        for blk in self.res:
            h = blk(h)
        for blk in self.up:
            h = blk(h)
        return self.out(h)


class GatedConv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, norm=True, rng=None):
        self.lin = Conv2d(cin, cout, kernel, stride, rng=rng)
        self.gate = Conv2d(cin, cout, kernel, stride, rng=rng)
        self.norm = norm
        if norm:
            self.lin_norm = InstanceNorm(cout)
            self.gate_norm = InstanceNorm(cout)

    def forward(self, x):
        a, b = self.lin(x), self.gate(x)
        if self.norm:
            a, b = self.lin_norm(a), self.gate_norm(b)
        return ad.glu(a, b)


class Discriminator(Module):
    """(B, 24, T) → (B,) probabilities: mean of a sigmoid patch map."""

    def __init__(self, spec: DiscriminatorSpec | None = None, rng=None):
        spec = spec or DiscriminatorSpec()
        rng = rng if rng is not None else np.random.default_rng(1)
        c = spec.base
        self.spec = spec
        self.inp = GatedConv2d(1, c, 3, norm=False, rng=rng)
        self.down = [
            GatedConv2d(c, 2 * c, 3, stride=2, rng=rng),
            GatedConv2d(2 * c, 4 * c, 3, stride=2, rng=rng),
        ]
        self.out = Conv2d(4 * c, 1, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        B, C, T = x.shape
        h = self.inp(ad.reshape(x, (B, 1, C, T)))
        for blk in self.down:
            h = blk(h)
        patch = ad.sigmoid(self.out(h))
        return ad.mean(ad.reshape(patch, (B, -1)), axis=1)


# ----------------------------------------------------------------- losses

def _log_clamped(p: Tensor) -> Tensor:
    return ad.log(ad.clamp(p, PROB_EPS, 1.0 - PROB_EPS))


def adversarial_loss(d_real, d_fake) -> Tensor:
    """``E[log D(real)] + E[log(1 - D(fake))]`` with probabilities clamped to [1e-7, 1-1e-7].

    Accepts tensors or arrays; either side may be ``None`` to drop that term.
    """
    total = None
    if d_real is not None:
        total = ad.mean(_log_clamped(ad.as_tensor(d_real)))
    if d_fake is not None:
        fake = ad.as_tensor(d_fake)
        term = ad.mean(_log_clamped(ad.sub(1.0, fake)))
        total = term if total is None else total + term
    return total


def least_squares_adversarial(d_real, d_fake) -> Tensor:
    """Least-squares variant, sign-aligned with :func:`adversarial_loss` (higher = better D)."""
    total = None
    if d_real is not None:
        r = ad.as_tensor(d_real) - 1.0
        total = -ad.mean(r * r)
    if d_fake is not None:
        f = ad.as_tensor(d_fake)
        term = -ad.mean(f * f)
        total = term if total is None else total + term
    return total


def cycle_loss(x, x_cycled, y, y_cycled) -> Tensor:
    """``mean|x_cycled - x| + mean|y_cycled - y|``."""
    return ad.l1(ad.as_tensor(x_cycled), x) + ad.l1(ad.as_tensor(y_cycled), y)


def identity_loss(g_xy_y, y, g_yx_x, x) -> Tensor:
    """``mean|G_XY(y) - y| + mean|G_YX(x) - x|``."""
    return ad.l1(ad.as_tensor(g_xy_y), y) + ad.l1(ad.as_tensor(g_yx_x), x)


@dataclass
class LossParts:
    adv_xy: object
    adv_yx: object
    cyc: object
    id: object


def full_objective(parts: LossParts | tuple, weights: LossWeights, epoch: int | None = None):
    """``adv_xy + adv_yx + lambda_cyc * cyc + lambda_id * id``.

    Works on floats or tensors.  ``epoch`` past ``weights.id_decay_epoch``
    zeroes the identity term.
    """
    if not isinstance(parts, LossParts):
        parts = LossParts(*parts)
    lam_id = weights.lambda_id_at(epoch)
    total = parts.adv_xy + parts.adv_yx + weights.lambda_cyc * parts.cyc
    if lam_id:
        total = total + lam_id * parts.id
    return total


# ----------------------------------------------------------------- model bundle

@dataclass
class McepNorm:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, sequences) -> "McepNorm":
        allf = np.concatenate([np.asarray(s, dtype=np.float64) for s in sequences], axis=0)
        return cls(allf.mean(axis=0), np.maximum(allf.std(axis=0), 1e-8))

    def apply(self, m):
        return (m - self.mean) / self.std

    def invert(self, m):
        return m * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_json(cls, d) -> "McepNorm":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


class CycleGAN:
    """Both generators, both discriminators and the per-domain MCEP normalization."""

    def __init__(self, gen_spec: GeneratorSpec | None = None, disc_spec: DiscriminatorSpec | None = None,
                 seed: int = 0):
        self.gen_spec = gen_spec or GeneratorSpec()
        self.disc_spec = disc_spec or DiscriminatorSpec()
        rng = np.random.default_rng(seed)
        self.G_XY = Generator(self.gen_spec, rng)
        self.G_YX = Generator(self.gen_spec, rng)
        self.D_X = Discriminator(self.disc_spec, rng)
        self.D_Y = Discriminator(self.disc_spec, rng)
        self.norm_x: McepNorm | None = None
        self.norm_y: McepNorm | None = None

    def models(self) -> dict[str, Module]:
        return {"G_XY": self.G_XY, "G_YX": self.G_YX, "D_X": self.D_X, "D_Y": self.D_Y}

    def architecture(self) -> dict:
        return {"kind": "cyclegan", "generator": asdict(self.gen_spec), "discriminator": asdict(self.disc_spec)}

    @classmethod
    def from_architecture(cls, arch: dict, seed: int = 0) -> "CycleGAN":
        return cls(GeneratorSpec(**arch["generator"]), DiscriminatorSpec(**arch["discriminator"]), seed)


# ----------------------------------------------------------------- training

@dataclass
class EpochLog:
    epoch: int
    d_loss_X: float
    d_loss_Y: float
    g_adv_XY: float
    g_adv_YX: float
    cyc: float
    id: float

    FIELDS = ("epoch", "d_loss_X", "d_loss_Y", "g_adv_XY", "g_adv_YX", "cyc", "id")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class TrainState:
    """Optimizer state carried across epochs."""

    opt_g: ad.Adam
    opt_d: ad.Adam
    epoch: int = 0
    history: list = field(default_factory=list)


def make_state(model: CycleGAN, config: TrainConfig) -> TrainState:
    g_params = model.G_XY.parameters() + model.G_YX.parameters()
    d_params = model.D_X.parameters() + model.D_Y.parameters()
    return TrainState(ad.Adam(g_params, config.lr_g, config.beta1, 0.999),
                      ad.Adam(d_params, config.lr_d, config.beta1, 0.999))


def _crop_batch(data: list[np.ndarray], rng: np.random.Generator, batch: int, frames: int) -> np.ndarray:
    out = np.empty((batch, N_MCEP, frames), dtype=np.float32)
    for b in range(batch):
        seq = data[rng.integers(len(data))]
        if len(seq) < frames:
            seq = np.pad(seq, ((0, frames - len(seq)), (0, 0)), mode="reflect" if len(seq) > 1 else "edge")
        start = rng.integers(len(seq) - frames + 1)
        out[b] = seq[start:start + frames].T
    return out


def _adv(config: TrainConfig):
    return adversarial_loss if config.adversarial == "log" else least_squares_adversarial


def train_epoch(model: CycleGAN, data_x: list[np.ndarray], data_y: list[np.ndarray],
                config: TrainConfig, weights: LossWeights, rng: np.random.Generator,
                state: TrainState | None = None) -> EpochLog:
    """One epoch of alternating generator/discriminator updates.

    ``data_x``/``data_y`` hold (T, 24) MCEP sequences, already normalized
    per domain.  Pairing across domains is random per step.
    """
    if not data_x or not data_y:
        raise EmptyDataset("both domains need at least one sequence")
    state = state or make_state(model, config)
    state.epoch += 1
    epoch = state.epoch
    adv = _adv(config)
    lam_id = weights.lambda_id_at(epoch)
    steps = config.steps_per_epoch or max(1, math.ceil(len(data_x) / config.batch_size))
    sums = np.zeros(6)
    for _ in range(steps):
        xb = _crop_batch(data_x, rng, config.batch_size, config.segment_frames)
        yb = _crop_batch(data_y, rng, config.batch_size, config.segment_frames)
        x, y = Tensor(xb), Tensor(yb)

        # generator step
        state.opt_g.zero_grad()
        fake_y = model.G_XY(x)
        fake_x = model.G_YX(y)
        cyc = cycle_loss(x, model.G_YX(fake_y), y, model.G_XY(fake_x))
        p_fake_y, p_fake_x = model.D_Y(fake_y), model.D_X(fake_x)
        if config.adversarial == "log":
            g_adv_xy = adversarial_loss(None, p_fake_y)
            g_adv_yx = adversarial_loss(None, p_fake_x)
        else:
            # least-squares generator target: push D(fake) towards 1
            g_adv_xy = ad.mean((p_fake_y - 1.0) * (p_fake_y - 1.0))
            g_adv_yx = ad.mean((p_fake_x - 1.0) * (p_fake_x - 1.0))
        ident = identity_loss(model.G_XY(y), y, model.G_YX(x), x) if lam_id else Tensor(np.float32(0.0))
        loss_g = full_objective(LossParts(g_adv_xy, g_adv_yx, cyc, ident), weights, epoch)
        loss_g.backward()
        state.opt_g.step()

        # discriminator step on detached fakes
        state.opt_d.zero_grad()
        fy, fx = fake_y.detach(), fake_x.detach()
        d_adv_y = adv(model.D_Y(y), model.D_Y(fy))
        d_adv_x = adv(model.D_X(x), model.D_X(fx))
        loss_d = -(d_adv_y + d_adv_x)
        loss_d.backward()
        state.opt_d.step()
        model.G_XY.zero_grad()
        model.G_YX.zero_grad()

        sums += [-d_adv_x.item(), -d_adv_y.item(), g_adv_xy.item(), g_adv_yx.item(),
                 cyc.item(), ident.item()]
    m = sums / steps
    log = EpochLog(epoch, *[float(v) for v in m])
    state.history.append(log)
    return log


def train(model: CycleGAN, data_x, data_y, config: TrainConfig, weights: LossWeights | None = None,
          log_path=None, state: TrainState | None = None, callback=None) -> list[EpochLog]:
    """Fit per-domain normalization (if unset) and run ``config.epochs`` epochs."""
    weights = weights or LossWeights(id_decay_epoch=max(1, int(0.2 * config.epochs)))
    if not data_x or not data_y:
        raise EmptyDataset("both domains need at least one sequence")
    if model.norm_x is None:
        model.norm_x = McepNorm.fit(data_x)
    if model.norm_y is None:
        model.norm_y = McepNorm.fit(data_y)
    nx = [model.norm_x.apply(np.asarray(s)).astype(np.float32) for s in data_x]
    ny = [model.norm_y.apply(np.asarray(s)).astype(np.float32) for s in data_y]
    rng = np.random.default_rng(config.seed)
    state = state or make_state(model, config)
    logs = []
    for _ in range(config.epochs):
        entry = train_epoch(model, nx, ny, config, weights, rng, state)
        logs.append(entry)
        if log_path is not None:
            append_epoch_csv(entry, log_path)
        if callback is not None:
            callback(entry)
    return logs


def append_epoch_csv(entry: EpochLog, path) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(EpochLog.FIELDS)
        w.writerow([entry.epoch] + [repr(float(v)) for v in entry.row()[1:]])


def write_epoch_csv(entries: list[EpochLog], path) -> None:
    """Overwrite ``path`` with a header and one row per epoch."""
    Path(path).unlink(missing_ok=True)
    for entry in entries:
        append_epoch_csv(entry, path)
    if not entries:
        Path(path).write_text(",".join(EpochLog.FIELDS) + "\n")


def read_epoch_csv(path) -> list[EpochLog]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != EpochLog.FIELDS:
        raise DataError(f"{path}: not an epoch log")
    return [EpochLog(int(r[0]), *[float(v) for v in r[1:]]) for r in rows[1:]]


# ----------------------------------------------------------------- inference

def apply_generator(gen: Generator, mcep: np.ndarray, segment_frames: int = 128) -> np.ndarray:
    """Run a generator over a (T, 24) sequence in half-overlapping crops.

    Crops are blended with triangular weights; sequences no longer than one
    crop are processed whole (edge-padded to a multiple of 4).
    """
    mcep = np.asarray(mcep, dtype=np.float64)
    T = len(mcep)
    if T < MIN_FRAMES:
        raise SequenceTooShort(f"need at least {MIN_FRAMES} frames, got {T}")

    def run(block):
        n = len(block)
        padded = np.pad(block, ((0, (-n) % 4), (0, 0)), mode="edge")
        with ad.no_grad():
            out = gen(Tensor(padded.T[None].astype(np.float32))).data[0].T
        return out[:n].astype(np.float64)

    if T <= segment_frames:
        return run(mcep)
    hop = segment_frames // 2
    starts = list(range(0, T - segment_frames + 1, hop))
    if starts[-1] != T - segment_frames:
        starts.append(T - segment_frames)
    ramp = np.minimum(np.arange(segment_frames) + 1, segment_frames - np.arange(segment_frames)).astype(float)
    acc = np.zeros_like(mcep)
    wsum = np.zeros(T)
    for s in starts:
        acc[s:s + segment_frames] += run(mcep[s:s + segment_frames]) * ramp[:, None]
        wsum[s:s + segment_frames] += ramp
    return acc / wsum[:, None]


def convert_mcep(model: CycleGAN, mcep: np.ndarray, segment_frames: int = 128,
                 direction: str = "xy") -> np.ndarray:
    gen, src, tgt = ((model.G_XY, model.norm_x, model.norm_y) if direction == "xy"
                     else (model.G_YX, model.norm_y, model.norm_x))
    normed = src.apply(mcep) if src is not None else mcep
    out = apply_generator(gen, normed, segment_frames)
    return tgt.invert(out) if tgt is not None else out


def convert_features(feats: VoiceFeatures, model: CycleGAN, src_stats: F0Stats, tgt_stats: F0Stats,
                     segment_frames: int = 128) -> VoiceFeatures:
    """MCEPs through ``G_XY``, F0 through the log-Gaussian transform; energy and AP copied."""
    if len(feats) < MIN_FRAMES:
        raise SequenceTooShort(f"need at least {MIN_FRAMES} frames, got {len(feats)}")
    return VoiceFeatures(
        f0=f0_convert(feats.f0, src_stats, tgt_stats),
        mcep=convert_mcep(model, feats.mcep, segment_frames),
        energy=feats.energy.copy(),
        ap=feats.ap.copy(),
        alpha=feats.alpha,
    )


def parameter_count(module: Module) -> int:
    return int(sum(p.data.size for p in module.parameters()))


__all__ = [
    "Generator", "Discriminator", "CycleGAN", "LossWeights", "TrainConfig", "EpochLog",
    "adversarial_loss", "cycle_loss", "identity_loss", "full_objective", "train_epoch", "train",
    "convert_features", "apply_generator", "Parameter",
]
