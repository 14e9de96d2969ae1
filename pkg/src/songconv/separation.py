"""Vocal/accompaniment separation by magnitude masking.

A small U-Net maps the log-magnitude spectrogram of a mixture to sigmoid
masks.  The masked magnitudes are recombined with the mixture phase and
inverted.  In ``complementary`` mode only a vocal mask is predicted and the
accompaniment gets ``1 - mask``, so the two outputs sum back to the input.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio_io import AudioClip, Spectrogram, istft, stft
from .autodiff import Conv2d, Module, Tensor
from .errors import ClipTooShort, DataError, EmptyDataset, IoFailure, ShapeMismatch

TWO_DECODER = "two_decoder"
COMPLEMENTARY = "complementary"
SI_SNR_CAP = 80.0


class ZeroReference(DataError, ValueError):
    pass


@dataclass(frozen=True)
class SeparatorSpec:
    mode: str = COMPLEMENTARY
    channels: tuple = (4, 8, 16, 32)
    frame_len: int = 1024
    hop: int = 256

    def __post_init__(self):
        if self.mode not in (TWO_DECODER, COMPLEMENTARY):
            raise ValueError(f"unknown separator mode '{self.mode}'")
        if not self.channels:
            raise ValueError("separator needs at least one encoder level")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def levels(self) -> int:
        return len(self.channels)


class MaskDecoder(Module):
    def __init__(self, channels: tuple, rng):
        # level i consumes the upsampled deeper map plus the encoder skip
        ups = []
        deeper = channels[-1]
        for skip in reversed(channels[:-1]):
            ups.append(Conv2d(deeper + skip, skip, 3, rng=rng))
            deeper = skip
        self.ups = ups
        self.out = Conv2d(deeper + 1, 1, 3, rng=rng)

    def forward(self, feats: list[Tensor], x: Tensor) -> Tensor:
        h = feats[-1]
        for conv, skip in zip(self.ups, reversed(feats[:-1])):
            h = ad.leaky_relu(conv(ad.concat([ad.upsample_nearest2d(h), skip], axis=1)))
        h = self.out(ad.concat([ad.upsample_nearest2d(h), x], axis=1))
        return ad.sigmoid(h)


class SeparatorModel(Module):
    """Toy U-Net: stride-2 conv encoder, nearest-upsample decoders with skips."""

    def __init__(self, spec: SeparatorSpec | None = None, seed: int = 0):
        self.spec = spec or SeparatorSpec()
        rng = np.random.default_rng(seed)
        enc = []
        cin = 1
        for c in self.spec.channels:
            enc.append(Conv2d(cin, c, 3, stride=2, rng=rng))
            cin = c
        self.enc = enc
        self.dec_vocal = MaskDecoder(self.spec.channels, rng)
        self.dec_accomp = MaskDecoder(self.spec.channels, rng) if self.spec.mode == TWO_DECODER else None

    @property
    def multiple(self) -> int:
        return 2 ** self.spec.levels

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """``x`` is (B, 1, H, W) network input; returns (vocal, accompaniment) masks."""
        feats = []
        h = x
        for conv in self.enc:
            h = ad.leaky_relu(conv(h))
            feats.append(h)
        voc = self.dec_vocal(feats, x)
        acc = self.dec_accomp(feats, x) if self.dec_accomp is not None else 1.0 - voc
        return voc, acc

    def architecture(self) -> dict:
        d = asdict(self.spec)
        d["channels"] = list(self.spec.channels)
        d["kind"] = "separator"
        return d

    @classmethod
    def from_architecture(cls, arch: dict, seed: int = 0) -> "SeparatorModel":
        keys = {"mode", "channels", "frame_len", "hop"}
        return cls(SeparatorSpec(**{k: v for k, v in arch.items() if k in keys}), seed)


def network_input(mag: np.ndarray) -> np.ndarray:
    """Compressed magnitude, (T, F) -> (F-1, T) with the Nyquist row dropped."""
    return np.log1p(mag[:, :-1].T).astype(np.float32)


def _pad_time(a: np.ndarray, multiple: int) -> np.ndarray:
    t = a.shape[-1]
    target = max(multiple, math.ceil(t / multiple) * multiple)
    if target == t:
        return a
    pad = [(0, 0)] * (a.ndim - 1) + [(0, target - t)]
    return np.pad(a, pad)


def predict_masks(model: SeparatorModel, mag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masks shaped like ``mag`` (T, F); the Nyquist bin copies its neighbour."""
    T, F = mag.shape
    if (F - 1) % model.multiple:
        raise ShapeMismatch(f"{F - 1} frequency rows not divisible by {model.multiple}")
    x = _pad_time(network_input(mag), model.multiple)[None, None]
    with ad.no_grad():
        voc, acc = model(Tensor(x))
    out = []
    for m in (voc, acc):
        m = m.data[0, 0, :, :T].T.astype(np.float64)
        out.append(np.concatenate([m, m[:, -1:]], axis=1))
    if model.spec.mode == COMPLEMENTARY:
        out[1] = 1.0 - out[0]
    return out[0], out[1]


# ----------------------------------------------------------------- separation

@dataclass
class SeparationResult:
    vocals: AudioClip
    accompaniment: AudioClip
    vocal_mask: np.ndarray
    accomp_mask: np.ndarray


def apply_masks(mix: AudioClip, vocal_mask: np.ndarray, accomp_mask: np.ndarray,
                frame_len: int = 1024, hop: int = 256, spec: Spectrogram | None = None) -> SeparationResult:
    """Mask the mixture magnitude, keep its phase, invert both branches."""
    spec = spec or stft(mix, frame_len, hop)
    if vocal_mask.shape != spec.frames.shape or accomp_mask.shape != spec.frames.shape:
        raise ShapeMismatch(f"masks {vocal_mask.shape}/{accomp_mask.shape} vs spectrogram {spec.frames.shape}")
    voc = istft(spec.with_frames(spec.frames * vocal_mask))
    acc = istft(spec.with_frames(spec.frames * accomp_mask))
    return SeparationResult(voc, acc, vocal_mask, accomp_mask)


def separate(model: SeparatorModel, mix: AudioClip) -> SeparationResult:
    s = model.spec
    if len(mix) < s.frame_len:
        raise ClipTooShort(f"mix has {len(mix)} samples, separation needs at least {s.frame_len}")
    spec = stft(mix, s.frame_len, s.hop)
    voc_mask, acc_mask = predict_masks(model, spec.magnitude)
    return apply_masks(mix, voc_mask, acc_mask, spec=spec)


def oracle_mask(mix_mag: np.ndarray, ref_voc_mag: np.ndarray, ref_acc_mag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ideal ratio masks from the true source magnitudes."""
    if not (mix_mag.shape == ref_voc_mag.shape == ref_acc_mag.shape):
        raise ShapeMismatch(f"shapes differ: {mix_mag.shape}, {ref_voc_mag.shape}, {ref_acc_mag.shape}")
    voc = np.clip(ref_voc_mag / (ref_voc_mag + ref_acc_mag + 1e-10), 0.0, 1.0)
    acc = np.clip(ref_acc_mag / (ref_voc_mag + ref_acc_mag + 1e-10), 0.0, 1.0)
    return voc, acc


def si_snr(estimate, reference) -> float:
    """Scale-invariant SNR in dB (zero-mean signals), clipped to ±80 dB."""
    e = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    r = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    if e.shape != r.shape:
        raise ShapeMismatch(f"lengths differ: {e.shape} vs {r.shape}")
    e = e - e.mean()
    r = r - r.mean()
    rr = np.dot(r, r)
    if rr <= 0:
        raise ZeroReference("reference signal has no energy")
    target = np.dot(e, r) / rr * r
    noise = e - target
    tt, nn = np.dot(target, target), np.dot(noise, noise)
    if nn <= 0:
        return SI_SNR_CAP
    if tt <= 0:
        return -SI_SNR_CAP
    return float(np.clip(10.0 * np.log10(tt / nn), -SI_SNR_CAP, SI_SNR_CAP))


# ----------------------------------------------------------------- training

@dataclass
class SeparatorTrainConfig:
    epochs: int = 30
    batch_size: int = 8
    crop_frames: int = 64
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.crop_frames < 1:
            raise ValueError("epochs, batch_size and crop_frames must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)

    FIELDS = ("epoch", "train_l1", "val_l1")

    def rows(self) -> list[list]:
        return [[e[f] for f in self.FIELDS] for e in self.epochs]


def _mags(model: SeparatorModel, pairs) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    s = model.spec
    out = []
    for mix, voc, acc in pairs:
        out.append(tuple(stft(c, s.frame_len, s.hop).magnitude.T[:-1].astype(np.float32) for c in (mix, voc, acc)))
    return out


def _batch(items, idx, crop: int, starts) -> tuple[np.ndarray, ...]:
    mixes, vocs, accs = [], [], []
    for i, st in zip(idx, starts):
        m, v, a = items[i]
        sl = slice(st, st + crop)
        mixes.append(_pad_time(m[:, sl], crop)[:, :crop])
        vocs.append(_pad_time(v[:, sl], crop)[:, :crop])
        accs.append(_pad_time(a[:, sl], crop)[:, :crop])
    return np.stack(mixes)[:, None], np.stack(vocs)[:, None], np.stack(accs)[:, None]


def _loss(model: SeparatorModel, mix: np.ndarray, voc: np.ndarray, acc: np.ndarray) -> Tensor:
    x = Tensor(np.log1p(mix))
    mv, ma = model(x)
    m = Tensor(mix)
    return ad.l1(mv * m, Tensor(voc)) + ad.l1(ma * m, Tensor(acc))


def _eval(model: SeparatorModel, items, crop: int) -> float:
    if not items:
        return float("nan")
    total = 0.0
    with ad.no_grad():
        for m, v, a in items:
            T = max(crop, math.ceil(m.shape[1] / model.multiple) * model.multiple)
            batch = [_pad_time(z, T)[None, None] for z in (m, v, a)]
            total += _loss(model, *batch).item()
    return total / len(items)


def train_separator(model: SeparatorModel, pairs, config: SeparatorTrainConfig | None = None,
                    callback=None) -> TrainLog:
    """Minimize summed magnitude L1 over both branches on random crops.

    ``pairs`` holds (mix, vocal_ref, accompaniment_ref) clips.  A tail
    fraction of the pairs is held out for validation.
    """
    config = config or SeparatorTrainConfig()
    pairs = list(pairs)
    if not pairs:
        raise EmptyDataset("separator training needs at least one (mix, vocal, accompaniment) triple")
    items = _mags(model, pairs)
    n_val = int(round(len(items) * config.val_fraction))
    if n_val >= len(items):
        n_val = 0
    train_items, val_items = items[:len(items) - n_val], items[len(items) - n_val:]
    rng = np.random.default_rng(config.seed)
    opt = ad.Adam(model.parameters(), config.lr, 0.9, 0.999)
    crop = max(model.multiple, math.ceil(config.crop_frames / model.multiple) * model.multiple)
    steps = config.steps_per_epoch or max(1, math.ceil(len(train_items) / config.batch_size))
    log = TrainLog()
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for _ in range(steps):
            idx = rng.integers(len(train_items), size=config.batch_size)
            starts = [int(rng.integers(max(1, train_items[i][0].shape[1] - crop + 1))) for i in idx]
            mix, voc, acc = _batch(train_items, idx, crop, starts)
            opt.zero_grad()
            loss = _loss(model, mix, voc, acc)
            loss.backward()
            opt.step()
            total += loss.item()
        entry = {"epoch": epoch, "train_l1": total / steps, "val_l1": _eval(model, val_items, crop)}
        log.epochs.append(entry)
        if callback is not None:
            callback(entry)
    return log


# ----------------------------------------------------------------- debug output

def write_mask_pgm(mask: np.ndarray, path) -> None:
    """Binary PGM, time left to right, low frequencies at the bottom."""
    img = np.round(np.clip(mask, 0.0, 1.0).T[::-1] * 255.0).astype(np.uint8)
    h, w = img.shape
    try:
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_mask_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = raw.split(b"\n", 3)
    if len(header) < 4 or header[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h = map(int, header[1].split())
    img = np.frombuffer(header[3][: w * h], dtype=np.uint8).reshape(h, w)
    return img[::-1].T / 255.0
