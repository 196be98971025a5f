"""3D convolutional fader network: site-conditioned autoencoder with a latent site discriminator.

The encoder is trained so that the discriminator cannot recover the acquisition
site from the latent code, while the decoder receives the site explicitly and
can still reconstruct the frame.
"""

from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import LatentSequence, VolumeSeries, load_series_array
from .errors import DimensionError, DomainError, TrainingDivergenceError


@dataclass
class FaderArch:
    S: int = 16
    n_blocks: int = 4
    base_channels: int = 16
    n_sites: int = 2
    disc_widths: list[int] = field(default_factory=lambda: [1024, 256, 64])
    disc_dropout: float = 0.3
    leaky_slope: float = 0.2

    @property
    def latent_dim(self) -> int:
        return self.base_channels * 2 ** (self.n_blocks - 1)

    @property
    def channel_ladder(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.n_blocks)]

    def validate(self) -> None:
        if self.n_blocks < 1 or self.base_channels < 1:
            raise DomainError("n_blocks and base_channels must be positive")
        if self.S != 2**self.n_blocks:
            raise DimensionError(
                f"volume side {self.S} must equal 2**n_blocks = {2 ** self.n_blocks} "
                "so the encoder reduces it to a single voxel"
            )
        if self.n_sites < 1:
            raise DomainError("n_sites must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "FaderArch":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class FaderTrainConfig:
    adversarial_weight: float = 0.0
    lambda_ramp_steps: int = 0
    lr: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 32
    steps: int = 1500
    mode: str = "fader_alternating"  # or "gradient_reversal"
    seed: int = 0
    disc_steps: int = 1
    disc_lr: float | None = None
    track_directionality: bool = False

    def validate(self) -> None:
        if self.adversarial_weight < 0:
            raise DomainError("adversarial_weight must be >= 0")
        if self.steps < 1 or self.batch_size < 1 or self.disc_steps < 1:
            raise DomainError("steps, batch_size and disc_steps must be >= 1")
        if self.mode not in ("fader_alternating", "gradient_reversal"):
            raise DomainError(f"unknown training mode {self.mode!r}")

    def lambda_at(self, step: int) -> float:
        if self.lambda_ramp_steps <= 0:
            return float(self.adversarial_weight)
        return float(self.adversarial_weight) * min(1.0, step / self.lambda_ramp_steps)

    @classmethod
    def from_dict(cls, d: dict) -> "FaderTrainConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


# ---------------------------------------------------------------------------
# networks


class Encoder(nn.Module):
    def __init__(self, arch: FaderArch):
        super().__init__()
        layers = []
        in_ch = 1
        for i, out_ch in enumerate(arch.channel_ladder):
            layers.append(nn.Conv3d(in_ch, out_ch, kernel_size=4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.BatchNorm3d(out_ch))
            layers.append(nn.LeakyReLU(arch.leaky_slope))
            in_ch = out_ch
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        # x: [B, S, S, S] -> [B, latent_dim]
        return self.net(x.unsqueeze(1)).flatten(1)


class Decoder(nn.Module):
    """Mirror of the encoder; the one-hot site is appended to z as extra input channels."""

    def __init__(self, arch: FaderArch):
        super().__init__()
        ladder = arch.channel_ladder
        in_ch = arch.latent_dim + arch.n_sites
        layers = []
        for i in range(arch.n_blocks):
            last = i == arch.n_blocks - 1
            out_ch = 1 if last else ladder[arch.n_blocks - 2 - i]
            layers.append(nn.ConvTranspose3d(in_ch, out_ch, kernel_size=4, stride=2, padding=1))
            if not last:
                layers += [nn.ReLU(), nn.BatchNorm3d(out_ch)]
            in_ch = out_ch
        self.net = nn.Sequential(*layers)

    def forward(self, z, y_onehot):
        h = torch.cat([z, y_onehot.to(z.dtype)], dim=1)
        return self.net(h[:, :, None, None, None]).squeeze(1)


class LatentDiscriminator(nn.Module):
    def __init__(self, arch: FaderArch):
        super().__init__()
        layers = []
        in_dim = arch.latent_dim
        for width in arch.disc_widths:
            layers += [nn.Linear(in_dim, width), nn.BatchNorm1d(width), nn.ReLU(), nn.Dropout(arch.disc_dropout)]
            in_dim = width
        layers.append(nn.Linear(in_dim, arch.n_sites))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        """Site logits; apply softmax for probabilities."""
        return self.net(z)


class FaderModel(nn.Module):
    def __init__(self, arch: FaderArch):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch)
        self.discriminator = LatentDiscriminator(arch)


def _fan_in(module: nn.Module) -> int:
    w = module.weight
    if isinstance(module, nn.ConvTranspose3d):
        return w.shape[0] * math.prod(w.shape[2:])
    return math.prod(w.shape[1:])


def reset_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Uniform(+-1/sqrt(fan_in)) for conv/linear weights and biases; BN scale 1, shift 0."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            bound = 1.0 / math.sqrt(_fan_in(m))
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.reset_parameters()


def init_model(arch: FaderArch, seed: int) -> FaderModel:
    model = FaderModel(arch)
    g = torch.Generator().manual_seed(int(seed))
    reset_parameters(model, g)
    return model


# ---------------------------------------------------------------------------
# forward API


def _check_frames(model: FaderModel, x: torch.Tensor) -> None:
    S = model.arch.S
    if x.ndim != 4 or tuple(x.shape[1:]) != (S, S, S):
        raise DimensionError(f"expected frames of shape [B, {S}, {S}, {S}], got {tuple(x.shape)}")


def _as_tensor(a, model: nn.Module) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(a) if not torch.is_tensor(a) else a, dtype=dtype)


def one_hot(sites, n_sites: int, dtype=torch.float32) -> torch.Tensor:
    sites = torch.as_tensor(sites, dtype=torch.long)
    if sites.numel() and (sites.min() < 0 or sites.max() >= n_sites):
        raise DomainError(f"site index outside [0, {n_sites})")
    return F.one_hot(sites, n_sites).to(dtype)


def encode(model: FaderModel, frames) -> np.ndarray:
    """Latent vectors in inference mode.

    Accepts one frame ``[S, S, S]`` (returns ``[latent_dim]``) or a batch ``[B, S, S, S]``.
    """
    x = _as_tensor(frames, model)
    single = x.ndim == 3
    if single:
        x = x.unsqueeze(0)
    _check_frames(model, x)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z = model.encoder(x)
    model.train(was_training)
    z = z.cpu().numpy()
    return z[0] if single else z


def _validate_onehot(y: torch.Tensor, n_sites: int) -> None:
    if y.shape[-1] != n_sites:
        raise DimensionError(f"site vector must have {n_sites} entries, got {y.shape[-1]}")
    if not torch.all((y == 0) | (y == 1)) or not torch.all(y.sum(-1) == 1):
        raise DomainError("site vector must be one-hot")


def decode(model: FaderModel, z, y) -> np.ndarray:
    """Reconstruct a frame from a latent vector and a one-hot site vector (inference mode)."""
    zt = _as_tensor(z, model)
    yt = _as_tensor(y, model)
    single = zt.ndim == 1
    if single:
        zt, yt = zt.unsqueeze(0), yt.unsqueeze(0)
    if zt.shape[-1] != model.arch.latent_dim:
        raise DimensionError(f"latent must have {model.arch.latent_dim} entries, got {zt.shape[-1]}")
    _validate_onehot(yt, model.arch.n_sites)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model.decoder(zt, yt)
    model.train(was_training)
    out = out.cpu().numpy()
    return out[0] if single else out


def discriminate(model: FaderModel, z) -> np.ndarray:
    """Softmax site probabilities for one latent vector or a batch (inference mode)."""
    zt = _as_tensor(z, model)
    single = zt.ndim == 1
    if single:
        zt = zt.unsqueeze(0)
    if zt.shape[-1] != model.arch.latent_dim:
        raise DimensionError(f"latent must have {model.arch.latent_dim} entries, got {zt.shape[-1]}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        p = torch.softmax(model.discriminator(zt), dim=-1)
    model.train(was_training)
    p = p.cpu().numpy()
    return p[0] if single else p


def encode_series(model: FaderModel, series: VolumeSeries, batch_size: int = 64) -> LatentSequence:
    data = series.data
    if data.shape[1:] != (model.arch.S,) * 3:
        raise DimensionError(f"series frames are {data.shape[1:]}, model expects side {model.arch.S}")
    chunks = [encode(model, data[i : i + batch_size]) for i in range(0, len(data), batch_size)]
    return LatentSequence(series.subject_id, np.concatenate(chunks, axis=0))


# ---------------------------------------------------------------------------
# losses


def uniform_cross_entropy(logits: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of softmax(logits) against the uniform distribution over classes."""
    return -F.log_softmax(logits, dim=-1).mean(dim=-1).mean()


def reconstruction_loss(model: FaderModel, x, z, y_onehot):
    return F.mse_loss(model.decoder(z, y_onehot), x)


def fader_losses(model: FaderModel, x, y):
    """Return ``(L_rec, L_disc, L_adv)`` as differentiable scalars.

    ``L_disc`` sees a detached latent, so it only reaches the discriminator.
    ``L_adv`` pushes the discriminator output toward uniform; callers that
    treat the discriminator as constant simply do not step its optimizer.
    """
    x = _as_tensor(x, model)
    _check_frames(model, x)
    y = torch.as_tensor(y, dtype=torch.long)
    if y.shape != (x.shape[0],):
        raise DimensionError(f"need one site label per frame, got {tuple(y.shape)} for batch {x.shape[0]}")
    yh = one_hot(y, model.arch.n_sites, x.dtype)
    z = model.encoder(x)
    l_rec = reconstruction_loss(model, x, z, yh)
    l_disc = F.cross_entropy(model.discriminator(z.detach()), y)
    l_adv = uniform_cross_entropy(model.discriminator(z))
    return l_rec, l_disc, l_adv


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight):
        ctx.weight = weight
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.weight * grad_output, None


def grad_reverse(x, weight: float):
    return GradReverse.apply(x, weight)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "L_rec", "L_disc", "L_adv", "disc_acc", "lambda_t")
    EXTRA = ("disc_acc_after", "L_adv_after")

    def append(self, **row):
        self.rows.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path) -> None:
        cols = list(self.COLUMNS)
        if self.rows and all(k in self.rows[0] for k in self.EXTRA):
            cols += list(self.EXTRA)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["step"]] + [repr(float(r[c])) for c in cols[1:]])


@contextlib.contextmanager
def frozen_batchnorm_stats(module: nn.Module):
    """Run forward passes in training mode without touching BN running statistics."""
    saved = {k: v.clone() for k, v in module.state_dict().items() if "running_" in k or "num_batches" in k}
    try:
        yield
    finally:
        module.load_state_dict(saved, strict=False)


class FrameSampler:
    """Draws (subject, time step) pairs uniformly with replacement."""

    def __init__(self, frames: np.ndarray, sites: np.ndarray, seed: int):
        self.frames = frames  # [N, T, S, S, S]
        self.sites = np.asarray(sites, dtype=np.int64)
        self.rng = np.random.default_rng(seed)

    def draw(self, batch_size: int):
        n, t = self.frames.shape[:2]
        subj = self.rng.integers(0, n, size=batch_size)
        ts = self.rng.integers(0, t, size=batch_size)
        return torch.from_numpy(np.ascontiguousarray(self.frames[subj, ts])), torch.from_numpy(self.sites[subj])


def _check_finite(step, history, *losses):
    for v in losses:
        if not torch.isfinite(v):
            raise TrainingDivergenceError(step, history)


def _make_optimizers(model: FaderModel, cfg: FaderTrainConfig):
    ae_params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    ae_opt = torch.optim.Adam(ae_params, lr=cfg.lr, betas=tuple(cfg.adam_betas))
    disc_opt = torch.optim.Adam(model.discriminator.parameters(), lr=cfg.disc_lr or cfg.lr, betas=tuple(cfg.adam_betas))
    return ae_opt, disc_opt


def _disc_accuracy(logits, y) -> float:
    return float((logits.argmax(-1) == y).float().mean())


def _alternating_step(model, ae_opt, disc_opt, x, y, lam, cfg, step, history):
    n_sites = model.arch.n_sites
    yh = one_hot(y, n_sites, x.dtype)

    # one training-mode encoder pass; the discriminator sees the same latent
    # distribution in its own step as in the adversarial step
    model.encoder.train()
    model.decoder.train()
    z = model.encoder(x)
    z_fixed = z.detach()

    model.discriminator.eval()
    with torch.no_grad():
        acc_before = _disc_accuracy(model.discriminator(z_fixed), y)
    model.discriminator.train()
    for _ in range(cfg.disc_steps):
        l_disc = F.cross_entropy(model.discriminator(z_fixed), y)
        disc_opt.zero_grad(set_to_none=True)
        l_disc.backward()
        disc_opt.step()
    model.discriminator.eval()
    acc_after = None
    if cfg.track_directionality:
        with torch.no_grad():
            acc_after = _disc_accuracy(model.discriminator(z_fixed), y)

    # encoder/decoder update against the now-frozen discriminator
    l_rec = reconstruction_loss(model, x, z, yh)
    l_adv = uniform_cross_entropy(model.discriminator(z))
    _check_finite(step, history, l_rec, l_disc, l_adv)
    loss = l_rec + lam * l_adv if lam > 0 else l_rec
    ae_opt.zero_grad(set_to_none=True)
    loss.backward()
    ae_opt.step()

    row = dict(step=step, L_rec=l_rec.item(), L_disc=l_disc.item(), L_adv=l_adv.item(), disc_acc=acc_before, lambda_t=lam)
    if cfg.track_directionality:
        with torch.no_grad(), frozen_batchnorm_stats(model.encoder):
            l_adv_after = uniform_cross_entropy(model.discriminator(model.encoder(x)))
        row.update(disc_acc_after=acc_after, L_adv_after=float(l_adv_after))
    return row


def _reversal_step(model, opt, x, y, lam, step, history):
    yh = one_hot(y, model.arch.n_sites, x.dtype)
    model.train()
    z = model.encoder(x)
    l_rec = reconstruction_loss(model, x, z, yh)
    logits = model.discriminator(grad_reverse(z, lam))
    l_disc = F.cross_entropy(logits, y)
    with torch.no_grad():
        l_adv = uniform_cross_entropy(logits)
    _check_finite(step, history, l_rec, l_disc)
    opt.zero_grad(set_to_none=True)
    (l_rec + l_disc).backward()
    opt.step()
    return dict(step=step, L_rec=l_rec.item(), L_disc=l_disc.item(), L_adv=l_adv.item(),
                disc_acc=_disc_accuracy(logits.detach(), y), lambda_t=lam)


def train_fader_arrays(frames: np.ndarray, sites, cfg: FaderTrainConfig, arch: FaderArch, model: FaderModel | None = None,
                       progress=None):
    """Train on an in-memory array ``[N, T, S, S, S]`` with per-subject site labels."""
    cfg.validate()
    arch.validate()
    sites = np.asarray(sites)
    if len(np.unique(sites)) < 2 and cfg.adversarial_weight > 0:
        raise DomainError("adversarial training needs at least two sites")
    torch.manual_seed(cfg.seed)
    if model is None:
        model = init_model(arch, cfg.seed)
    sampler = FrameSampler(frames.astype(np.float32, copy=False), sites, cfg.seed)
    history = TrainHistory()
    if cfg.mode == "gradient_reversal":
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.adam_betas))
    else:
        ae_opt, disc_opt = _make_optimizers(model, cfg)
    for step in range(cfg.steps):
        x, y = sampler.draw(cfg.batch_size)
        lam = cfg.lambda_at(step)
        if cfg.mode == "gradient_reversal":
            row = _reversal_step(model, opt, x, y, lam, step, history)
        else:
            row = _alternating_step(model, ae_opt, disc_opt, x, y, lam, cfg, step, history)
        history.append(**row)
        if progress is not None:
            progress(step, row, model)
    model.eval()
    return model, history


def train_fader(records, cfg: FaderTrainConfig, arch: FaderArch, progress=None):
    """Load every record's series and train a fader network (plain autoencoder when the weight is 0)."""
    frames = load_series_array(records)
    return train_fader_arrays(frames, [r.site for r in records], cfg, arch, progress=progress)


def train_autoencoder_arrays(frames: np.ndarray, sites, cfg: FaderTrainConfig, arch: FaderArch):
    """Plain reconstruction-only training; no discriminator involvement at all.

    Uses the same seeding and batch stream as :func:`train_fader_arrays`, so at
    zero adversarial weight both produce identical encoder/decoder parameters.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    model = init_model(arch, cfg.seed)
    sampler = FrameSampler(frames.astype(np.float32, copy=False), sites, cfg.seed)
    ae_opt, _ = _make_optimizers(model, cfg)
    history = TrainHistory()
    for step in range(cfg.steps):
        x, y = sampler.draw(cfg.batch_size)
        model.encoder.train()
        model.decoder.train()
        z = model.encoder(x)
        l_rec = reconstruction_loss(model, x, z, one_hot(y, arch.n_sites, x.dtype))
        _check_finite(step, history, l_rec)
        ae_opt.zero_grad(set_to_none=True)
        l_rec.backward()
        ae_opt.step()
        history.append(step=step, L_rec=l_rec.item(), L_disc=float("nan"), L_adv=float("nan"), disc_acc=float("nan"), lambda_t=0.0)
    model.eval()
    return model, history


def encode_records(model: FaderModel, records, frames: np.ndarray | None = None) -> list[LatentSequence]:
    if frames is None:
        frames = load_series_array(records)
    out = []
    for r, f in zip(records, frames):
        out.append(LatentSequence(r.subject_id, np.concatenate([encode(model, f[i:i + 64]) for i in range(0, len(f), 64)])))
    return out


def save_fader(model: FaderModel, path, extra: dict | None = None) -> None:
    from .checkpoint import save_checkpoint, state_to_numpy

    config = {"arch": asdict(model.arch)}
    if extra:
        config.update(extra)
    save_checkpoint(path, "fader", config, state_to_numpy(model))


def load_fader(path) -> tuple[FaderModel, dict]:
    from .checkpoint import load_checkpoint, load_into

    kind, config, state = load_checkpoint(path)
    if kind != "fader":
        raise DomainError(f"{path} holds a {kind!r} checkpoint, not a fader model")
    model = FaderModel(FaderArch.from_dict(config["arch"]))
    load_into(model, state)
    model.eval()
    return model, config
