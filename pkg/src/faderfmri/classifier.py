"""GRU classification of latent sequences and the end-to-end conv+GRU baseline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import LatentSequence, index_records, load_series_array
from .errors import DimensionError, DomainError
from .evaluation import EvalReport, FoldResult, fold_seed, roc_auc


@dataclass
class GruConfig:
    input_dim: int = 128
    hidden: int = 64
    n_layers: int = 2
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 60
    seed: int = 0
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.n_layers < 1 or self.hidden < 1 or self.input_dim < 1:
            raise DomainError("n_layers, hidden and input_dim must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GruConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class GRULayer(nn.Module):
    """One GRU layer; the reset gate multiplies the previous state before the candidate matmul.

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    c = tanh(W_c x + U_c (r * h) + b_c)
    h' = (1 - z) * h + z * c
    """

    def __init__(self, input_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.w_in = nn.Parameter(torch.empty(input_dim, 3 * hidden))
        self.u_zr = nn.Parameter(torch.empty(hidden, 2 * hidden))
        self.u_c = nn.Parameter(torch.empty(hidden, hidden))
        self.bias = nn.Parameter(torch.empty(3 * hidden))

    def reset_parameters(self, generator: torch.Generator) -> None:
        bound = 1.0 / math.sqrt(self.hidden)
        with torch.no_grad():
            for p in (self.w_in, self.u_zr, self.u_c, self.bias):
                p.uniform_(-bound, bound, generator=generator)

    def forward(self, x):
        # x: [B, T, D] -> states [B, T, H]
        B, T, _ = x.shape
        H = self.hidden
        proj = x @ self.w_in + self.bias
        h = x.new_zeros(B, H)
        states = []
        for t in range(T):
            p = proj[:, t]
            zr = torch.sigmoid(p[:, : 2 * H] + h @ self.u_zr)
            z, r = zr[:, :H], zr[:, H:]
            c = torch.tanh(p[:, 2 * H :] + (r * h) @ self.u_c)
            h = (1 - z) * h + z * c
            states.append(h)
        return torch.stack(states, dim=1)


class GruNet(nn.Module):
    """Stacked GRU layers, time-averaged top-layer states, affine readout to one logit."""

    def __init__(self, cfg: GruConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dims = [cfg.input_dim] + [cfg.hidden] * cfg.n_layers
        self.layers = nn.ModuleList(GRULayer(dims[i], dims[i + 1]) for i in range(cfg.n_layers))
        self.readout = nn.Linear(cfg.hidden, 1)

    def reset_parameters(self, generator: torch.Generator) -> None:
        for layer in self.layers:
            layer.reset_parameters(generator)
        bound = 1.0 / math.sqrt(self.cfg.hidden)
        with torch.no_grad():
            self.readout.weight.uniform_(-bound, bound, generator=generator)
            self.readout.bias.uniform_(-bound, bound, generator=generator)

    def forward(self, x):
        h = x
        for layer in self.layers:
            h = layer(h)
        return self.readout(h.mean(dim=1)).squeeze(-1)


class GruModel:
    """Trained recurrent classifier plus the input standardization fitted on its training set."""

    def __init__(self, cfg: GruConfig, net: GruNet | None = None, mean=None, scale=None):
        self.cfg = cfg
        self.net = net if net is not None else GruNet(cfg)
        self.mean = np.zeros(cfg.input_dim) if mean is None else np.asarray(mean, dtype=np.float64)
        self.scale = np.ones(cfg.input_dim) if scale is None else np.asarray(scale, dtype=np.float64)

    def prepare(self, vectors) -> np.ndarray:
        v = np.asarray(vectors, dtype=np.float64)
        if v.shape[-1] != self.cfg.input_dim:
            raise DimensionError(f"sequence width {v.shape[-1]} does not match input_dim {self.cfg.input_dim}")
        return (v - self.mean) / self.scale

    def save(self, path) -> None:
        from .checkpoint import save_checkpoint, state_to_numpy

        state = state_to_numpy(self.net)
        state["input_mean"] = self.mean
        state["input_scale"] = self.scale
        save_checkpoint(path, "gru", {"gru": asdict(self.cfg)}, state)

    @classmethod
    def load(cls, path) -> "GruModel":
        from .checkpoint import load_checkpoint, load_into

        kind, config, state = load_checkpoint(path)
        if kind != "gru":
            raise DomainError(f"{path} holds a {kind!r} checkpoint, not a GRU classifier")
        model = cls(GruConfig.from_dict(config["gru"]), mean=state.pop("input_mean"), scale=state.pop("input_scale"))
        load_into(model.net, state)
        return model


def init_gru(cfg: GruConfig, seed: int | None = None) -> GruModel:
    net = GruNet(cfg)
    net.reset_parameters(torch.Generator().manual_seed(int(cfg.seed if seed is None else seed)))
    return GruModel(cfg, net)


def _vectors(seq):
    return seq.vectors if isinstance(seq, LatentSequence) else np.asarray(seq)


def gru_forward(model: GruModel, seq) -> float:
    """Probability of the positive class for one sequence ``[T, input_dim]``."""
    v = _vectors(seq)
    if v.ndim != 2 or v.shape[0] < 1:
        raise DimensionError(f"sequence must be [T, D] with T >= 1, got {v.shape}")
    x = torch.as_tensor(model.prepare(v)[None], dtype=next(model.net.parameters()).dtype)
    with torch.no_grad():
        return float(torch.sigmoid(model.net(x))[0])


def predict(model: GruModel, sequences, batch_size: int = 64) -> list[float]:
    """Element-wise :func:`gru_forward`, batching sequences of equal length."""
    return _predict_prepared(model, [model.prepare(_vectors(s)) for s in sequences], batch_size)


def _predict_prepared(model: GruModel, arrays, batch_size: int = 64) -> list[float]:
    out = [0.0] * len(arrays)
    by_len: dict[int, list[int]] = {}
    for i, a in enumerate(arrays):
        if a.ndim != 2 or a.shape[0] < 1:
            raise DimensionError(f"sequence {i} must be [T, D] with T >= 1, got {a.shape}")
        by_len.setdefault(a.shape[0], []).append(i)
    dtype = next(model.net.parameters()).dtype
    with torch.no_grad():
        for idx in by_len.values():
            for k in range(0, len(idx), batch_size):
                chunk = idx[k : k + batch_size]
                x = torch.as_tensor(np.stack([arrays[i] for i in chunk]), dtype=dtype)
                p = torch.sigmoid(model.net(x)).tolist()
                for i, v in zip(chunk, p):
                    out[i] = float(v)
    return out


def _fit_standardization(arrays):
    stacked = np.concatenate([a.reshape(-1, a.shape[-1]) for a in arrays]).astype(np.float64)
    mean = stacked.mean(axis=0)
    scale = stacked.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def train_classifier(sequences, labels, cfg: GruConfig, eval_sequences=None, eval_labels=None):
    """Binary cross-entropy + Adam on frozen latent sequences.

    Returns ``(model, history)`` where history has one row per epoch with the
    mean training loss and training AUC (plus validation AUC when an eval set
    is given).
    """
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) < 2 or len(np.unique(labels)) < 2:
        raise DomainError("training set needs at least two subjects and both classes")
    arrays = [np.asarray(_vectors(s), dtype=np.float64) for s in sequences]
    if any(a.shape[-1] != cfg.input_dim for a in arrays):
        raise DimensionError(f"sequence width does not match input_dim {cfg.input_dim}")
    torch.manual_seed(cfg.seed)
    model = init_gru(cfg)
    model.mean, model.scale = _fit_standardization(arrays)
    prepared = [model.prepare(a) for a in arrays]
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = []
    n = len(prepared)
    for epoch in range(cfg.epochs):
        model.net.train()
        order = rng.permutation(n)
        losses = []
        for k in range(0, n, cfg.batch_size):
            batch = order[k : k + cfg.batch_size]
            # sequences in a batch must share T; group by length within the batch
            groups: dict[int, list[int]] = {}
            for i in batch:
                groups.setdefault(prepared[i].shape[0], []).append(i)
            opt.zero_grad(set_to_none=True)
            total = 0.0
            for idx in groups.values():
                x = torch.as_tensor(np.stack([prepared[i] for i in idx]), dtype=torch.float32)
                y = torch.as_tensor(labels[idx], dtype=torch.float32)
                loss = F.binary_cross_entropy_with_logits(model.net(x), y, reduction="sum") / len(batch)
                loss.backward()
                total += loss.item()
            opt.step()
            losses.append(total)
        model.net.eval()
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "train_auc": roc_auc(_predict_prepared(model, prepared), labels)}
        if eval_sequences is not None:
            ev = np.asarray(eval_labels)
            row["eval_auc"] = roc_auc(predict(model, eval_sequences), ev) if len(np.unique(ev)) == 2 else float("nan")
        history.append(row)
    model.net.eval()
    return model, history


# ---------------------------------------------------------------------------
# end-to-end conv + GRU


class ConvGru(nn.Module):
    """Per-frame 3D conv encoder feeding the recurrent classifier; trained jointly."""

    def __init__(self, arch, cfg: GruConfig):
        super().__init__()
        from .fader import Encoder

        self.encoder = Encoder(arch)
        self.gru = GruNet(cfg)

    def forward(self, x):
        # x: [B, T, S, S, S]
        B, T = x.shape[:2]
        feats = self.encoder(x.reshape(B * T, *x.shape[2:])).reshape(B, T, -1)
        return self.gru(feats)


def train_convgru(frames: np.ndarray, labels, arch, cfg: GruConfig, seed: int):
    """Train encoder + GRU from scratch on full sequences ``[N, T, S, S, S]``."""
    from .fader import reset_parameters

    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise DomainError("training set needs both classes")
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(int(seed))
    model = ConvGru(arch, GruConfig(**{**asdict(cfg), "input_dim": arch.latent_dim}))
    reset_parameters(model.encoder, g)
    model.gru.reset_parameters(g)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)
    n = len(frames)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        order = rng.permutation(n)
        for k in range(0, n, cfg.batch_size):
            batch = order[k : k + cfg.batch_size]
            if len(batch) < 2:
                continue  # batch norm needs more than one frame per channel
            x = torch.from_numpy(np.ascontiguousarray(frames[batch]))
            y = torch.as_tensor(labels[batch], dtype=torch.float32)
            loss = F.binary_cross_entropy_with_logits(model(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
    model.eval()
    return model, history


def convgru_scores(model: ConvGru, frames: np.ndarray, batch_size: int = 8) -> np.ndarray:
    out = []
    model.eval()
    with torch.no_grad():
        for k in range(0, len(frames), batch_size):
            out.append(torch.sigmoid(model(torch.from_numpy(np.ascontiguousarray(frames[k : k + batch_size])))).numpy())
    return np.concatenate(out)


def end_to_end_convgru(records, folds, arch, cfg: GruConfig, base_seed: int = 0, frames=None,
                       config_echo: dict | None = None) -> EvalReport:
    """End-to-end ConvGRU baseline: a fresh encoder+GRU per fold, no pretraining, no discriminator."""
    from .evaluation import cross_validate

    records = list(records)
    if frames is None:
        frames = load_series_array(records)
    pos = {r.subject_id: i for i, r in enumerate(records)}

    def pipeline(train, test, seed):
        tr = np.array([pos[r.subject_id] for r in train])
        te = np.array([pos[r.subject_id] for r in test])
        model, _ = train_convgru(frames[tr], [r.diagnosis for r in train], arch, cfg, seed)
        return convgru_scores(model, frames[te])

    echo = {"pipeline": "convgru", "arch": asdict(arch), "gru": asdict(cfg)}
    echo.update(config_echo or {})
    return cross_validate(pipeline, records, folds, base_seed, echo)
