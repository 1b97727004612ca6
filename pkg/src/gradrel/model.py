"""Dual-encoder projection heads, cosine scoring, Adam and the training loop."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DataError, FeatureTable, PairSet, RelevanceList
from .losses import LossConfig, infonce_loss, listnet_loss

LOSS_MODES = ("listnet", "infonce", "joint")
CHECKPOINT_FORMAT = "gradrel-checkpoint"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

log = logging.getLogger(__name__)


class ZeroNormError(ValueError):
    """An embedding has zero norm, so its cosine similarity is undefined."""


# --------------------------------------------------------------------------- heads


@dataclass
class ProjectionHead:
    """Affine map ``x @ weights + bias`` from ``d_in`` to ``d_out``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError(
                f"weights {self.weights.shape} and bias {self.bias.shape} do not form a head"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("projection head parameters must be finite")

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> ProjectionHead:
        bound = 1.0 / math.sqrt(d_in)
        return cls(rng.uniform(-bound, bound, (d_in, d_out)), rng.uniform(-bound, bound, d_out))


def embed(head: ProjectionHead, features) -> np.ndarray:
    """Project a feature vector (or a stack of them, last axis ``d_in``)."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != head.d_in:
        raise ValueError(f"feature dimension {x.shape[-1]} does not match head input {head.d_in}")
    return x @ head.weights + head.bias


@dataclass
class DualEncoder:
    audio_head: ProjectionHead
    text_head: ProjectionHead

    def __post_init__(self):
        if self.audio_head.d_out != self.text_head.d_out:
            raise ValueError(
                f"heads map to different spaces: {self.audio_head.d_out} vs {self.text_head.d_out}"
            )

    @classmethod
    def init(cls, d_audio: int, d_text: int, embed_dim: int, rng: np.random.Generator) -> DualEncoder:
        return cls(ProjectionHead.init(d_audio, embed_dim, rng), ProjectionHead.init(d_text, embed_dim, rng))

    @property
    def embed_dim(self) -> int:
        return self.audio_head.d_out

    def params(self) -> dict[str, np.ndarray]:
        return {
            "audio_w": self.audio_head.weights,
            "audio_b": self.audio_head.bias,
            "text_w": self.text_head.weights,
            "text_b": self.text_head.bias,
        }

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]) -> DualEncoder:
        return cls(
            ProjectionHead(params["audio_w"], params["audio_b"]),
            ProjectionHead(params["text_w"], params["text_b"]),
        )

    def copy(self) -> DualEncoder:
        return DualEncoder.from_params({k: v.copy() for k, v in self.params().items()})


# --------------------------------------------------------------------------- cosine


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_grad(u, v) -> np.ndarray:
    """Gradient of ``cosine(u, v)`` with respect to ``u``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    cos = np.dot(u, v) / (nu * nv)
    return v / (nu * nv) - cos * u / nu**2


def _normalize(e):
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroNormError("zero-norm embedding; cosine similarity undefined")
    return e / norms, norms


def _normalize_backward(unit, norms, g_unit):
    # d(e/|e|) = (I - u u^T) / |e|
    return (g_unit - unit * (g_unit * unit).sum(axis=-1, keepdims=True)) / norms


def _head_backward(x, g_out, prefix):
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g_out.reshape(-1, g_out.shape[-1])
    return {f"{prefix}_w": x2.T @ g2, f"{prefix}_b": g2.sum(axis=0)}


def score_batch(enc: DualEncoder, audio_feats, caption_feats, *, backward: bool = False):
    """All pairwise cosines: entry ``(i, j)`` pairs audio row ``i`` with caption row ``j``.

    With ``backward=True`` also returns a function mapping the gradient of a
    scalar with respect to the similarity matrix onto parameter gradients.
    """
    xa = np.atleast_2d(np.asarray(audio_feats, dtype=np.float64))
    xc = np.atleast_2d(np.asarray(caption_feats, dtype=np.float64))
    ua, na = _normalize(embed(enc.audio_head, xa))
    uc, nc = _normalize(embed(enc.text_head, xc))
    sims = np.clip(ua @ uc.T, -1.0, 1.0)
    if not backward:
        return sims

    def backward_fn(g):
        g = np.asarray(g, dtype=np.float64)
        ga = _normalize_backward(ua, na, g @ uc)
        gc = _normalize_backward(uc, nc, g.T @ ua)
        return _head_backward(xa, ga, "audio") | _head_backward(xc, gc, "text")

    return sims, backward_fn


def score_lists(enc: DualEncoder, audio_feats, caption_feats, *, backward: bool = False):
    """Cosines of each caption against its own candidate list.

    ``audio_feats`` has shape ``(L, N, d_audio)`` and ``caption_feats``
    ``(L, d_text)``; the result has shape ``(L, N)``.
    """
    xa = np.asarray(audio_feats, dtype=np.float64)
    xc = np.asarray(caption_feats, dtype=np.float64)
    ua, na = _normalize(embed(enc.audio_head, xa))
    uc, nc = _normalize(embed(enc.text_head, xc))
    sims = np.clip(np.einsum("lnk,lk->ln", ua, uc), -1.0, 1.0)
    if not backward:
        return sims

    def backward_fn(g):
        g = np.asarray(g, dtype=np.float64)
        ga = _normalize_backward(ua, na, g[..., None] * uc[:, None, :])
        gc = _normalize_backward(uc, nc, np.einsum("ln,lnk->lk", g, ua))
        return _head_backward(xa, ga, "audio") | _head_backward(xc, gc, "text")

    return sims, backward_fn


# --------------------------------------------------------------------------- adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float):
    """One Adam update; returns new ``(params, state)`` and leaves inputs untouched."""
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = ADAM_BETA1 * state.m.get(name, 0.0) + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v.get(name, 0.0) + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    loss_mode: str = "joint"
    omega: float = 0.05
    tau: float = 0.07
    alpha: float = 0.5
    lr0: float = 1e-3
    plateau_patience: int = 5
    lr_factor: float = 10.0
    stop_patience: int = 10
    max_epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    embed_dim: int = 300

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        LossConfig(self.omega, self.tau, self.alpha)
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.plateau_patience < 1 or self.stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if not self.lr_factor > 1:
            raise ValueError(f"lr_factor must be > 1, got {self.lr_factor}")
        if self.max_epochs < 0 or self.batch_size < 1 or self.embed_dim < 1:
            raise ValueError("max_epochs >= 0, batch_size >= 1 and embed_dim >= 1 are required")

    @property
    def uses_lists(self) -> bool:
        return self.loss_mode in ("listnet", "joint")

    @property
    def uses_pairs(self) -> bool:
        return self.loss_mode in ("infonce", "joint")


@dataclass
class TrainData:
    audio: FeatureTable
    captions: FeatureTable
    train_lists: Sequence[RelevanceList] = ()
    train_pairs: PairSet = field(default_factory=PairSet)
    val_lists: Sequence[RelevanceList] = ()
    val_pairs: PairSet = field(default_factory=PairSet)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    final_lr: float = 0.0
    stop_reason: str = "max_epochs"

    def to_dict(self) -> dict:
        return asdict(self)


class PlateauSchedule:
    """Reduce-on-plateau learning rate with early stopping on the same monitor.

    An epoch improves when its monitored loss is strictly below the best so
    far.  After ``plateau_patience`` epochs without improvement since the
    last improvement or reduction the rate is divided by ``lr_factor``; after
    ``stop_patience`` epochs without improvement training stops.
    """

    def __init__(self, lr0, plateau_patience=5, lr_factor=10.0, stop_patience=10):
        self.lr = lr0
        self.plateau_patience = plateau_patience
        self.lr_factor = lr_factor
        self.stop_patience = stop_patience
        self.best = math.inf
        self.best_epoch = None
        self.since_best = 0
        self.since_change = 0

    def step(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for ``epoch``; return True if training should stop."""
        if loss < self.best:
            self.best, self.best_epoch = loss, epoch
            self.since_best = self.since_change = 0
            return False
        self.since_best += 1
        self.since_change += 1
        if self.since_best >= self.stop_patience:
            return True
        if self.since_change >= self.plateau_patience:
            self.lr /= self.lr_factor
            self.since_change = 0
        return False


class _Batcher:
    """Feature lookups resolved once per dataset."""

    def __init__(self, data: TrainData):
        self.data = data

    def resolve(self, lists: Sequence[RelevanceList]):
        """Per list: ``(audio_rows, caption_row, ratings)``."""
        audio, captions = self.data.audio, self.data.captions
        return [(audio.index(rl.audio_ids), captions.index([rl.caption_id])[0], rl.ratings) for rl in lists]

    @staticmethod
    def stack(resolved):
        """Stack resolved lists of equal length: ``(audio_rows, caption_rows, ratings)`` per length."""
        by_len: dict[int, list] = {}
        for item in resolved:
            by_len.setdefault(len(item[0]), []).append(item)
        return [
            (np.stack([a for a, _, _ in group]), np.array([c for _, c, _ in group]),
             np.stack([r for _, _, r in group]))
            for _, group in sorted(by_len.items())
        ]

    def list_groups(self, lists: Sequence[RelevanceList]):
        return self.stack(self.resolve(lists))

    def pair_index(self, pairs: PairSet):
        captions = list(pairs)
        return self.data.audio.index(pairs[c] for c in captions), self.data.captions.index(captions)


def _listnet_objective(enc, audio, captions, groups, omega):
    total = sum(len(c_idx) for _, c_idx, _ in groups)
    value, grads = 0.0, None
    for a_idx, c_idx, ratings in groups:
        sims, back = score_lists(enc, audio.matrix[a_idx], captions.matrix[c_idx], backward=True)
        loss = listnet_loss(ratings, sims, omega)
        w = len(c_idx) / total
        value += w * loss.value
        g = back(w * loss.grad)
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    return value, grads


def _infonce_objective(enc, audio, captions, a_idx, c_idx, tau):
    sims, back = score_batch(enc, audio.matrix[a_idx], captions.matrix[c_idx], backward=True)
    loss = infonce_loss(sims, tau)
    return loss.value, back(loss.grad)


def batch_objective(enc: DualEncoder, config: TrainConfig, audio: FeatureTable, captions: FeatureTable,
                    list_groups=None, pair_idx=None):
    """Value and parameter gradient of the configured objective on one batch.

    ``list_groups`` comes from stacking relevance lists by length and
    ``pair_idx`` is ``(audio_rows, caption_rows)`` of aligned positives.
    """
    mode = config.loss_mode
    if mode == "listnet":
        return _listnet_objective(enc, audio, captions, list_groups, config.omega)
    if mode == "infonce":
        return _infonce_objective(enc, audio, captions, *pair_idx, config.tau)
    ln_value, ln_grads = _listnet_objective(enc, audio, captions, list_groups, config.omega)
    nce_value, nce_grads = _infonce_objective(enc, audio, captions, *pair_idx, config.tau)
    a = config.alpha
    value = a * nce_value + (1.0 - a) * ln_value
    return value, {k: a * nce_grads[k] + (1.0 - a) * ln_grads[k] for k in nce_grads}


def _validation_loss(enc, config, data, batcher, val_groups, val_pairs_idx):
    def infonce_val():
        a_idx, c_idx = val_pairs_idx
        n = len(a_idx)
        value = 0.0
        for start in range(0, n, config.batch_size):
            sl = slice(start, start + config.batch_size)
            sims = score_batch(enc, data.audio.matrix[a_idx[sl]], data.captions.matrix[c_idx[sl]])
            value += len(a_idx[sl]) / n * infonce_loss(sims, config.tau).value
        return value

    def listnet_val():
        total = sum(len(c) for _, c, _ in val_groups)
        value = 0.0
        for a_idx, c_idx, ratings in val_groups:
            sims = score_lists(enc, data.audio.matrix[a_idx], data.captions.matrix[c_idx])
            value += len(c_idx) / total * listnet_loss(ratings, sims, config.omega).value
        return value

    if config.loss_mode == "listnet":
        return listnet_val()
    if config.loss_mode == "infonce":
        return infonce_val()
    return config.alpha * infonce_val() + (1.0 - config.alpha) * listnet_val()


def _check_data(data: TrainData, config: TrainConfig):
    if config.uses_lists and not data.train_lists:
        raise DataError(f"loss mode {config.loss_mode!r} needs relevance lists, none given")
    if config.uses_pairs and not len(data.train_pairs):
        raise DataError(f"loss mode {config.loss_mode!r} needs positive pairs, none given")
    has_val = (not config.uses_lists or data.val_lists) and (not config.uses_pairs or len(data.val_pairs))
    return bool(has_val)


def train(data: TrainData, config: TrainConfig,
          on_epoch: Callable[[int, float, float, float], None] | None = None):
    """Train a dual encoder; returns ``(encoder at best validation epoch, TrainReport)``.

    The monitored quantity is the configured objective on the validation
    lists/pairs, or on the training data when no validation data is given.
    """
    has_val = _check_data(data, config)
    rng = np.random.default_rng(config.seed)
    enc = DualEncoder.init(data.audio.dimension, data.captions.dimension, config.embed_dim, rng)
    report = TrainReport(final_lr=config.lr0)
    if config.max_epochs == 0:
        return enc, report

    batcher = _Batcher(data)
    train_lists = batcher.resolve(data.train_lists) if config.uses_lists else []
    train_pairs_idx = batcher.pair_index(data.train_pairs) if config.uses_pairs else None
    if has_val:
        val_groups = batcher.list_groups(data.val_lists) if config.uses_lists else None
        val_pairs_idx = batcher.pair_index(data.val_pairs) if config.uses_pairs else None
    else:
        log.warning("no validation data; the schedule monitors the training objective")
        val_groups = batcher.stack(train_lists) if config.uses_lists else None
        val_pairs_idx = train_pairs_idx

    bs = config.batch_size
    n_list_batches = math.ceil(len(train_lists) / bs) if config.uses_lists else 0
    n_pair_batches = math.ceil(len(train_pairs_idx[0]) / bs) if config.uses_pairs else 0
    n_steps = max(n_list_batches, n_pair_batches)

    schedule = PlateauSchedule(config.lr0, config.plateau_patience, config.lr_factor, config.stop_patience)
    params, state = enc.params(), AdamState()
    best = enc.copy()

    for epoch in range(1, config.max_epochs + 1):
        lr = schedule.lr
        list_order = rng.permutation(len(train_lists)) if config.uses_lists else None
        pair_order = rng.permutation(len(train_pairs_idx[0])) if config.uses_pairs else None
        step_losses = []
        for step in range(n_steps):
            groups = pair_idx = None
            if config.uses_lists:
                b = step % n_list_batches
                groups = batcher.stack([train_lists[i] for i in list_order[b * bs:(b + 1) * bs]])
            if config.uses_pairs:
                b = step % n_pair_batches
                sel = pair_order[b * bs:(b + 1) * bs]
                pair_idx = (train_pairs_idx[0][sel], train_pairs_idx[1][sel])
            value, grads = batch_objective(enc, config, data.audio, data.captions, groups, pair_idx)
            params, state = adam_step(params, grads, state, lr)
            enc = DualEncoder.from_params(params)
            step_losses.append(value)

        val = _validation_loss(enc, config, data, batcher, val_groups, val_pairs_idx)
        report.train_loss.append(float(np.mean(step_losses)))
        report.val_loss.append(float(val))
        report.lr.append(lr)
        if on_epoch is not None:
            on_epoch(epoch, report.train_loss[-1], val, lr)
        stop = schedule.step(epoch, val)
        if schedule.best_epoch == epoch:
            best = enc.copy()
        if stop:
            report.stop_reason = "early_stopping"
            break

    report.best_epoch = schedule.best_epoch
    report.final_lr = schedule.lr
    return best, report


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, enc: DualEncoder, config: TrainConfig | None = None, report: TrainReport | None = None):
    """Write a JSON checkpoint; floats are stored as shortest round-trip decimals."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "audio_head": _head_dict(enc.audio_head),
        "text_head": _head_dict(enc.text_head),
        "config": asdict(config) if config is not None else None,
        "report": report.to_dict() if report is not None else None,
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def _head_dict(head: ProjectionHead):
    return {
        "d_in": head.d_in,
        "d_out": head.d_out,
        "weights": head.weights.tolist(),
        "bias": head.bias.tolist(),
    }


def load_checkpoint(path) -> tuple[DualEncoder, TrainConfig | None]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: not a JSON checkpoint ({err})") from None
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    heads = []
    for key in ("audio_head", "text_head"):
        h = payload[key]
        w = np.array(h["weights"], dtype=np.float64).reshape(h["d_in"], h["d_out"])
        heads.append(ProjectionHead(w, np.array(h["bias"], dtype=np.float64)))
    config = TrainConfig(**payload["config"]) if payload.get("config") else None
    return DualEncoder(*heads), config
