"""
Next-location predictor with a bi-Lipschitz feature extractor.

window of L location ids
  -> embedding lookup (L x d_emb), optional residual self-attention
  -> mean pool -> input projection to d_f  (x~)
  -> B residual blocks  x + W2 relu(W1 x + b1), W1/W2 spectrally normalized to c
  -> features h(x)  -> linear head -> logits over D locations

With every normalized matrix at spectral norm c < 1 each block satisfies
(1 - c) |x - x'| <= |block(x) - block(x')| <= (1 + c) |x - x'|, which keeps
the feature space both smooth and sensitive.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

import tensor as T
from data_handler import load_checkpoint, read_features, save_checkpoint, write_features
from layers import Linear
from optim import AdamW
from simulation import Trajectory
from tensor import Tensor, grad, parameters
from utils import DivergenceError, NumericalError, PathLike, ShapeError, sha256_bytes

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


@dataclass
class PredictorConfig:
    num_locations: int = 100
    embed_dim: int = 16
    feature_dim: int = 32
    num_blocks: int = 4
    branch_scale: float = 0.9
    window: int = 20
    stride: int = 5
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: Optional[float] = 10.0
    attention: bool = False
    freeze_iterations: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_locations < 2:
            raise ValueError("num_locations must be >= 2")
        if not 0.0 <= self.branch_scale < 1.0:
            raise ValueError("branch_scale must be in [0, 1)")
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be >= 1")
        if min(self.embed_dim, self.feature_dim, self.batch_size) < 1 or self.num_blocks < 0:
            raise ValueError("dimensions and batch size must be positive")


# ----- windows ------------------------------------------------------------------
@dataclass(frozen=True)
class WindowedExample:
    context: np.ndarray
    label: int
    trajectory_id: int = 0
    start: int = 0


def _visits(trajectory: Union[Trajectory, Sequence[int], np.ndarray]) -> Tuple[np.ndarray, int]:
    if isinstance(trajectory, Trajectory):
        return np.asarray(trajectory.visits, dtype=np.int64), trajectory.agent_id
    return np.asarray(trajectory, dtype=np.int64), 0


def make_windows(trajectory, L: int, stride: int) -> List[WindowedExample]:
    """Sliding windows of length L every `stride` steps, labelled by the next visit."""
    contexts, labels, tids, starts = window_arrays([trajectory], L, stride)
    return [WindowedExample(c, int(y), int(t), int(s)) for c, y, t, s in zip(contexts, labels, tids, starts)]


def window_arrays(trajectories: Sequence, L: int, stride: int):
    """(contexts (n, L), labels (n,), trajectory_ids (n,), window_starts (n,))."""
    if L < 1 or stride < 1:
        raise ValueError("L and stride must be >= 1")
    contexts, labels, tids, starts = [], [], [], []
    for traj in trajectories:
        visits, tid = _visits(traj)
        if len(visits) < L + 1:
            raise ValueError(f"trajectory {tid} has length {len(visits)}, needs at least L + 1 = {L + 1}")
        s = np.arange(0, len(visits) - L, stride)
        windows = np.lib.stride_tricks.sliding_window_view(visits, L)[s]
        contexts.append(windows)
        labels.append(visits[s + L])
        tids.append(np.full(len(s), tid, dtype=np.int64))
        starts.append(s)
    if not contexts:
        return (np.zeros((0, L), dtype=np.int64), np.zeros(0, dtype=np.int64),
                np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    return (np.concatenate(contexts), np.concatenate(labels),
            np.concatenate(tids), np.concatenate(starts))


# ----- spectral normalization ------------------------------------------------------
def _unit(v: np.ndarray, what: str) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError(f"spectral normalization: {what} vanished (zero matrix?)")
    return v / norm


def spectral_normalize(W, u: np.ndarray, c: float = 1.0, update: bool = True) -> Tuple[Tensor, np.ndarray, float]:
    """
    One power-iteration step on u, then W_hat = c * W / sigma_hat with
    sigma_hat = u^T W v. Gradients flow through sigma_hat; u and v are
    treated as constants.

    Returns (W_hat, refined u, sigma_hat).
    """
    W = T.as_tensor(W)
    w = W.data
    if w.ndim != 2:
        raise ShapeError(f"spectral_normalize needs a matrix, got shape {w.shape}")
    if not np.any(w):
        raise ValueError("spectral_normalize: zero matrix has no spectral norm")
    u = np.asarray(u, dtype=np.float64)
    v = _unit(w.T @ u, "W^T u")
    if update:
        u = _unit(w @ v, "W v")
    sigma = T.sum(T.matmul(u[None, :], T.matmul(W, v[:, None])))
    if sigma.data <= 0.0:
        raise ValueError("spectral_normalize: non-positive spectral norm estimate")
    return W * (c / sigma) if c != 1.0 else W / sigma, u, float(sigma.data)


def power_iteration(w: np.ndarray, u: np.ndarray, steps: int) -> Tuple[np.ndarray, float]:
    """Plain numpy power iteration; returns (u, sigma estimate)."""
    u = _unit(np.asarray(u, dtype=np.float64), "u")
    sigma = 0.0
    for _ in range(steps):
        v = _unit(w.T @ u, "W^T u")
        u = _unit(w @ v, "W v")
        sigma = float(u @ w @ v)
    return u, sigma


# ----- model ------------------------------------------------------------------------
class PredictorModel:
    """
    Parameters, power-iteration vectors and training history of a predictor.

    Attributes
    ----------
    config : PredictorConfig
    params : dict[str, np.ndarray]
    power_vectors : dict[str, np.ndarray]
        One left singular vector estimate per normalized matrix.
    loss_trace : list[float]
        Cross-entropy per optimizer step.
    accuracy : float | None
        Top-1 training accuracy after training.
    """

    def __init__(self, config: PredictorConfig, params: Params, power_vectors: Params,
                 loss_trace: Optional[List[float]] = None, accuracy: Optional[float] = None) -> None:
        self.config = config
        self.params = params
        self.power_vectors = power_vectors
        self.loss_trace: List[float] = list(loss_trace or [])
        self.accuracy = accuracy

        d_emb, d_f = config.embed_dim, config.feature_dim
        self.input_proj = Linear("input_proj", d_emb, d_f)
        self.head = Linear("head", d_f, config.num_locations)
        self.blocks = [
            (Linear(f"blocks.{i}.fc1", d_f, d_f), Linear(f"blocks.{i}.fc2", d_f, d_f, bias=False))
            for i in range(config.num_blocks)
        ]
        self.attention = (
            [Linear(f"attention.{k}", d_emb, d_emb, bias=False) for k in ("q", "k", "v", "o")]
            if config.attention else []
        )

    @property
    def normalized_names(self) -> List[str]:
        names = [lin.weight_name for lin in self.attention]
        for fc1, fc2 in self.blocks:
            names += [fc1.weight_name, fc2.weight_name]
        return names

    @classmethod
    def initialize(cls, config: PredictorConfig, rng: np.random.Generator) -> "PredictorModel":
        model = cls(config, {}, {})
        params: Params = {"embedding": rng.normal(0.0, 1.0, size=(config.num_locations, config.embed_dim))}
        params.update(model.input_proj.init(rng))
        for fc1, fc2 in model.blocks:
            params.update(fc1.init(rng))
            params.update(fc2.init(rng))
        for lin in model.attention:
            params.update(lin.init(rng))
        params.update(model.head.init(rng, scale=0.01))
        model.params = params
        model.power_vectors = {
            name: _unit(rng.normal(size=params[name].shape[0]), "u") for name in model.normalized_names
        }
        return model

    def fingerprint(self) -> str:
        digest = b"".join(name.encode() + np.ascontiguousarray(self.params[name]).tobytes()
                          for name in sorted(self.params))
        return sha256_bytes(digest)[:16]

    # ----- persistence ------------------------------------------------------
    def save(self, path: PathLike) -> None:
        arrays = dict(self.params)
        arrays.update({f"power.{k}": v for k, v in self.power_vectors.items()})
        save_checkpoint(path, arrays, {
            "kind": "predictor",
            "config": asdict(self.config),
            "loss_trace": self.loss_trace,
            "accuracy": self.accuracy,
        })

    @classmethod
    def load(cls, path: PathLike) -> "PredictorModel":
        arrays, manifest = load_checkpoint(path, kind="predictor")
        config = PredictorConfig(**manifest["config"])
        params = {k: v for k, v in arrays.items() if not k.startswith("power.")}
        power = {k[len("power."):]: v for k, v in arrays.items() if k.startswith("power.")}
        return cls(config, params, power, manifest.get("loss_trace"), manifest.get("accuracy"))


def _normalized(model: PredictorModel, P: Mapping[str, Tensor], name: str, update: bool,
                new_u: Dict[str, np.ndarray]) -> Tensor:
    w_hat, u, _ = spectral_normalize(P[name], model.power_vectors[name], model.config.branch_scale, update)
    new_u[name] = u
    return w_hat


def _forward_tensors(model: PredictorModel, P: Mapping[str, Tensor], contexts: np.ndarray,
                     update_power: bool = False) -> Tuple[Tensor, Tensor, Dict[str, np.ndarray], Tensor]:
    """(features, logits, refined power vectors, x~ post-embedding representation)."""
    config = model.config
    new_u: Dict[str, np.ndarray] = {}
    E = T.take(P["embedding"], contexts)  # (B, L, d_emb)
    if model.attention:
        Wq, Wk, Wv, Wo = (_normalized(model, P, lin.weight_name, update_power, new_u) for lin in model.attention)
        scores = T.matmul(T.matmul(E, Wq), T.swapaxes(T.matmul(E, Wk), -1, -2)) / np.sqrt(config.embed_dim)
        E = E + T.matmul(T.matmul(T.softmax(scores, axis=-1), T.matmul(E, Wv)), Wo)
    x = model.input_proj(P, T.mean(E, axis=1))
    x_tilde = x
    for fc1, fc2 in model.blocks:
        W1 = _normalized(model, P, fc1.weight_name, update_power, new_u)
        W2 = _normalized(model, P, fc2.weight_name, update_power, new_u)
        x = x + T.matmul(T.relu(fc1(P, x, weight=W1)), W2)
    logits = model.head(P, x)
    return x, logits, new_u, x_tilde


def _constants(params: Params) -> Dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def _as_contexts(model: PredictorModel, window) -> Tuple[np.ndarray, bool]:
    contexts = np.asarray(window, dtype=np.int64)
    single = contexts.ndim == 1
    if single:
        contexts = contexts[None, :]
    if contexts.size and (contexts.min() < 0 or contexts.max() >= model.config.num_locations):
        raise ValueError(f"window ids outside [0, {model.config.num_locations})")
    return contexts, single


def forward(model: PredictorModel, window, batch_size: int = 4096) -> Tuple[np.ndarray, np.ndarray]:
    """
    Features h(x) and logits for one window (L,) or a batch (n, L).
    Pure: power vectors are read, never refined.
    """
    contexts, single = _as_contexts(model, window)
    P = _constants(model.params)
    feats, logits = [], []
    for start in range(0, len(contexts), batch_size):
        f, z, _, _ = _forward_tensors(model, P, contexts[start:start + batch_size])
        feats.append(f.data)
        logits.append(z.data)
    features = np.concatenate(feats) if feats else np.zeros((0, model.config.feature_dim))
    out_logits = np.concatenate(logits) if logits else np.zeros((0, model.config.num_locations))
    return (features[0], out_logits[0]) if single else (features, out_logits)


def embed(model: PredictorModel, window) -> np.ndarray:
    """Post-embedding representation x~ (input of the residual blocks)."""
    contexts, single = _as_contexts(model, window)
    _, _, _, x_tilde = _forward_tensors(model, _constants(model.params), contexts)
    return x_tilde.data[0] if single else x_tilde.data


def apply_block(model: PredictorModel, index: int, x: np.ndarray) -> np.ndarray:
    """Residual block `index` applied to representations x (n, d_f)."""
    fc1, fc2 = model.blocks[index]
    P = _constants(model.params)
    new_u: Dict[str, np.ndarray] = {}
    W1 = _normalized(model, P, fc1.weight_name, False, new_u)
    W2 = _normalized(model, P, fc2.weight_name, False, new_u)
    xt = Tensor(x)
    return (xt + T.matmul(T.relu(fc1(P, xt, weight=W1)), W2)).data


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    picked = T.take_along(T.log_softmax(logits, axis=-1), np.asarray(labels, dtype=np.int64)[:, None], axis=-1)
    return -T.mean(picked)


# ----- training -----------------------------------------------------------------------
def freeze_power_iterations(model: PredictorModel, steps: int = 50) -> None:
    """Refine every power vector `steps` times against the current weights."""
    for name in model.normalized_names:
        model.power_vectors[name], _ = power_iteration(model.params[name], model.power_vectors[name], steps)


def spectral_report(model: PredictorModel, steps: int = 1000) -> Dict[str, float]:
    """Spectral norm of every normalized matrix as used in forward (long power iteration oracle)."""
    report = {}
    c = model.config.branch_scale
    rng = np.random.default_rng(0)
    for name in model.normalized_names:
        w = model.params[name]
        w_hat, _, _ = spectral_normalize(w, model.power_vectors[name], c, update=False)
        _, sigma = power_iteration(w_hat.data, rng.normal(size=w.shape[0]), steps)
        report[name] = sigma
    return report


def train_predictor(trajectories: Sequence, config: PredictorConfig,
                    rng: Optional[np.random.Generator] = None,
                    labels_override: Optional[np.ndarray] = None) -> PredictorModel:
    """
    Minimize next-location cross-entropy with AdamW, refining the spectral
    normalization once per step. `labels_override` replaces the window
    labels (used to train on shuffled labels).
    """
    rng = rng or np.random.default_rng(config.seed)
    contexts, labels, _, _ = window_arrays(trajectories, config.window, config.stride)
    if labels_override is not None:
        labels = np.asarray(labels_override, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("no training windows")

    model = PredictorModel.initialize(config, rng)
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm)
    step_index = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(labels))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            P = parameters(model.params)
            try:
                _, logits, new_u, _ = _forward_tensors(model, P, contexts[idx], update_power=True)
                loss = cross_entropy(logits, labels[idx])
                grads = grad(loss, P)
            except NumericalError as exc:
                raise DivergenceError(f"predictor diverged at step {step_index}: {exc}", step=step_index) from exc
            model.params = opt.step(model.params, grads)
            model.power_vectors.update(new_u)
            model.loss_trace.append(float(loss.data))
            epoch_losses.append(float(loss.data))
            step_index += 1
        logger.info("[predictor] epoch %d/%d loss %.4f", epoch + 1, config.epochs, float(np.mean(epoch_losses)))

    freeze_power_iterations(model, config.freeze_iterations)
    model.accuracy = _accuracy(model, contexts, labels)
    logger.info("[predictor] train accuracy %.4f (uniform baseline %.4f)", model.accuracy, 1.0 / config.num_locations)
    return model


def _accuracy(model: PredictorModel, contexts: np.ndarray, labels: np.ndarray) -> float:
    _, logits = forward(model, contexts)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def predictor_accuracy(model: PredictorModel, trajectories: Sequence) -> float:
    contexts, labels, _, _ = window_arrays(trajectories, model.config.window, model.config.stride)
    return _accuracy(model, contexts, labels)


# ----- features / aleatoric scores ---------------------------------------------------
@dataclass
class FeatureMatrix:
    """Penultimate-layer features, one row per window, with provenance."""

    rows: np.ndarray
    dataset_id: str = ""
    trajectory_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    window_starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ShapeError(f"feature rows must be 2-d, got {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise NumericalError("feature matrix has non-finite entries")
        n = len(self.rows)
        if len(self.trajectory_ids) != n:
            self.trajectory_ids = np.zeros(n, dtype=np.int64)
        if len(self.window_starts) != n:
            self.window_starts = np.zeros(n, dtype=np.int64)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return len(self.rows)

    def save(self, path: PathLike) -> None:
        write_features(path, self.rows, self.dataset_id, self.trajectory_ids, self.window_starts, self.meta)

    @classmethod
    def load(cls, path: PathLike) -> "FeatureMatrix":
        fields, rows, tids, starts = read_features(path)
        dataset_id = fields.pop("dataset_id")
        fields.pop("d_f", None)
        return cls(rows, dataset_id, tids, starts, fields)


def extract_features(model: PredictorModel, trajectories: Sequence, L: Optional[int] = None,
                     stride: Optional[int] = None, dataset_id: str = "") -> FeatureMatrix:
    L = L or model.config.window
    stride = stride or model.config.stride
    contexts, _, tids, starts = window_arrays(trajectories, L, stride)
    features, _ = forward(model, contexts)
    meta = {"L": str(L), "stride": str(stride), "model_hash": model.fingerprint()}
    return FeatureMatrix(features.reshape(len(contexts), -1), dataset_id, tids, starts, meta)


def softmax_entropy(logits) -> Union[float, np.ndarray]:
    """Shannon entropy (nats) of softmax(logits) along the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    h = special.entr(special.softmax(logits, axis=-1)).sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def score_entropy(model: PredictorModel, trajectories: Sequence):
    """Aleatoric score per window: (entropies, trajectory_ids, window_starts)."""
    contexts, _, tids, starts = window_arrays(trajectories, model.config.window, model.config.stride)
    _, logits = forward(model, contexts)
    return softmax_entropy(logits.reshape(len(contexts), -1)), tids, starts
