"""
Bijective (BNF) and surjective (SNF) normalizing flows over feature space.

Layers are written in the inference direction (data y -> latent z):

    CouplingLayer     y -> z, same dim, rational-quadratic spline on the
                      unmasked dims with parameters from the masked dims.
    SliceSurjection   y (p) -> z (q < p). y splits into kept y+ and dropped
                      y-; z = f^{-1}(y+ | y-) through an inner conditional
                      coupling, and the dropped block is scored under a
                      Gaussian decoder p(y- | z).

log p(y) = log N(z_0; 0, I) + sum of bijection log-dets
           + sum over surjections [inner log-det + log p(y- | z)]
           + standardization log-det.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import tensor as T
from data_handler import load_checkpoint, save_checkpoint
from layers import MLP
from optim import AdamW
from splines import DEFAULT_BINS, DEFAULT_BOUND, SplineParams, identity_raw, raw_size, rq_spline_forward, rq_spline_inverse
from tensor import Tensor, grad, parameters
from utils import DivergenceError, NumericalError, PathLike, ShapeError

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]
LOG_STD_CLAMP = 7.0


@dataclass
class FlowConfig:
    num_layers: int = 10
    surjection_layers: Tuple[int, ...] = (3, 8)
    reduction: float = 0.25
    num_bins: int = DEFAULT_BINS
    bound: float = DEFAULT_BOUND
    hidden: Tuple[int, ...] = (128, 128)
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    patience: int = 20
    val_fraction: float = 0.1
    clip_norm: Optional[float] = 10.0
    standardize: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        self.surjection_layers = tuple(int(k) for k in self.surjection_layers)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if any(k < 1 or k > self.num_layers for k in self.surjection_layers):
            raise ValueError(f"surjection_layers must lie in 1..{self.num_layers}")
        if not 0.0 < self.reduction < 1.0:
            raise ValueError("reduction must be in (0, 1)")
        if self.num_bins < 1 or self.bound <= 0.0:
            raise ValueError("num_bins must be >= 1 and bound > 0")
        if self.lr <= 0.0 or self.batch_size < 1:
            raise ValueError("lr must be > 0 and batch_size >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    def bijective(self) -> "FlowConfig":
        """Same flow without any surjection."""
        return FlowConfig(**{**asdict(self), "surjection_layers": ()})


# ----- layers ------------------------------------------------------------------------
class CouplingLayer:
    """
    Masked coupling with a rational-quadratic spline.

    mask[j] True: dim j passes through unchanged and feeds the conditioner.
    mask[j] False: dim j is splined. An optional context vector is appended
    to the conditioner input.
    """

    kind = "coupling"

    def __init__(self, name: str, mask: Sequence[bool], context_dim: int = 0,
                 hidden: Sequence[int] = (128, 128), num_bins: int = DEFAULT_BINS,
                 bound: float = DEFAULT_BOUND) -> None:
        self.name = name
        self.mask = np.asarray(mask, dtype=bool)
        self.dim = len(self.mask)
        self.context_dim = int(context_dim)
        self.num_bins = int(num_bins)
        self.bound = float(bound)
        self.pass_idx = np.flatnonzero(self.mask)
        self.trans_idx = np.flatnonzero(~self.mask)
        if len(self.trans_idx) == 0:
            raise ValueError(f"{name}: mask leaves no dimension to transform")
        if self.dim > 1 and len(self.pass_idx) == 0:
            raise ValueError(f"{name}: mask of a {self.dim}-dim layer needs a pass-through dim")
        self._restore = np.argsort(np.concatenate([self.pass_idx, self.trans_idx]))
        n_in = len(self.pass_idx) + self.context_dim
        self.constant_input = n_in == 0
        self.conditioner = MLP(f"{name}.conditioner", max(n_in, 1), hidden,
                               len(self.trans_idx) * raw_size(self.num_bins))

    @property
    def out_dim(self) -> int:
        return self.dim

    def init(self, rng: np.random.Generator) -> Params:
        bias = np.tile(identity_raw(self.num_bins), len(self.trans_idx))
        return self.conditioner.init(rng, out_scale=0.0, out_bias=bias)

    def spec(self) -> Dict:
        return {"type": self.kind, "mask": self.mask.astype(int).tolist(), "context_dim": self.context_dim}

    def _spline(self, P: Mapping[str, Tensor], kept: Tensor, context: Optional[Tensor]) -> SplineParams:
        n = kept.shape[0]
        inputs = [kept] if len(self.pass_idx) else []
        if self.context_dim:
            if context is None or context.shape[-1] != self.context_dim:
                raise ShapeError(f"{self.name}: expected context of dim {self.context_dim}")
            inputs.append(context)
        x = Tensor(np.ones((n, 1))) if self.constant_input else T.concat(inputs, axis=-1)
        raw = T.reshape(self.conditioner(P, x), (n, len(self.trans_idx), raw_size(self.num_bins)))
        return SplineParams.from_raw(raw, self.bound)

    def _check(self, y: Tensor) -> None:
        if y.ndim != 2 or y.shape[1] != self.dim:
            raise ShapeError(f"{self.name}: expected rows of dim {self.dim}, got shape {y.shape}")

    def inverse(self, P: Mapping[str, Tensor], y: Tensor, context: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """Inference direction y -> z; returns (z, log|det dz/dy| per row)."""
        self._check(y)
        kept = y[:, self.pass_idx]
        z_t, logdet = rq_spline_inverse(y[:, self.trans_idx], self._spline(P, kept, context))
        return T.concat([kept, z_t], axis=-1)[:, self._restore], T.sum(logdet, axis=-1)

    def forward(self, P: Mapping[str, Tensor], z: Tensor, context: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """Generative direction z -> y; returns (y, log|det dy/dz| per row)."""
        self._check(z)
        kept = z[:, self.pass_idx]
        y_t, logdet = rq_spline_forward(z[:, self.trans_idx], self._spline(P, kept, context))
        return T.concat([kept, y_t], axis=-1)[:, self._restore], T.sum(logdet, axis=-1)


class SliceSurjection:
    """
    Dimension-reducing slice: keeps y+ = y[kept] (in the stored order, which
    also permutes the surviving dims) and drops y- = y[dropped].
    """

    kind = "surjection"

    def __init__(self, name: str, dim: int, kept: Sequence[int], dropped: Sequence[int],
                 inner_mask: Optional[Sequence[bool]] = None, hidden: Sequence[int] = (128, 128),
                 num_bins: int = DEFAULT_BINS, bound: float = DEFAULT_BOUND) -> None:
        self.name = name
        self.dim = int(dim)
        self.kept = np.asarray(kept, dtype=np.int64)
        self.dropped = np.asarray(dropped, dtype=np.int64)
        if sorted(np.concatenate([self.kept, self.dropped]).tolist()) != list(range(self.dim)):
            raise ValueError(f"{name}: kept and dropped must partition 0..{self.dim - 1}")
        if len(self.kept) == 0 or len(self.dropped) == 0:
            raise ValueError(f"{name}: both kept and dropped sets must be non-empty")
        q = len(self.kept)
        if inner_mask is None:
            inner_mask = alternating_mask(q, 0)
        self.inner = CouplingLayer(f"{name}.inner", inner_mask, context_dim=len(self.dropped),
                                   hidden=hidden, num_bins=num_bins, bound=bound)
        self.decoder = MLP(f"{name}.decoder", q, hidden, 2 * len(self.dropped))
        self._restore = np.argsort(np.concatenate([self.kept, self.dropped]))

    @property
    def out_dim(self) -> int:
        return len(self.kept)

    def init(self, rng: np.random.Generator) -> Params:
        params = self.inner.init(rng)
        params.update(self.decoder.init(rng, out_scale=0.0))
        return params

    def spec(self) -> Dict:
        return {"type": self.kind, "dim": self.dim, "kept": self.kept.tolist(),
                "dropped": self.dropped.tolist(), "inner_mask": self.inner.mask.astype(int).tolist()}

    def decode(self, P: Mapping[str, Tensor], z: Tensor) -> Tuple[Tensor, Tensor]:
        """Mean and log-std of p(y- | z); log-std softly clamped to (-7, 7)."""
        mean, raw = T.split(self.decoder(P, z), [len(self.dropped), len(self.dropped)], axis=-1)
        return mean, LOG_STD_CLAMP * T.tanh(raw / LOG_STD_CLAMP)

    def inverse(self, P: Mapping[str, Tensor], y: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """y (n, p) -> (z (n, q), inner log-det, decoder log-density) per row."""
        if y.ndim != 2 or y.shape[1] != self.dim:
            raise ShapeError(f"{self.name}: expected rows of dim {self.dim}, got shape {y.shape}")
        y_plus, y_minus = y[:, self.kept], y[:, self.dropped]
        z, logdet = self.inner.inverse(P, y_plus, context=y_minus)
        mean, log_std = self.decode(P, z)
        return z, logdet, T.gaussian_log_density(y_minus, mean, log_std)

    def forward(self, P: Mapping[str, Tensor], z: Tensor, noise: np.ndarray) -> Tensor:
        """z (n, q) -> y (n, p): sample y- from the decoder, then y+ = f(z | y-)."""
        mean, log_std = self.decode(P, z)
        y_minus = mean + T.exp(log_std) * noise
        y_plus, _ = self.inner.forward(P, z, context=y_minus)
        return T.concat([y_plus, y_minus], axis=-1)[:, self._restore]


FlowLayer = Union[CouplingLayer, SliceSurjection]


def alternating_mask(dim: int, parity: int) -> np.ndarray:
    """Even (parity 0) or odd (parity 1) dims pass through; 1-dim layers transform their only dim."""
    if dim == 1:
        return np.zeros(1, dtype=bool)
    return (np.arange(dim) % 2) == parity


def surjection_drop_count(dim: int, rate: float) -> int:
    return max(1, int(round(rate * dim)))


# ----- stack -------------------------------------------------------------------------
@dataclass
class LogLikelihoodBreakdown:
    """Per-row terms of log p(y); `layers` and `decoders` are keyed by 1-based layer index."""

    base: np.ndarray
    layers: Dict[int, np.ndarray]
    decoders: Dict[int, np.ndarray]
    standardization: float
    total: np.ndarray

    def parts_sum(self) -> np.ndarray:
        out = self.base + self.standardization
        for v in self.layers.values():
            out = out + v
        for v in self.decoders.values():
            out = out + v
        return out


@dataclass
class FlowStack:
    """
    Ordered flow layers over standardized features plus a standard-Gaussian base.

    Attributes
    ----------
    config : FlowConfig
    input_dim : int
    layers : list of CouplingLayer | SliceSurjection
    params : dict[str, np.ndarray]
    shift, scale : np.ndarray
        Feature standardization y_std = (y - shift) / scale.
    nll_trace, val_trace : list[float]
        Mean training NLL per epoch and validation NLL per epoch.
    final_nll : float | None
        Mean NLL over all training rows with the returned parameters.
    """

    config: FlowConfig
    input_dim: int
    layers: List[FlowLayer]
    params: Params
    shift: np.ndarray
    scale: np.ndarray
    nll_trace: List[float] = field(default_factory=list)
    val_trace: List[float] = field(default_factory=list)
    final_nll: Optional[float] = None

    @property
    def kind(self) -> str:
        return "snf" if self.surjection_indices else "bnf"

    @property
    def base_dim(self) -> int:
        return self.layers[-1].out_dim if self.layers else self.input_dim

    @property
    def bijection_indices(self) -> List[int]:
        return [k for k, layer in enumerate(self.layers, start=1) if isinstance(layer, CouplingLayer)]

    @property
    def surjection_indices(self) -> List[int]:
        return [k for k, layer in enumerate(self.layers, start=1) if isinstance(layer, SliceSurjection)]

    @property
    def standardization_logdet(self) -> float:
        return float(-np.sum(np.log(self.scale)))

    def save(self, path: PathLike) -> None:
        arrays = dict(self.params)
        arrays["standardize.shift"] = self.shift
        arrays["standardize.scale"] = self.scale
        save_checkpoint(path, arrays, {
            "kind": "flow",
            "flow_kind": self.kind,
            "config": asdict(self.config),
            "input_dim": self.input_dim,
            "layers": [layer.spec() for layer in self.layers],
            "nll_trace": self.nll_trace,
            "val_trace": self.val_trace,
            "final_nll": self.final_nll,
        })

    @classmethod
    def load(cls, path: PathLike) -> "FlowStack":
        arrays, manifest = load_checkpoint(path, kind="flow")
        config = FlowConfig(**manifest["config"])
        layers = layers_from_specs(manifest["layers"], config)
        shift = arrays.pop("standardize.shift")
        scale = arrays.pop("standardize.scale")
        return cls(config, int(manifest["input_dim"]), layers, arrays, shift, scale,
                   list(manifest.get("nll_trace", [])), list(manifest.get("val_trace", [])),
                   manifest.get("final_nll"))


def layers_from_specs(specs: Sequence[Mapping], config: FlowConfig) -> List[FlowLayer]:
    layers: List[FlowLayer] = []
    for k, spec in enumerate(specs, start=1):
        name = f"layers.{k}"
        if spec["type"] == CouplingLayer.kind:
            layers.append(CouplingLayer(name, np.asarray(spec["mask"], dtype=bool), spec.get("context_dim", 0),
                                        config.hidden, config.num_bins, config.bound))
        elif spec["type"] == SliceSurjection.kind:
            layers.append(SliceSurjection(name, spec["dim"], spec["kept"], spec["dropped"],
                                          np.asarray(spec["inner_mask"], dtype=bool),
                                          config.hidden, config.num_bins, config.bound))
        else:
            raise ValueError(f"unknown flow layer type '{spec['type']}'")
    return layers


def build_flow(input_dim: int, config: FlowConfig, rng: Optional[np.random.Generator] = None,
               shift: Optional[np.ndarray] = None, scale: Optional[np.ndarray] = None) -> FlowStack:
    """
    Lay out the stack: couplings with alternating masks, slice surjections at
    the configured positions dropping a random subset of round(rate * p)
    dims (at least one). The drop sets and orders are drawn once from `rng`.
    """
    if input_dim < 1:
        raise ShapeError("flow input dim must be >= 1")
    rng = rng or np.random.default_rng(config.seed)
    specs, dim, parity = [], int(input_dim), 0
    for k in range(1, config.num_layers + 1):
        if k in config.surjection_layers:
            if dim < 2:
                raise ValueError(f"layer {k}: cannot reduce a {dim}-dim representation")
            drop = min(surjection_drop_count(dim, config.reduction), dim - 1)
            order = rng.permutation(dim)
            kept, dropped = order[drop:], order[:drop]
            specs.append({"type": SliceSurjection.kind, "dim": dim, "kept": kept.tolist(),
                          "dropped": dropped.tolist(), "inner_mask": alternating_mask(len(kept), 0).astype(int).tolist()})
            dim = len(kept)
            parity = 0
        else:
            specs.append({"type": CouplingLayer.kind, "mask": alternating_mask(dim, parity).astype(int).tolist()})
            parity = 1 - parity
    layers = layers_from_specs(specs, config)
    params: Params = {}
    for layer in layers:
        params.update(layer.init(rng))
    shift = np.zeros(input_dim) if shift is None else np.asarray(shift, dtype=np.float64)
    scale = np.ones(input_dim) if scale is None else np.asarray(scale, dtype=np.float64)
    return FlowStack(config, int(input_dim), layers, params, shift, scale)


def build_snf(input_dim: int, config: FlowConfig, rng: Optional[np.random.Generator] = None) -> FlowStack:
    return build_flow(input_dim, config, rng)


def build_bnf(input_dim: int, config: FlowConfig, rng: Optional[np.random.Generator] = None) -> FlowStack:
    return build_flow(input_dim, config.bijective(), rng)


# ----- inference direction ---------------------------------------------------------------
def coupling_inverse(layer: CouplingLayer, y, params: Params, context=None) -> Tuple[np.ndarray, np.ndarray]:
    """Numpy view of CouplingLayer.inverse for rows y (n, d) or a single row (d,)."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    ctx = None if context is None else Tensor(np.atleast_2d(context))
    z, logdet = layer.inverse(_constants(params), Tensor(np.atleast_2d(y)), ctx)
    return (z.data[0], float(logdet.data[0])) if single else (z.data, logdet.data)


def surjection_inverse(layer: SliceSurjection, y, params: Params) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (z, contribution) with contribution = log p(y- | z) + log|det J(y+)|."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    z, logdet, dec = layer.inverse(_constants(params), Tensor(np.atleast_2d(y)))
    contribution = logdet.data + dec.data
    return (z.data[0], float(contribution[0])) if single else (z.data, contribution)


def _constants(params: Params) -> Dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def _log_prob_terms(stack: FlowStack, P: Mapping[str, Tensor], y: np.ndarray):
    """Tensor-valued per-row terms; errors carry the 1-based layer index."""
    h = Tensor((y - stack.shift) / stack.scale)
    layer_terms: Dict[int, Tensor] = {}
    decoder_terms: Dict[int, Tensor] = {}
    for k, layer in enumerate(stack.layers, start=1):
        try:
            if isinstance(layer, SliceSurjection):
                h, layer_terms[k], decoder_terms[k] = layer.inverse(P, h)
            else:
                h, layer_terms[k] = layer.inverse(P, h)
        except NumericalError as exc:
            raise NumericalError(f"layer {k} ({layer.kind}): {exc}", op=exc.op, layer=k) from exc
    zeros = np.zeros(h.shape[-1])
    base = T.gaussian_log_density(h, zeros, zeros)
    total = base + stack.standardization_logdet
    for term in list(layer_terms.values()) + list(decoder_terms.values()):
        total = total + term
    return total, base, layer_terms, decoder_terms


def _rows(stack: FlowStack, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.ndim != 2 or y.shape[1] != stack.input_dim:
        raise ShapeError(f"flow expects rows of dim {stack.input_dim}, found shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise NumericalError("flow input has non-finite entries", layer=0)
    return y


def flow_log_prob(stack: FlowStack, y, batch_size: int = 2048) -> LogLikelihoodBreakdown:
    """log p(y) for rows y (n, p) (or one row), evaluated in chunks, with every term kept."""
    y = _rows(stack, y)
    P = _constants(stack.params)
    bases, totals = [], []
    layers: Dict[int, List[np.ndarray]] = {}
    decoders: Dict[int, List[np.ndarray]] = {}
    for start in range(0, len(y), batch_size):
        _, base, lt, dt = _log_prob_terms(stack, P, y[start:start + batch_size])
        bases.append(base.data)
        for k, v in lt.items():
            layers.setdefault(k, []).append(v.data)
        for k, v in dt.items():
            decoders.setdefault(k, []).append(v.data)
    breakdown = LogLikelihoodBreakdown(
        base=np.concatenate(bases) if bases else np.zeros(0),
        layers={k: np.concatenate(v) for k, v in layers.items()},
        decoders={k: np.concatenate(v) for k, v in decoders.items()},
        standardization=stack.standardization_logdet,
        total=np.zeros(0),
    )
    breakdown.total = breakdown.parts_sum()
    return breakdown


def log_prob(stack: FlowStack, y, batch_size: int = 2048) -> np.ndarray:
    return flow_log_prob(stack, y, batch_size).total


def mean_nll(stack: FlowStack, y, params: Optional[Params] = None, batch_size: int = 2048) -> float:
    y = _rows(stack, y)
    P = _constants(stack.params if params is None else params)
    total = 0.0
    for start in range(0, len(y), batch_size):
        t, _, _, _ = _log_prob_terms(stack, P, y[start:start + batch_size])
        total -= float(np.sum(t.data))
    return total / max(len(y), 1)


def nll_loss(stack: FlowStack, P: Mapping[str, Tensor], y: np.ndarray) -> Tensor:
    total, _, _, _ = _log_prob_terms(stack, P, y)
    return -T.mean(total)


# ----- generative direction ---------------------------------------------------------------
def flow_sample(stack: FlowStack, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw n rows: z_0 ~ N(0, I), then run every layer in the generative direction."""
    P = _constants(stack.params)
    h = Tensor(rng.standard_normal((n, stack.base_dim)))
    for layer in reversed(stack.layers):
        if isinstance(layer, SliceSurjection):
            h = layer.forward(P, h, rng.standard_normal((n, len(layer.dropped))))
        else:
            h, _ = layer.forward(P, h)
    return h.data * stack.scale + stack.shift


# ----- training ---------------------------------------------------------------------------
def standardization_stats(rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    shift = rows.mean(axis=0)
    scale = rows.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return shift, scale


def train_flow(features, config: FlowConfig, rng: Optional[np.random.Generator] = None,
               tag: Optional[str] = None) -> FlowStack:
    """
    Fit a flow to feature rows by AdamW on the mean NLL.

    A val_fraction share of rows is held out; the parameters with the best
    validation NLL are returned and training stops after `patience` epochs
    without improvement.
    """
    rows = np.asarray(getattr(features, "rows", features), dtype=np.float64)
    if rows.ndim != 2 or len(rows) == 0:
        raise ShapeError(f"train_flow needs a non-empty 2-d feature matrix, got shape {rows.shape}")
    rng = rng or np.random.default_rng(config.seed)
    shift, scale = standardization_stats(rows) if config.standardize else (None, None)
    stack = build_flow(rows.shape[1], config, rng, shift, scale)
    tag = tag or f"flow-{stack.kind}"

    order = rng.permutation(len(rows))
    n_val = int(round(config.val_fraction * len(rows))) if len(rows) > 1 else 0
    val, train = rows[order[:n_val]], rows[order[n_val:]]
    opt = AdamW(stack.params, lr=config.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm)

    best_params, best_val, stale, step = dict(stack.params), np.inf, 0, 0
    for epoch in range(config.epochs):
        perm = rng.permutation(len(train))
        losses = []
        for start in range(0, len(perm), config.batch_size):
            batch = train[perm[start:start + config.batch_size]]
            P = parameters(stack.params)
            try:
                loss = nll_loss(stack, P, batch)
                grads = grad(loss, P)
            except NumericalError as exc:
                raise DivergenceError(f"{tag} diverged at step {step}: {exc}", step=step) from exc
            stack.params = opt.step(stack.params, grads)
            losses.append(float(loss.data))
            step += 1
        train_nll = float(np.mean(losses))
        stack.nll_trace.append(train_nll)
        if len(val):
            val_nll = mean_nll(stack, val)
            stack.val_trace.append(val_nll)
        else:
            val_nll = train_nll
        logger.info("[%s] epoch %d train_nll=%.4f val_nll=%.4f", tag, epoch + 1, train_nll, val_nll)
        if val_nll < best_val:
            best_params, best_val, stale = dict(stack.params), val_nll, 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("[%s] early stop after epoch %d (best val_nll=%.4f)", tag, epoch + 1, best_val)
                break

    stack.params = best_params
    stack.final_nll = mean_nll(stack, rows)
    logger.info("[%s] final train nll %.4f", tag, stack.final_nll)
    return stack
