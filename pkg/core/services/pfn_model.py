"""
In-context transformer for preference-conditioned aggregation posteriors

The network reads a trajectory of (x, y) pairs and a set of query inputs, each
query tagged with a preference, and emits logits over the bins of a Riemann
support: a piecewise-constant density over the aggregation target g with
half-normal tails.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import norm

from core.schemas.schemas import ModelConfig
from helpers.errors import CheckpointError, DegenerateSupport, DimensionError, ShapeError
from helpers.persistence import read_checkpoint, write_checkpoint

logger = logging.getLogger(__name__)

MIN_SUPPORT_SAMPLES = 100_000
QUERY_CHUNK = 8192
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))


@dataclass(frozen=True)
class RiemannSupport:
    """
    Bin layout of the Riemann head

    B - 1 strictly increasing boundaries split the line into B bins; bin 0 and
    bin B - 1 are half-normal tails with a shared scale.
    """
    boundaries: np.ndarray
    tail_scale: float

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.ndim != 1 or b.size < 1:
            raise DegenerateSupport("a support needs at least one boundary")
        if np.any(np.diff(b) <= 0):
            raise DegenerateSupport("support boundaries must be strictly increasing")
        if not self.tail_scale > 0:
            raise DegenerateSupport(f"tail scale must be positive, got {self.tail_scale}")
        object.__setattr__(self, "boundaries", b)

    @property
    def n_bins(self) -> int:
        return self.boundaries.size + 1

    @property
    def widths(self) -> np.ndarray:
        """Interior bin widths, shape (B - 2,)"""
        return np.diff(self.boundaries)

    def to_dict(self) -> Dict[str, Any]:
        return {"boundaries": self.boundaries.tolist(), "tail_scale": float(self.tail_scale)}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "RiemannSupport":
        return cls(boundaries=np.asarray(payload["boundaries"], dtype=float), tail_scale=float(payload["tail_scale"]))


@dataclass
class PosteriorHistogram:
    """Predicted distributions over g, probabilities of shape (..., B)"""
    support: RiemannSupport
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.shape[-1] != self.support.n_bins:
            raise ShapeError(f"histogram has {p.shape[-1]} bins, support has {self.support.n_bins}")
        self.probabilities = p

    def __len__(self) -> int:
        return 1 if self.probabilities.ndim == 1 else self.probabilities.shape[0]

    def __getitem__(self, index) -> "PosteriorHistogram":
        return PosteriorHistogram(self.support, self.probabilities[index])


class HistogramStats(NamedTuple):
    mean: np.ndarray
    std: np.ndarray
    cdf: Callable[[Any], np.ndarray]
    ei_partial: Callable[[Any], np.ndarray]


def build_riemann_support(prior_samples, n_bins: int) -> RiemannSupport:
    """
    Place B - 1 boundaries at the equal-mass quantiles of prior aggregation samples

    The tail scale is twice the 95th percentile of the pooled overshoots beyond
    the two outer boundaries.

    Args:
        prior_samples: Aggregation targets drawn from the synthetic prior
        n_bins: Number of bins B >= 2

    Returns:
        The RiemannSupport

    Raises:
        DegenerateSupport: If the quantiles collapse
    """
    samples = np.asarray(prior_samples, dtype=float).ravel()
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    if samples.size < MIN_SUPPORT_SAMPLES:
        logger.warning(f"Building a support from only {samples.size} prior samples")

    boundaries = np.quantile(samples, np.arange(1, n_bins) / n_bins)
    if np.any(np.diff(boundaries) <= 0):
        logger.error("Riemann boundaries collapsed; prior samples are near-constant")
        raise DegenerateSupport(f"equal-mass quantiles are not strictly increasing for B={n_bins}")

    overshoot = np.concatenate([boundaries[0] - samples[samples < boundaries[0]],
                                samples[samples > boundaries[-1]] - boundaries[-1]])
    if overshoot.size == 0 or np.percentile(overshoot, 95) <= 0:
        raise DegenerateSupport("no prior mass beyond the outer boundaries")
    tail_scale = 2.0 * float(np.percentile(overshoot, 95))
    logger.info(f"Built Riemann support: B={n_bins}, range [{boundaries[0]:.4f}, {boundaries[-1]:.4f}], tail scale {tail_scale:.4f}")
    return RiemannSupport(boundaries=boundaries, tail_scale=tail_scale)


def _halfnormal_excess(c: np.ndarray, s: float) -> np.ndarray:
    """E[(t - c)_+] for t ~ HalfNormal(s) and c >= 0"""
    z = c / s
    return 2.0 * (s * norm.pdf(z) - c * norm.sf(z))


def _stack_bins(left: np.ndarray, inner: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Concatenate per-bin terms (..., 1), (..., B-2), (..., 1) after broadcasting the leading axes"""
    lead = np.broadcast_shapes(left.shape[:-1], inner.shape[:-1], right.shape[:-1])
    return np.concatenate([
        np.broadcast_to(left, lead + left.shape[-1:]),
        np.broadcast_to(inner, lead + inner.shape[-1:]),
        np.broadcast_to(right, lead + right.shape[-1:]),
    ], axis=-1)


def histogram_stats(h: PosteriorHistogram) -> HistogramStats:
    """
    Closed-form summaries of a batch of histograms

    Interior bins are uniform within the bin; the tail bins are half-normal
    with the support's tail scale, reflected below the first boundary.

    Returns:
        HistogramStats with mean and std arrays of shape probabilities.shape[:-1],
        plus cdf(v) and ei_partial(g_star) callables broadcasting v / g_star
        against that shape
    """
    sup = h.support
    p = h.probabilities
    b = sup.boundaries
    s = sup.tail_scale
    lo, hi = b[:-1], b[1:]

    first = np.concatenate([[b[0] - s * _SQRT_2_OVER_PI], 0.5 * (lo + hi), [b[-1] + s * _SQRT_2_OVER_PI]])
    second = np.concatenate([
        [b[0] ** 2 - 2 * b[0] * s * _SQRT_2_OVER_PI + s ** 2],
        (lo ** 2 + lo * hi + hi ** 2) / 3.0,
        [b[-1] ** 2 + 2 * b[-1] * s * _SQRT_2_OVER_PI + s ** 2],
    ])
    mean = p @ first
    std = np.sqrt(np.maximum(p @ second - mean ** 2, 0.0))

    def cdf(v) -> np.ndarray:
        v = np.asarray(v, dtype=float)[..., None]
        left = np.where(v < b[0], 2.0 * norm.cdf(-(b[0] - v) / s), 1.0)
        inner = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
        right = np.where(v > b[-1], 2.0 * norm.cdf((v - b[-1]) / s) - 1.0, 0.0)
        mass = _stack_bins(left, inner, right)
        return np.clip(np.sum(p * mass, axis=-1), 0.0, 1.0)

    def ei_partial(g_star) -> np.ndarray:
        g = np.asarray(g_star, dtype=float)[..., None]
        # left tail: g = b0 - t
        c_left = np.maximum(b[0] - g, 0.0)
        left = np.where(g < b[0], c_left - s * _SQRT_2_OVER_PI + _halfnormal_excess(c_left, s), 0.0)
        # interior bins, uniform on [lo, hi]
        inner = np.where(
            g <= lo, 0.5 * (lo + hi) - g,
            np.where(g >= hi, 0.0, np.square(hi - g) / (2.0 * (hi - lo))),
        )
        # right tail: g = b_last + t
        c_right = np.maximum(g - b[-1], 0.0)
        right = np.where(g <= b[-1], b[-1] - g + s * _SQRT_2_OVER_PI, _halfnormal_excess(c_right, s))
        per_bin = _stack_bins(left, inner, right)
        return np.maximum(np.sum(p * per_bin, axis=-1), 0.0)

    return HistogramStats(mean=mean, std=std, cdf=cdf, ei_partial=ei_partial)


def tail_log_density(overshoot: torch.Tensor, scale: float) -> torch.Tensor:
    """Log-density of a half-normal with the given scale at overshoot >= 0"""
    return float(np.log(_SQRT_2_OVER_PI / scale)) - 0.5 * torch.square(overshoot / scale)


def cross_entropy_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    support: RiemannSupport,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Negative log-density of the targets under the predicted Riemann distribution

    Interior bins contribute -log(p_bin / width_bin); tail bins contribute
    -log p_bin minus the half-normal log-density of the overshoot.

    Args:
        logits: Shape (..., B)
        target: Aggregation targets, shape logits.shape[:-1]
        support: Bin layout
        mask: Positions that enter the mean (query positions); all when omitted

    Returns:
        Scalar mean loss over the selected positions
    """
    if logits.shape[:-1] != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} do not match targets {tuple(target.shape)}")
    boundaries = torch.as_tensor(support.boundaries, dtype=logits.dtype, device=logits.device)
    n_bins = support.n_bins
    log_p = F.log_softmax(logits, dim=-1)

    target = target.to(logits.dtype).contiguous()
    bucket = torch.searchsorted(boundaries, target, right=True)
    log_p_bucket = log_p.gather(-1, bucket.unsqueeze(-1)).squeeze(-1)

    widths = torch.ones(n_bins, dtype=logits.dtype, device=logits.device)
    if n_bins > 2:
        widths[1:-1] = boundaries[1:] - boundaries[:-1]
    log_density = log_p_bucket - torch.log(widths[bucket])

    left = bucket == 0
    right = bucket == n_bins - 1
    overshoot = torch.where(left, boundaries[0] - target, target - boundaries[-1]).clamp_min(0.0)
    tail = log_p_bucket + tail_log_density(overshoot, support.tail_scale)
    log_density = torch.where(left | right, tail, log_density)

    nll = -log_density
    if mask is not None:
        nll = nll[mask]
    return nll.mean()


def scale_padded(values: torch.Tensor, dims: torch.Tensor, width: int) -> torch.Tensor:
    """
    Scale zero-padded vectors by width / k, k being each row's true dimension

    Args:
        values: Shape (batch, L, width) or (batch, width)
        dims: True dimension per batch element, shape (batch,)
        width: Padded width K

    Returns:
        The scaled tensor
    """
    factor = (width / dims.to(values.dtype)).view(-1, *([1] * (values.dim() - 1)))
    return values * factor


def pad_features(values: np.ndarray, width: int) -> np.ndarray:
    """Zero-pad the last axis to width"""
    values = np.asarray(values, dtype=float)
    k = values.shape[-1]
    if k > width:
        raise DimensionError(f"dimension {k} exceeds the model's padded width {width}")
    pad = [(0, 0)] * (values.ndim - 1) + [(0, width - k)]
    return np.pad(values, pad)


def build_attention_mask(n_traj: int, n_query: int) -> torch.Tensor:
    """
    Allowed-attention matrix for a trajectory followed by queries

    Every row, trajectory or query, may attend to the trajectory columns only.

    Returns:
        Bool tensor of shape (n_traj + n_query, n_traj + n_query), True = may attend
    """
    if n_traj < 1 or n_query < 0:
        raise ShapeError(f"invalid token counts n_traj={n_traj}, n_query={n_query}")
    allowed = torch.zeros(n_traj + n_query, n_traj + n_query, dtype=torch.bool)
    allowed[:, :n_traj] = True
    return allowed


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with a GELU feed-forward"""

    def __init__(self, embed_dim: int, n_heads: int, ff_hidden_dim: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm_attn = nn.LayerNorm(embed_dim)
        self.qkv = nn.Linear(embed_dim, 3 * embed_dim)
        self.out = nn.Linear(embed_dim, embed_dim)
        self.norm_ff = nn.LayerNorm(embed_dim)
        self.ff = nn.Sequential(nn.Linear(embed_dim, ff_hidden_dim), nn.GELU(), nn.Linear(ff_hidden_dim, embed_dim))

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        batch, length, width = t.shape
        return t.view(batch, length, self.n_heads, width // self.n_heads).transpose(1, 2)

    def forward(self, h: torch.Tensor, attn_mask: Optional[torch.Tensor] = None, n_ctx: Optional[int] = None) -> torch.Tensor:
        """
        Args:
            h: Tokens, shape (batch, L, E)
            attn_mask: Bool mask (batch, 1, L, L), True = may attend
            n_ctx: When given, keys and values are the first n_ctx tokens and no mask is used
        """
        batch, length, width = h.shape
        q, k, v = self.qkv(self.norm_attn(h)).chunk(3, dim=-1)
        if n_ctx is not None:
            k, v = k[:, :n_ctx], v[:, :n_ctx]
            attn_mask = None
        attended = F.scaled_dot_product_attention(self._heads(q), self._heads(k), self._heads(v), attn_mask=attn_mask)
        h = h + self.out(attended.transpose(1, 2).reshape(batch, length, width))
        return h + self.ff(self.norm_ff(h))


class AggregationTransformer(nn.Module):
    """
    Transformer encoder over trajectory and query tokens, without positional encodings

    Trajectory token i is enc_x(x_i) + enc_y(y_i); a query token is
    enc_x(x) + enc_pref(lambda). Inputs are zero-padded to K_x / K_y and scaled
    by K / k before encoding.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        E = config.embed_dim
        self.enc_x = nn.Linear(config.max_features, E)
        self.enc_y = nn.Linear(config.max_objectives, E)
        self.enc_pref = nn.Linear(config.max_objectives, E)
        self.blocks = nn.ModuleList(
            [TransformerBlock(E, config.n_heads, config.ff_hidden_dim) for _ in range(config.n_layers)]
        )
        self.norm_out = nn.LayerNorm(E)
        self.head = nn.Linear(E, config.n_bins)

    def encode_tokens(
        self,
        x: torch.Tensor,
        y: torch.Tensor,
        preference: torch.Tensor,
        n_traj: torch.Tensor,
        d: torch.Tensor,
        m: torch.Tensor,
    ) -> torch.Tensor:
        """
        Embed padded inputs; positions below n_traj are trajectory tokens

        Args:
            x: (batch, L, K_x) zero-padded inputs
            y: (batch, L, K_y) zero-padded normalized objectives (ignored at query positions)
            preference: (batch, K_y) or (batch, L, K_y) zero-padded preferences
            n_traj: (batch,) trajectory lengths
            d: (batch,) true feature dimensions
            m: (batch,) true objective dimensions
        """
        cfg = self.config
        if preference.dim() == 2:
            preference = preference[:, None, :].expand(-1, x.shape[1], -1)
        x_tok = self.enc_x(scale_padded(x, d, cfg.max_features))
        y_tok = self.enc_y(scale_padded(y, m, cfg.max_objectives))
        p_tok = self.enc_pref(scale_padded(preference, m, cfg.max_objectives))
        positions = torch.arange(x.shape[1], device=x.device)
        is_traj = (positions[None, :] < n_traj[:, None]).unsqueeze(-1)
        return x_tok + torch.where(is_traj, y_tok, p_tok)

    def _check_shapes(self, x, y, preference, n_traj, d, m) -> None:
        cfg = self.config
        batch, length = x.shape[0], x.shape[1]
        if x.dim() != 3 or x.shape[-1] != cfg.max_features:
            raise ShapeError(f"x must be (batch, L, {cfg.max_features}), got {tuple(x.shape)}")
        if y.shape[:2] != x.shape[:2] or y.shape[-1] != cfg.max_objectives:
            raise ShapeError(f"y {tuple(y.shape)} does not match x {tuple(x.shape)}")
        if preference.shape[0] != batch or preference.shape[-1] != cfg.max_objectives:
            raise ShapeError(f"preference {tuple(preference.shape)} does not match batch {batch}")
        if preference.dim() == 3 and preference.shape[1] != length:
            raise ShapeError(f"per-token preference {tuple(preference.shape)} does not match length {length}")
        for name, t in (("n_traj", n_traj), ("d", d), ("m", m)):
            if t.shape != (batch,):
                raise ShapeError(f"{name} must have shape ({batch},), got {tuple(t.shape)}")

    def forward(
        self,
        x: torch.Tensor,
        y: torch.Tensor,
        preference: torch.Tensor,
        n_traj: torch.Tensor,
        d: torch.Tensor,
        m: torch.Tensor,
        n_ctx: Optional[int] = None,
    ) -> torch.Tensor:
        """
        Logits over the B bins for every position

        Args:
            x, y, preference, n_traj, d, m: As in encode_tokens
            n_ctx: Shared trajectory length for the whole batch; attention then
                reads keys from the first n_ctx tokens only, which is equivalent to
                the trajectory mask and cheaper for many queries

        Returns:
            Logits of shape (batch, L, B)

        Raises:
            ShapeError: On mismatched batch or token dimensions
        """
        self._check_shapes(x, y, preference, n_traj, d, m)
        h = self.encode_tokens(x, y, preference, n_traj, d, m)
        attn_mask = None
        if n_ctx is None:
            length = x.shape[1]
            attn_mask = torch.stack(
                [build_attention_mask(int(n), length - int(n)) for n in n_traj.tolist()]
            ).to(x.device).unsqueeze(1)
        for block in self.blocks:
            h = block(h, attn_mask=attn_mask, n_ctx=n_ctx)
        return self.head(self.norm_out(h))


@dataclass
class PosteriorModel:
    """A trained network together with its Riemann support"""
    network: AggregationTransformer
    support: RiemannSupport
    device: str = "cpu"
    header: Dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.network.config

    def parameter_snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.network.state_dict().items()}


def predict_logits(
    model: PosteriorModel,
    traj_x: np.ndarray,
    traj_y: np.ndarray,
    query_x: np.ndarray,
    preferences: np.ndarray,
) -> np.ndarray:
    """
    Query logits for one trajectory, in chunks of QUERY_CHUNK queries

    Args:
        model: Trained model
        traj_x: (n, d) trajectory inputs in the unit cube
        traj_y: (n, m) normalized trajectory objectives
        query_x: (q, d) query inputs
        preferences: (m,) shared or (q, m) per-query preferences

    Returns:
        Logits of shape (q, B)

    Raises:
        DimensionError: If d or m exceed the padded widths, or the inputs disagree on d / m
        ShapeError: If the trajectory length is outside 1..N_max - 1
    """
    cfg = model.config
    traj_x = np.atleast_2d(np.asarray(traj_x, dtype=float))
    traj_y = np.atleast_2d(np.asarray(traj_y, dtype=float))
    query_x = np.atleast_2d(np.asarray(query_x, dtype=float))
    n, d = traj_x.shape
    m = traj_y.shape[1]
    if traj_y.shape[0] != n:
        raise ShapeError(f"trajectory has {n} inputs but {traj_y.shape[0]} observations")
    if not 1 <= n <= cfg.max_sample_length - 1:
        raise ShapeError(f"trajectory length {n} outside 1..{cfg.max_sample_length - 1}")
    if query_x.shape[1] != d:
        raise DimensionError(f"query dimension {query_x.shape[1]} differs from trajectory dimension {d}")
    prefs = np.asarray(preferences, dtype=float)
    if prefs.shape[-1] != m:
        raise DimensionError(f"preference has {prefs.shape[-1]} components for m={m}")
    prefs = np.broadcast_to(prefs, (query_x.shape[0], m))

    tx = pad_features(traj_x, cfg.max_features)
    ty = pad_features(traj_y, cfg.max_objectives)
    net = model.network
    dtype = next(net.parameters()).dtype

    def as_tensor(a):
        return torch.as_tensor(a, dtype=dtype, device=model.device)

    dims = torch.tensor([d], device=model.device)
    objs = torch.tensor([m], device=model.device)
    n_traj = torch.tensor([n], device=model.device)

    out = []
    with torch.no_grad():
        for start in range(0, query_x.shape[0], QUERY_CHUNK):
            qx = pad_features(query_x[start:start + QUERY_CHUNK], cfg.max_features)
            qp = pad_features(prefs[start:start + QUERY_CHUNK], cfg.max_objectives)
            x = as_tensor(np.concatenate([tx, qx])[None])
            y = as_tensor(np.concatenate([ty, np.zeros((qx.shape[0], cfg.max_objectives))])[None])
            p = as_tensor(np.concatenate([np.zeros((n, cfg.max_objectives)), qp])[None])
            logits = net(x, y, p, n_traj, dims, objs, n_ctx=n)
            out.append(logits[0, n:].double().cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, cfg.n_bins))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_posterior(
    model: PosteriorModel,
    traj_x: np.ndarray,
    traj_y: np.ndarray,
    query_x: np.ndarray,
    preference: np.ndarray,
) -> PosteriorHistogram:
    """
    Aggregation posterior for every query point in a single forward pass

    Args:
        model: Trained model
        traj_x: (n, d) trajectory inputs
        traj_y: (n, m) trajectory objectives, already normalized
        query_x: (q, d) query inputs
        preference: (m,) or (q, m) preferences

    Returns:
        PosteriorHistogram with probabilities of shape (q, B)
    """
    logits = predict_logits(model, traj_x, traj_y, query_x, preference)
    return PosteriorHistogram(model.support, softmax(logits))


def init_model(config: ModelConfig, support: RiemannSupport, seed: int = 0, device: str = "cpu") -> PosteriorModel:
    """Freshly initialized network; torch's initializer is seeded from seed"""
    generator_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    network = AggregationTransformer(config).to(device)
    torch.random.set_rng_state(generator_state)
    logger.info(f"Initialized model with {sum(p.numel() for p in network.parameters())} parameters")
    return PosteriorModel(network=network, support=support, device=device)


def save_checkpoint(
    path: str,
    model: PosteriorModel,
    header: Optional[Dict[str, Any]] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> None:
    """
    Write model weights, support and (optionally) Adam state to a checkpoint container

    Args:
        path: Destination file
        model: Model to store
        header: Extra JSON metadata (training step, config, ...)
        optimizer: Adam optimizer whose moments are stored for resuming
    """
    tensors = {f"param.{k}": v.detach().cpu().numpy() for k, v in model.network.state_dict().items()}
    meta = dict(header or {})
    meta["model"] = model.config.model_dump()
    meta["support"] = model.support.to_dict()
    if optimizer is not None:
        names = dict(zip((id(p) for p in model.network.parameters()), (n for n, _ in model.network.named_parameters())))
        adam_steps = {}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = names[id(p)]
                tensors[f"adam.exp_avg.{name}"] = state["exp_avg"].detach().cpu().numpy()
                tensors[f"adam.exp_avg_sq.{name}"] = state["exp_avg_sq"].detach().cpu().numpy()
                adam_steps[name] = int(state["step"])
        meta["adam_steps"] = adam_steps
    write_checkpoint(path, meta, tensors)


@dataclass
class LoadedCheckpoint:
    model: PosteriorModel
    header: Dict[str, Any]
    optimizer_tensors: Dict[str, np.ndarray]


def load_checkpoint(path: str, device: str = "cpu") -> LoadedCheckpoint:
    """
    Rebuild a PosteriorModel from a checkpoint container

    Raises:
        CheckpointIOError: If the file cannot be read
        CheckpointError: If the header or tensors do not describe a valid model
    """
    header, tensors = read_checkpoint(path)
    try:
        config = ModelConfig(**header["model"])
        support = RiemannSupport.from_dict(header["support"])
    except (KeyError, TypeError, ValueError, DegenerateSupport) as e:
        raise CheckpointError(f"Checkpoint {path} has an invalid header: {e}") from e

    network = AggregationTransformer(config)
    state = {k[len("param."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("param.")}
    try:
        network.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint {path} does not match its model config: {e}") from e
    network.to(device).eval()
    optimizer_tensors = {k: v for k, v in tensors.items() if k.startswith("adam.")}
    logger.info(f"Loaded checkpoint {path} (B={support.n_bins}, layers={config.n_layers})")
    return LoadedCheckpoint(
        model=PosteriorModel(network=network, support=support, device=device, header=header),
        header=header,
        optimizer_tensors=optimizer_tensors,
    )


def restore_optimizer(optimizer: torch.optim.Optimizer, model: PosteriorModel, loaded: LoadedCheckpoint) -> None:
    """Put stored Adam moments back into a freshly built optimizer"""
    steps = loaded.header.get("adam_steps", {})
    for name, p in model.network.named_parameters():
        key = f"adam.exp_avg.{name}"
        if key not in loaded.optimizer_tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(steps.get(name, 0))),
            "exp_avg": torch.from_numpy(loaded.optimizer_tensors[key]).to(p.device, p.dtype),
            "exp_avg_sq": torch.from_numpy(loaded.optimizer_tensors[f"adam.exp_avg_sq.{name}"]).to(p.device, p.dtype),
        }
