"""The normal-filtering network: multi-scale grouped embedding with channel
attention, cascaded feature-space residual units, regression heads and the
deeply supervised joint loss.

All layers take a leading batch axis: normals (B, N, 3), neighbour index
(B, N, K). Unbatched (N, 3) / (N, K) inputs are accepted by :meth:`DNFNet.forward`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class ModelConfig:
    C: int = 128
    k1: int = 10
    k2: int = 30
    k3: int = 50
    k_res: int = 20
    num_res_units: int = 2
    alpha: float = 0.5
    supervise_intermediate: bool = True
    residual_regularization: bool = True
    grouping_subtraction: bool = True
    attention_ratio: int = 4
    fusion_width: int = 256
    head_width: int = 128

    def __post_init__(self):
        if not (self.k1 < self.k2 < self.k3):
            raise ValueError(f"need k1 < k2 < k3, got {self.k1}, {self.k2}, {self.k3}")
        if self.k1 < 1 or self.C < 1 or self.num_res_units < 1 or self.k_res < 1:
            raise ValueError("C, k1, k_res and num_res_units must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    def check_k(self, K: int) -> None:
        if self.k3 > K:
            raise ValueError(f"k3={self.k3} exceeds the neighbour index width K={K}")

    @property
    def num_heads(self) -> int:
        # with a single unit both heads read its output
        return max(self.num_res_units, 2)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    """``normals`` is the final prediction and ``intermediate`` the first
    deep-supervision output; ``intermediates`` lists all of them in unit
    order. ``residuals[u]`` is unit u's estimated noise feature and
    ``cleaned[u]`` the feature map after subtracting it."""

    normals: Tensor
    intermediates: list
    features: Tensor
    residuals: list = field(default_factory=list)
    cleaned: list = field(default_factory=list)

    @property
    def intermediate(self) -> Tensor:
        return self.intermediates[0]


def _layer_shapes(cfg: ModelConfig) -> dict:
    C = cfg.C
    shapes = {}

    def fc(name, cin, cout):
        shapes[f"{name}.W"] = (cin, cout)
        shapes[f"{name}.b"] = (cout,)

    for lvl, cin in ((1, 6), (2, 2 * C), (3, 2 * C)):
        hid = max(1, cin // cfg.attention_ratio)
        fc(f"level{lvl}.att.fc1", cin, hid)
        fc(f"level{lvl}.att.fc2", hid, cin)
        fc(f"level{lvl}.proj", cin, C)
    fc("fusion.fc1", 3 + 3 * C, cfg.fusion_width)
    fc("fusion.fc2", cfg.fusion_width, C)
    for u in range(1, cfg.num_res_units + 1):
        fc(f"res{u}.fc1", 2 * C, C)
        fc(f"res{u}.fc2", C, C)
    for h in range(1, cfg.num_heads + 1):
        fc(f"head{h}.fc1", C, cfg.head_width)
        fc(f"head{h}.fc2", cfg.head_width, 3)
    return shapes


def init_params(cfg: ModelConfig, seed=0) -> dict:
    """Weights uniform in +-sqrt(6 / fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _layer_shapes(cfg).items():
        if name.endswith(".W"):
            lim = np.sqrt(6.0 / shape[0])
            val = rng.uniform(-lim, lim, size=shape)
        else:
            val = np.zeros(shape)
        params[name] = ag.parameter(val, name=name)
    return params


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in _layer_shapes(cfg).values()))


def residual_unit_size(cfg: ModelConfig) -> int:
    """Scalars added by one more residual unit together with its head."""
    C = cfg.C
    return (2 * C * C + C) + (C * C + C) + (C * cfg.head_width + cfg.head_width) \
        + (cfg.head_width * 3 + 3)


# -- layers ------------------------------------------------------------------

def _fc(params, name, x, act=True):
    y = ag.linear(x, params[f"{name}.W"], params[f"{name}.b"])
    return ag.relu(y) if act else y


def _duplicate(x: Tensor, k: int) -> Tensor:
    """(..., N, C) -> (..., N, k, C) by repeating each row ``k`` times."""
    s = x.shape
    return ag.broadcast_to(ag.reshape(x, s[:-1] + (1, s[-1])), s[:-1] + (k, s[-1]))


def normal_grouping(normals, index, k: int) -> Tensor:
    """Pair each face's normal with those of its first ``k`` neighbours: (..., N, k, 6)."""
    normals = ag._t(normals)
    index = np.asarray(index)
    if k > index.shape[-1]:
        raise ValueError(f"k={k} exceeds index width {index.shape[-1]}")
    nb = ag.gather_rows(normals, index[..., :k])
    return ag.concat([_duplicate(normals, k), nb], axis=-1)


def feature_grouping(feats, index, k: int, subtraction: bool = True) -> Tensor:
    """Centre features paired with neighbour-minus-centre (or raw neighbour)
    features: (..., N, k, 2C)."""
    feats = ag._t(feats)
    index = np.asarray(index)
    if k > index.shape[-1]:
        raise ValueError(f"k={k} exceeds index width {index.shape[-1]}")
    centre = _duplicate(feats, k)
    nb = ag.gather_rows(feats, index[..., :k])
    if subtraction:
        nb = ag.sub(nb, centre)
    return ag.concat([centre, nb], axis=-1)


def feature_extraction(grouped, params, prefix: str) -> Tensor:
    """Channel-attention gated shared projection, max-pooled over neighbours.

    The gate is sigmoid(mlp(mean_k G) + mlp(max_k G)) with one shared
    two-layer mlp; the gated volume goes through a shared rectified
    projection to C channels and is max-pooled over the neighbour axis.
    """
    grouped = ag._t(grouped)
    if grouped.ndim < 3:
        raise ValueError(f"grouped volume must be (..., N, k, C), got {grouped.shape}")
    if grouped.shape[-1] != params[f"{prefix}.att.fc1.W"].shape[0]:
        raise ValueError(f"{prefix}: grouped channels {grouped.shape[-1]} do not match "
                         f"weights {params[f'{prefix}.att.fc1.W'].shape}")

    def mlp(x):
        return _fc(params, f"{prefix}.att.fc2", _fc(params, f"{prefix}.att.fc1", x), act=False)

    avg = ag.reduce_mean(grouped, axis=-2)
    mx = ag.reduce_max(grouped, axis=-2)
    gate = ag.sigmoid(ag.add(mlp(avg), mlp(mx)))
    s = gate.shape
    gated = ag.mul(grouped, ag.reshape(gate, s[:-1] + (1, s[-1])))
    return ag.reduce_max(_fc(params, f"{prefix}.proj", gated), axis=-2)


def multiscale_embedding(normals, index, params, cfg: ModelConfig) -> Tensor:
    normals = ag._t(normals)
    e1 = feature_extraction(normal_grouping(normals, index, cfg.k1), params, "level1")
    e2 = feature_extraction(feature_grouping(e1, index, cfg.k2, cfg.grouping_subtraction),
                            params, "level2")
    e3 = feature_extraction(feature_grouping(e2, index, cfg.k3, cfg.grouping_subtraction),
                            params, "level3")
    x = ag.concat([normals, e1, e2, e3], axis=-1)
    return _fc(params, "fusion.fc2", _fc(params, "fusion.fc1", x))


def feature_knn(feats: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other rows by squared Euclidean distance.

    ``feats`` is (..., N, C). Ties go to the smaller index; with fewer than
    ``k`` other rows the farthest one is repeated.
    """
    f = np.asarray(feats, dtype=np.float64)
    N = f.shape[-2]
    sq = np.sum(f * f, axis=-1)
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * (f @ np.swapaxes(f, -1, -2))
    d = np.maximum(d, 0.0)
    d[..., np.arange(N), np.arange(N)] = np.inf
    kk = min(k, N - 1)
    idx = np.argsort(d, axis=-1, kind="stable")[..., :kk]
    if kk < k:
        idx = np.concatenate([idx, np.repeat(idx[..., -1:], k - kk, axis=-1)], axis=-1)
    return idx


def residual_unit(feats, params, unit: int, k_res: int) -> Tensor:
    """Estimate the noise component of a feature map from its feature-space
    neighbourhoods: (..., N, C) -> (..., N, C)."""
    feats = ag._t(feats)
    if feats.shape[-2] < 2:
        raise ValueError("residual unit needs at least two rows")
    idx = feature_knn(feats.data, k_res)
    grouped = ag.concat([_duplicate(feats, k_res), ag.gather_rows(feats, idx)], axis=-1)
    h = _fc(params, f"res{unit}.fc2", _fc(params, f"res{unit}.fc1", grouped))
    return ag.reduce_max(h, axis=-2)


def regression_head(feats, params, head: int) -> Tensor:
    h = _fc(params, f"head{head}.fc2", _fc(params, f"head{head}.fc1", feats), act=False)
    return ag.row_normalize(h, 1e-12)


def forward(normals, index, params, cfg: ModelConfig) -> ForwardOutput:
    index = np.asarray(index)
    cfg.check_k(index.shape[-1])
    F = multiscale_embedding(normals, index, params, cfg)
    cur = F
    residuals, cleaned = [], []
    for u in range(1, cfg.num_res_units + 1):
        delta = residual_unit(cur, params, u, cfg.k_res)
        cur = ag.sub(cur, delta)
        residuals.append(delta)
        cleaned.append(cur)
    if cfg.num_res_units == 1:
        inter = [regression_head(cleaned[0], params, 1)]
    else:
        inter = [regression_head(c, params, u + 1) for u, c in enumerate(cleaned[:-1])]
    final = regression_head(cleaned[-1], params, cfg.num_heads)
    return ForwardOutput(final, inter, F, residuals, cleaned)


# -- losses --------------------------------------------------------------------

def _per_face_sq(gt, pred):
    gt, pred = ag._t(gt), ag._t(pred)
    if gt.shape != pred.shape or gt.shape[-1] != 3:
        raise ValueError(f"loss: prediction {pred.shape} does not match ground truth {gt.shape}")
    rows = int(np.prod(gt.shape[:-1]))
    return ag.scale(ag.sum_of_squares(ag.sub(gt, pred)), 1.0 / rows)


def loss_deep(final, intermediates, gt, supervise_intermediate=True) -> Tensor:
    """Batch mean of the per-face mean squared normal error of the final
    output plus, when supervised, of every intermediate output."""
    if isinstance(intermediates, Tensor):
        intermediates = [intermediates]
    total = _per_face_sq(gt, final)
    if supervise_intermediate:
        for p in intermediates:
            total = ag.add(total, _per_face_sq(gt, p))
    return total


def loss_residual(residuals) -> Tensor:
    """Sum over units of the mean squared residual-feature entry."""
    total = None
    for r in residuals:
        r = ag._t(r)
        term = ag.scale(ag.sum_of_squares(r), 1.0 / r.data.size)
        total = term if total is None else ag.add(total, term)
    return total if total is not None else Tensor(0.0)


def loss_total(deep, residual, alpha) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return ag.add(deep, ag.scale(residual, alpha))


def compute_loss(out: ForwardOutput, gt, cfg: ModelConfig) -> Tensor:
    deep = loss_deep(out.normals, out.intermediates, gt, cfg.supervise_intermediate)
    if not cfg.residual_regularization:
        return deep
    return loss_total(deep, loss_residual(out.residuals), cfg.alpha)


# -- model wrapper -------------------------------------------------------------

class DNFNet:
    """Parameters plus config; thin object wrapper around the functional layers."""

    def __init__(self, config: ModelConfig | None = None, seed=0, params=None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config, seed)
        self.meta = {}
        expected = _layer_shapes(self.config)
        if set(self.params) != set(expected):
            raise ValueError("parameter names do not match the model config")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, "
                                 f"expected {shape}")

    def parameters(self) -> list:
        return [self.params[k] for k in sorted(self.params)]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def forward(self, normals, index) -> ForwardOutput:
        n = np.asarray(normals.data if isinstance(normals, Tensor) else normals)
        index = np.asarray(index)
        if n.ndim == 2:
            n, index = n[None], index[None]
        dtype = next(iter(self.params.values())).data.dtype
        return forward(Tensor(n, dtype=dtype), index, self.params, self.config)

    def loss(self, out: ForwardOutput, gt) -> Tensor:
        g = np.asarray(gt)
        if g.ndim == 2:
            g = g[None]
        return compute_loss(out, Tensor(g, dtype=out.normals.data.dtype), self.config)

    def predict(self, normals, index) -> np.ndarray:
        out = self.forward(normals, index)
        res = out.normals.data
        return res[0] if np.ndim(normals) == 2 else res

    def astype(self, mode: str) -> "DNFNet":
        dtype = ag._DTYPES[mode]
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def save(self, path, meta=None) -> None:
        """Checkpoint with the model config (and optional patch metadata) in the header."""
        header = json.dumps({"model": asdict(self.config), "meta": meta or self.meta},
                            sort_keys=True)
        ag.save_checkpoint(path, {k: self.params[k].data for k in sorted(self.params)},
                           header.encode("utf-8"))

    @classmethod
    def load(cls, path) -> "DNFNet":
        header, arrays = ag.load_checkpoint(path)
        h = json.loads(header.decode("utf-8"))
        cfg = ModelConfig.from_dict(h["model"])
        params = {k: ag.parameter(v, name=k) for k, v in arrays.items()}
        net = cls(cfg, params=params)
        net.meta = h.get("meta", {})
        return net
