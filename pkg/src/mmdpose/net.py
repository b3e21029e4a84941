"""Small dense-network kit with an exact backward pass.

Architecture: a stem unit, ``num_residual_blocks``
residual blocks of two units each, and an output linear layer. A unit is
linear -> [batch norm] -> ReLU -> dropout. With zero residual blocks the model
collapses to a single linear layer from input to output.

Parameters live in ordered dicts of float64 arrays keyed by layer name.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.9
OUTPUT_ACTIVATIONS = ("linear", "softmax3")


class CacheError(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_dim: int = 256
    num_residual_blocks: int = 2
    use_batch_stats_norm: bool = True
    dropout_rate: float = 0.1
    output_activation: str = "linear"

    def __post_init__(self):
        if min(self.input_dim, self.output_dim, self.hidden_dim) < 1:
            raise ValueError("layer dimensions must be >= 1")
        if self.num_residual_blocks < 0:
            raise ValueError("num_residual_blocks must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}")
        if self.output_activation == "softmax3" and self.output_dim % 3:
            raise ValueError("softmax3 output needs output_dim divisible by 3")

    def to_json(self) -> dict:
        return asdict(self)

    def unit_names(self) -> list[str]:
        if self.num_residual_blocks == 0:
            return []
        return ["stem"] + [f"block{k}.{l}" for k in range(self.num_residual_blocks) for l in (0, 1)]


@dataclass
class MlpModel:
    spec: MlpSpec
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "MlpModel":
        return MlpModel(self.spec, {k: v.copy() for k, v in self.params.items()},
                        {k: v.copy() for k, v in self.running.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def init(spec: MlpSpec, seed: int) -> MlpModel:
    """He-normal weights (variance 2 / fan_in), zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    fan_in = spec.input_dim
    for name in spec.unit_names():
        width = spec.hidden_dim
        params[f"{name}.W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, width))
        if spec.use_batch_stats_norm:
            # a bias before normalisation is cancelled by the mean subtraction
            params[f"{name}.gamma"] = np.ones(width)
            params[f"{name}.beta"] = np.zeros(width)
            running[f"{name}.mean"] = np.zeros(width)
            running[f"{name}.var"] = np.ones(width)
        else:
            params[f"{name}.b"] = np.zeros(width)
        fan_in = width
    params["out.W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, spec.output_dim))
    params["out.b"] = np.zeros(spec.output_dim)
    return MlpModel(spec, params, running)


def softmax3(logits: np.ndarray) -> np.ndarray:
    g = logits.reshape(logits.shape[0], -1, 3)
    g = g - g.max(axis=-1, keepdims=True)
    e = np.exp(g)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(logits.shape)


@dataclass
class Cache:
    train: bool
    x: np.ndarray
    units: dict = field(default_factory=dict)
    block_inputs: list = field(default_factory=list)
    last_hidden: np.ndarray | None = None
    output: np.ndarray | None = None
    param_ids: dict = field(default_factory=dict)

    def relu_masks(self) -> list[np.ndarray]:
        return [u["pre"] > 0 for u in self.units.values()]


def _unit_forward(model: MlpModel, name: str, x, train, rng, dropout):
    spec, p = model.spec, model.params
    h = x @ p[f"{name}.W"]
    u = {"x": x}
    if spec.use_batch_stats_norm:
        if train:
            mu, var = h.mean(axis=0), h.var(axis=0)
            u["batch_mean"], u["batch_var"] = mu, var
        else:
            mu, var = model.running[f"{name}.mean"], model.running[f"{name}.var"]
        inv_std = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (h - mu) * inv_std
        u["xhat"], u["inv_std"] = xhat, inv_std
        pre = xhat * p[f"{name}.gamma"] + p[f"{name}.beta"]
    else:
        pre = h + p[f"{name}.b"]
    u["pre"] = pre
    a = np.maximum(pre, 0.0)
    if train and dropout and spec.dropout_rate > 0:
        if rng is None:
            raise ValueError("train-mode dropout needs a random generator")
        keep = 1.0 - spec.dropout_rate
        mask = (rng.random(a.shape) < keep) / keep
        u["mask"] = mask
        a = a * mask
    return a, u


def forward(model: MlpModel, batch, mode: str = "eval", rng: np.random.Generator | None = None,
            dropout: bool = True):
    """Run the network on a (N, input_dim) batch.

    Returns ``(output, cache)``. ``mode`` is "train" (batch statistics,
    dropout when enabled) or "eval" (running statistics, no dropout).
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    spec = model.spec
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected batch of shape (N, {spec.input_dim}), got {x.shape}")
    train = mode == "train"
    if train and spec.use_batch_stats_norm and spec.num_residual_blocks and x.shape[0] < 2:
        raise ValueError("batch normalisation in train mode needs at least 2 rows")
    cache = Cache(train, x, param_ids={k: id(v) for k, v in model.params.items()})
    h = x
    if spec.num_residual_blocks:
        h, cache.units["stem"] = _unit_forward(model, "stem", h, train, rng, dropout)
        for k in range(spec.num_residual_blocks):
            cache.block_inputs.append(h)
            y, cache.units[f"block{k}.0"] = _unit_forward(model, f"block{k}.0", h, train, rng, dropout)
            y, cache.units[f"block{k}.1"] = _unit_forward(model, f"block{k}.1", y, train, rng, dropout)
            h = h + y
    cache.last_hidden = h
    out = h @ model.params["out.W"] + model.params["out.b"]
    if spec.output_activation == "softmax3":
        out = softmax3(out)
    cache.output = out
    return out, cache


def update_running_stats(model: MlpModel, cache: Cache) -> None:
    """Fold a train-mode forward's batch statistics into the running averages."""
    if not cache.train:
        return
    n = cache.x.shape[0]
    for name, u in cache.units.items():
        if "batch_mean" in u:
            rm, rv = model.running[f"{name}.mean"], model.running[f"{name}.var"]
            unbiased = u["batch_var"] * n / max(n - 1, 1)
            model.running[f"{name}.mean"] = NORM_MOMENTUM * rm + (1 - NORM_MOMENTUM) * u["batch_mean"]
            model.running[f"{name}.var"] = NORM_MOMENTUM * rv + (1 - NORM_MOMENTUM) * unbiased


def _unit_backward(model: MlpModel, name: str, u: dict, da, train: bool, grads: dict):
    spec, p = model.spec, model.params
    if "mask" in u:
        da = da * u["mask"]
    dpre = da * (u["pre"] > 0)
    if spec.use_batch_stats_norm:
        xhat, inv_std = u["xhat"], u["inv_std"]
        grads[f"{name}.gamma"] = (dpre * xhat).sum(axis=0)
        grads[f"{name}.beta"] = dpre.sum(axis=0)
        dxhat = dpre * p[f"{name}.gamma"]
        if train:
            n = dxhat.shape[0]
            dh = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dh = dxhat * inv_std
    else:
        grads[f"{name}.b"] = dpre.sum(axis=0)
        dh = dpre
    grads[f"{name}.W"] = u["x"].T @ dh
    return dh @ p[f"{name}.W"].T


def backward(model: MlpModel, cache: Cache, output_gradient, wrt_logits: bool = False):
    """Reverse pass. Returns ``(param_grads, input_grad)``.

    ``output_gradient`` is taken with respect to the network output; for a
    softmax3 head pass ``wrt_logits=True`` to supply a gradient with
    respect to the pre-softmax logits instead.
    """
    if cache.output is None or cache.param_ids.keys() != model.params.keys() or any(
        cache.param_ids[k] != id(v) for k, v in model.params.items()
    ):
        raise CacheError("cache does not belong to this model's current parameters")
    g = np.asarray(output_gradient, dtype=float)
    if g.shape != cache.output.shape:
        raise ValueError(f"output gradient shape {g.shape} != output shape {cache.output.shape}")
    spec = model.spec
    if spec.output_activation == "softmax3" and not wrt_logits:
        p = cache.output.reshape(g.shape[0], -1, 3)
        gg = g.reshape(p.shape)
        g = (p * (gg - (gg * p).sum(axis=-1, keepdims=True))).reshape(g.shape)
    grads: dict[str, np.ndarray] = {}
    grads["out.W"] = cache.last_hidden.T @ g
    grads["out.b"] = g.sum(axis=0)
    dh = g @ model.params["out.W"].T
    for k in reversed(range(spec.num_residual_blocks)):
        dy = _unit_backward(model, f"block{k}.1", cache.units[f"block{k}.1"], dh, cache.train, grads)
        dy = _unit_backward(model, f"block{k}.0", cache.units[f"block{k}.0"], dy, cache.train, grads)
        dh = dh + dy
    if spec.num_residual_blocks:
        dh = _unit_backward(model, "stem", cache.units["stem"], dh, cache.train, grads)
    return {k: grads[k] for k in model.params}, dh


def ema_update(average: MlpModel, live: MlpModel, decay: float) -> None:
    """Exponential moving average of parameters and running statistics, in place."""
    for store, src in ((average.params, live.params), (average.running, live.running)):
        for k, v in src.items():
            store[k] = decay * store[k] + (1.0 - decay) * v


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: str = ""

    def __float__(self):
        return self.max_rel_error


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(model: MlpModel, batch, loss_fn, fd_step: float = 1e-5, max_per_param: int = 12,
               seed: int = 0, analytic: tuple | None = None, check_input: bool = True,
               mode: str = "train") -> GradCheckResult:
    """Compare analytic gradients with central differences.

    ``loss_fn(output) -> (loss, d loss / d output)``. Dropout is disabled.
    A random subset of at most ``max_per_param`` entries of every parameter
    array (and of the input, when ``check_input``) is perturbed by
    ``+-fd_step``; entries whose perturbation flips any ReLU are skipped and
    replaced, since the loss is not differentiable across the kink.
    ``analytic`` may supply precomputed ``(param_grads, input_grad)``.
    """
    x = np.asarray(batch, dtype=float)
    if analytic is None:
        out, cache = forward(model, x, mode, dropout=False)
        _, g = loss_fn(out)
        analytic = backward(model, cache, g)
    pgrads, xgrad = analytic
    rng = np.random.default_rng(seed)

    def loss_and_masks(m, xx):
        o, c = forward(m, xx, mode, dropout=False)
        return loss_fn(o)[0], c.relu_masks()

    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    targets = [(k, model.params[k], pgrads[k]) for k in model.params]
    if check_input:
        targets.append(("input", x, xgrad))
    for name, arr, grad in targets:
        order = rng.permutation(arr.size)
        taken = 0
        for flat in order:
            if taken >= max_per_param:
                break
            idx = np.unravel_index(flat, arr.shape)
            trial = model.copy() if name != "input" else model
            target = trial.params[name] if name != "input" else x.copy()
            orig = target[idx]
            target[idx] = orig + fd_step
            lp, mp = loss_and_masks(trial, target if name == "input" else x)
            target[idx] = orig - fd_step
            lm, mm = loss_and_masks(trial, target if name == "input" else x)
            if any(np.any(a != b) for a, b in zip(mp, mm)):
                skipped += 1
                continue
            numeric = (lp - lm) / (2 * fd_step)
            err = relative_error(float(grad[idx]), numeric)
            if err > worst:
                worst, worst_name = err, f"{name}{[int(i) for i in idx]}"
            checked += 1
            taken += 1
    return GradCheckResult(worst, checked, skipped, worst_name)


# ---------------------------------------------------------------------------
# adaptive moment optimiser
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: MlpModel, **kw) -> "OptimState":
        s = cls(**kw)
        s.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        s.v = {k: np.zeros_like(v) for k, v in model.params.items()}
        return s

    def to_json(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step}


def opt_step(model: MlpModel, grads: dict, state: OptimState):
    """One bias-corrected Adam update, in place. Returns ``(model, state)``.

    Raises ``NonFiniteGradient`` before touching anything if any gradient
    entry is NaN or infinite.
    """
    for k, g in grads.items():
        if g.shape != model.params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    if not state.m:
        state.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        state.v = {k: np.zeros_like(v) for k, v in model.params.items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        model.params[k] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


def clip_grad_norm(grads: dict, max_norm: float | None):
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``.

    Returns ``(grads, norm before clipping)``. ``None`` disables clipping and
    the input dict is returned untouched.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or not np.isfinite(norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
