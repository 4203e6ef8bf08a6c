"""Goal-conditioned actor-critic dispatch policy learned from oracle
trajectories, with offline and online operation procedures.

The actor maps a fixed window of the last K hours of (carbon-to-go,
return-to-go, state, action) tuples, the current goals and state, and the
normalized design token to a diagonal Gaussian over the next action.  The
critic maps the last K+1 hours of (state, action, carbon, reward) tuples
plus the design token and the renewable-trend token to a Gaussian over the
current (return-to-go, carbon-to-go) pair.

Both heads are feed-forward networks on the flattened context (width 256,
ReLU), trained by negative log-likelihood with decoupled-weight-decay Adam,
linear learning-rate warmup, and an instance-level train/validation split.
Ratios sampled outside [0, 1] are clamped rather than squashed, keeping the
likelihood exact on the unclamped targets.

Operation follows a sample-screen-select loop: sample N candidate actions,
evaluate each through the plant step, ask the critic for goal predictions,
then pick the highest predicted return among candidates whose predicted
carbon-to-go is non-positive (falling back to the unconstrained best, and
to a clamped zero action when no candidate is plant-feasible).  Online, the
trend token is refreshed by prefix-matching against a pregenerated scenario
pool, and goal predictions aggregate over the matched token set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .params import TechnicalParams
from .plant import (
    SystemDesign, Trajectory, assemble_trajectory, default_initial_state,
    repair_action_arrays, step_arrays,
)
from .scenarios import Scenario, condition_on_prefix

STATE_KEYS = ("p_r", "g", "soc", "h")
ACTION_KEYS = ("b", "p_pem", "f_u", "f_s")


# ---------------------------------------------------------------------------
# normalization

@dataclass
class Normalizer:
    """Per-quantity affine normalization; statistics come from the training
    split only."""

    mean: dict[str, float]
    std: dict[str, float]

    def normalize(self, key: str, x):
        return (np.asarray(x, dtype=float) - self.mean[key]) / self.std[key]

    def denormalize(self, key: str, z):
        return self.mean[key] + np.asarray(z, dtype=float) * self.std[key]

    def normalize_vec(self, keys, x):
        x = np.asarray(x, dtype=float)
        mean = np.array([self.mean[k] for k in keys])
        std = np.array([self.std[k] for k in keys])
        return (x - mean) / std

    def denormalize_vec(self, keys, z):
        z = np.asarray(z, dtype=float)
        mean = np.array([self.mean[k] for k in keys])
        std = np.array([self.std[k] for k in keys])
        return mean + z * std

    @classmethod
    def fit(cls, series: dict[str, np.ndarray], floor: float = 1e-8) -> "Normalizer":
        mean = {k: float(np.mean(v)) for k, v in series.items()}
        std = {k: max(float(np.std(v)), floor) for k, v in series.items()}
        return cls(mean=mean, std=std)


# ---------------------------------------------------------------------------
# feed-forward nets

def _relu(x):
    return np.maximum(x, 0.0)


def _softplus(x):
    return np.logaddexp(x, 0.0)


class Mlp:
    """Plain fully connected net with manual gradients."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int, seed: int):
        rng = np.random.default_rng(seed)
        sizes = (in_dim, *hidden, out_dim)
        self.weights = []
        self.biases = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
            self.biases.append(np.zeros(b))

    @property
    def parameters(self):
        return self.weights + self.biases

    def forward(self, x, cache: list | None = None):
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if cache is not None:
                cache.append(h)
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = _relu(h)
        return h

    def backward(self, cache, grad_out):
        """Gradient of a scalar loss w.r.t. parameters given d(loss)/d(output)."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        grad = grad_out
        for i in reversed(range(len(self.weights))):
            h_in = cache[i]
            if i < len(self.weights) - 1:
                # grad arrives post-ReLU of layer i output
                pre = h_in @ self.weights[i] + self.biases[i]
                grad = grad * (pre > 0.0)
            grads_w[i] = h_in.T @ grad
            grads_b[i] = grad.sum(axis=0)
            if i > 0:
                grad = grad @ self.weights[i].T
        return grads_w + grads_b


class AdamW:
    """Adam with decoupled weight decay and linear warmup."""

    def __init__(self, params, lr, weight_decay, warmup_steps,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup = max(warmup_steps, 1)
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, grads):
        self.step_count += 1
        b1, b2 = self.betas
        lr_t = self.lr * min(1.0, self.step_count / self.warmup)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.step_count)
            vhat = v / (1 - b2**self.step_count)
            p -= lr_t * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)


class GaussianHeadNet:
    """MLP whose output splits into a mean vector and diagonal stddevs
    (softplus plus a floor, so stddevs stay positive)."""

    def __init__(self, in_dim: int, hidden, target_dim: int, seed: int,
                 std_floor: float = 1e-4):
        self.net = Mlp(in_dim, tuple(hidden), 2 * target_dim, seed)
        self.target_dim = target_dim
        self.std_floor = std_floor

    def forward(self, x):
        out = self.net.forward(x)
        mu = out[:, : self.target_dim]
        std = _softplus(out[:, self.target_dim:]) + self.std_floor
        return mu, std

    def nll(self, x, y) -> float:
        mu, std = self.forward(x)
        z = (y - mu) / std
        per = 0.5 * z**2 + np.log(std) + 0.5 * np.log(2 * np.pi)
        return float(per.sum(axis=1).mean())

    def nll_step(self, x, y):
        """One loss evaluation with parameter gradients."""
        cache = []
        out = self.net.forward(x, cache)
        d = self.target_dim
        mu = out[:, :d]
        raw = out[:, d:]
        std = _softplus(raw) + self.std_floor
        z = (y - mu) / std
        n = len(x)
        loss = float((0.5 * z**2 + np.log(std) + 0.5 * np.log(2 * np.pi))
                     .sum(axis=1).mean())
        grad_mu = -(z / std) / n
        grad_std = (1.0 / std - z**2 / std) / n
        grad_raw = grad_std * _sigmoid(raw)
        grad_out = np.concatenate([grad_mu, grad_raw], axis=1)
        return loss, self.net.backward(cache, grad_out)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# hyperparameters and model containers

@dataclass(frozen=True)
class AgentHyperparams:
    context_len: int = 24
    hidden: tuple[int, ...] = (256, 256)
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 10_000
    batch_size: int = 64
    epochs: int = 100
    actor_epochs: int | None = None    # per-head overrides; default: epochs
    critic_epochs: int | None = None
    std_floor: float = 1e-4
    val_fraction: float = 0.25
    actor_use_design: bool = True
    critic_use_design: bool = True
    critic_use_trend: bool = True


@dataclass(frozen=True)
class BcHyperparams:
    hidden: tuple[int, ...] = (256, 256, 256, 128)
    lr: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    val_fraction: float = 0.25


@dataclass
class AgentModel:
    actor: GaussianHeadNet
    critic: GaussianHeadNet
    norm: Normalizer
    hyper: AgentHyperparams
    e_dim: int
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def context_len(self) -> int:
        return self.hyper.context_len


@dataclass
class BaselineModel:
    net: Mlp
    norm: Normalizer
    hyper: BcHyperparams
    seed: int
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# training-set assembly

def _traj_series(inst) -> dict[str, np.ndarray]:
    tr = inst.trajectory
    return {
        "p_r": tr.p_r, "g": tr.g, "soc": tr.soc, "h": tr.h,
        "b": tr.b, "p_pem": tr.p_pem, "f_u": tr.f_u, "f_s": tr.f_s,
        "r": tr.r, "c": tr.c, "rtg": tr.rtg, "ctg": tr.ctg,
    }


def fit_normalizer(dataset, train_ids) -> Normalizer:
    pooled: dict[str, list] = {k: [] for k in
                               (*STATE_KEYS, *ACTION_KEYS, "r", "c", "rtg", "ctg", "e")}
    for i in train_ids:
        series = _traj_series(dataset.instances[i])
        for k, v in series.items():
            pooled[k].append(v)
        pooled["e"].append(dataset.instances[i].e_token)
    return Normalizer.fit({k: np.concatenate(v) for k, v in pooled.items()})


def _norm_tuple_rows(norm: Normalizer, series: dict, keys) -> np.ndarray:
    return np.column_stack([norm.normalize(k, series[k]) for k in keys])


def _window_matrix(rows: np.ndarray, k: int, include_current: bool) -> np.ndarray:
    """Zero-pad ``k`` rows in front, then stack flattened windows per hour."""
    horizon, width = rows.shape
    padded = np.vstack([np.zeros((k, width)), rows])
    span = k + 1 if include_current else k
    windows = np.lib.stride_tricks.sliding_window_view(padded, (span, width))
    return windows[:horizon, 0].reshape(horizon, span * width)


ACTOR_TUPLE = ("ctg", "rtg", *STATE_KEYS, *ACTION_KEYS)
CRITIC_TUPLE = (*STATE_KEYS, *ACTION_KEYS, "c", "r")


def build_training_arrays(dataset, hyper: AgentHyperparams, norm: Normalizer,
                          instance_ids) -> dict[str, np.ndarray]:
    """Flattened context matrices and normalized targets for both heads."""
    k = hyper.context_len
    xs_actor, ys_actor, xs_critic, ys_critic = [], [], [], []
    for i in instance_ids:
        inst = dataset.instances[i]
        series = _traj_series(inst)
        actor_rows = _norm_tuple_rows(norm, series, ACTOR_TUPLE)
        critic_rows = _norm_tuple_rows(norm, series, CRITIC_TUPLE)
        horizon = len(actor_rows)

        actor_hist = _window_matrix(actor_rows, k, include_current=False)
        current = np.column_stack([
            norm.normalize("ctg", series["ctg"]),
            norm.normalize("rtg", series["rtg"]),
            _norm_tuple_rows(norm, series, STATE_KEYS),
        ])
        parts = [actor_hist, current]
        if hyper.actor_use_design:
            parts.insert(0, np.tile(inst.d_token, (horizon, 1)))
        xs_actor.append(np.hstack(parts))
        ys_actor.append(_norm_tuple_rows(norm, series, ACTION_KEYS))

        critic_win = _window_matrix(critic_rows, k, include_current=True)
        parts = [critic_win]
        if hyper.critic_use_trend:
            parts.insert(0, np.tile(norm.normalize("e", inst.e_token), (horizon, 1)))
        if hyper.critic_use_design:
            parts.insert(0, np.tile(inst.d_token, (horizon, 1)))
        xs_critic.append(np.hstack(parts))
        ys_critic.append(np.column_stack([
            norm.normalize("rtg", series["rtg"]),
            norm.normalize("ctg", series["ctg"]),
        ]))
    return {
        "x_actor": np.vstack(xs_actor), "y_actor": np.vstack(ys_actor),
        "x_critic": np.vstack(xs_critic), "y_critic": np.vstack(ys_critic),
    }


def split_instances(n: int, val_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _train_gaussian(net: GaussianHeadNet, x, y, x_val, y_val, hyper,
                    seed: int, label: str, epochs: int | None = None):
    opt = AdamW(net.net.parameters, hyper.lr, hyper.weight_decay,
                hyper.warmup_steps)
    rng = np.random.default_rng(seed)
    curve = []
    n = len(x)
    for epoch in range(epochs if epochs is not None else hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            batch = order[start: start + hyper.batch_size]
            loss, grads = net.nll_step(x[batch], y[batch])
            if not np.isfinite(loss):
                gnorm = float(np.sqrt(sum((g**2).sum() for g in grads)))
                raise RuntimeError(
                    f"{label}: non-finite loss at epoch {epoch}, batch "
                    f"{start // hyper.batch_size} (grad norm {gnorm:.3e})")
            opt.step(grads)
        curve.append(net.nll(x_val, y_val) if len(x_val) else net.nll(x, y))
    return curve


def train_agent(dataset, hyper: AgentHyperparams | None = None,
                seed: int = 0) -> AgentModel:
    """Fit actor and critic on an oracle dataset.

    Deterministic under the seed; the returned model carries the held-out
    NLL curve per epoch and the dataset fingerprint.
    """
    if hyper is None:
        hyper = AgentHyperparams()
    if len(dataset.instances) == 0:
        raise ValueError("oracle dataset is empty")
    train_ids, val_ids = split_instances(
        len(dataset.instances), hyper.val_fraction, seed)
    norm = fit_normalizer(dataset, train_ids)
    train = build_training_arrays(dataset, hyper, norm, train_ids)
    val = build_training_arrays(dataset, hyper, norm, val_ids) if val_ids else {
        k: v[:0] for k, v in train.items()}

    e_dim = len(dataset.instances[0].e_token)
    actor = GaussianHeadNet(train["x_actor"].shape[1], hyper.hidden,
                            len(ACTION_KEYS), seed=seed + 1,
                            std_floor=hyper.std_floor)
    critic = GaussianHeadNet(train["x_critic"].shape[1], hyper.hidden, 2,
                             seed=seed + 2, std_floor=hyper.std_floor)
    actor_curve = _train_gaussian(actor, train["x_actor"], train["y_actor"],
                                  val["x_actor"], val["y_actor"], hyper,
                                  seed + 3, "actor", epochs=hyper.actor_epochs)
    critic_curve = _train_gaussian(critic, train["x_critic"], train["y_critic"],
                                   val["x_critic"], val["y_critic"], hyper,
                                   seed + 4, "critic", epochs=hyper.critic_epochs)
    return AgentModel(
        actor=actor, critic=critic, norm=norm, hyper=hyper, e_dim=e_dim,
        seed=seed,
        meta={
            "actor_val_nll": actor_curve, "critic_val_nll": critic_curve,
            "train_instances": train_ids, "val_instances": val_ids,
            "dataset_hash": dataset_fingerprint(dataset),
        })


def held_out_nll(model: AgentModel, dataset, instance_ids=None) -> dict[str, float]:
    ids = instance_ids if instance_ids is not None else model.meta["val_instances"]
    arrays = build_training_arrays(dataset, model.hyper, model.norm, ids)
    return {
        "actor": model.actor.nll(arrays["x_actor"], arrays["y_actor"]),
        "critic": model.critic.nll(arrays["x_critic"], arrays["y_critic"]),
    }


def dataset_fingerprint(dataset) -> str:
    import hashlib
    digest = hashlib.sha256()
    digest.update(str(dataset.seed).encode())
    for inst in dataset.instances:
        digest.update(np.ascontiguousarray(inst.trajectory.r).tobytes())
    return digest.hexdigest()[:16]


def behavior_clone_baseline(dataset, hyper: BcHyperparams | None = None,
                            seed: int = 0) -> BaselineModel:
    """Single-step (state, design token) -> action regression; the
    acceptance comparator for the goal-conditioned agent."""
    if hyper is None:
        hyper = BcHyperparams()
    train_ids, val_ids = split_instances(
        len(dataset.instances), hyper.val_fraction, seed)
    norm = fit_normalizer(dataset, train_ids)

    def arrays(ids):
        xs, ys = [], []
        for i in ids:
            inst = dataset.instances[i]
            series = _traj_series(inst)
            s = _norm_tuple_rows(norm, series, STATE_KEYS)
            xs.append(np.hstack([s, np.tile(inst.d_token, (len(s), 1))]))
            ys.append(_norm_tuple_rows(norm, series, ACTION_KEYS))
        return np.vstack(xs), np.vstack(ys)

    x, y = arrays(train_ids)
    x_val, y_val = arrays(val_ids) if val_ids else (x[:0], y[:0])
    net = Mlp(x.shape[1], tuple(hyper.hidden), y.shape[1], seed=seed + 1)
    opt = AdamW(net.parameters, hyper.lr, hyper.weight_decay, warmup_steps=1)
    rng = np.random.default_rng(seed + 2)
    curve = []
    for _ in range(hyper.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), hyper.batch_size):
            batch = order[start: start + hyper.batch_size]
            cache = []
            pred = net.forward(x[batch], cache)
            err = pred - y[batch]
            loss = float((err**2).mean())
            if not np.isfinite(loss):
                raise RuntimeError("bc: non-finite loss")
            grads = net.backward(cache, 2.0 * err / err.size)
            opt.step(grads)
        if len(x_val):
            curve.append(float(((net.forward(x_val) - y_val) ** 2).mean()))
        else:
            curve.append(loss)
    return BaselineModel(net=net, norm=norm, hyper=hyper, seed=seed,
                         meta={"val_mse": curve,
                               "train_instances": train_ids,
                               "val_instances": val_ids})


# ---------------------------------------------------------------------------
# operation

def _clamp_actions_batch(actions: np.ndarray, design: SystemDesign,
                         params: TechnicalParams) -> np.ndarray:
    b_max = params.alpha * design.c_bess
    out = actions.copy()
    out[..., 0] = np.clip(out[..., 0], -b_max, b_max)
    out[..., 1] = np.clip(out[..., 1], 0.0, design.c_pem)
    out[..., 2] = np.clip(out[..., 2], 0.0, 1.0)
    out[..., 3] = np.clip(out[..., 3], 0.0, 1.0)
    return out


def _refresh_tokens(wind: np.ndarray, t: int, m_tokens: int,
                    candidate_pool: list[Scenario]) -> np.ndarray:
    """Per-episode trend tokens from the pool members closest to the wind
    observed through hour t."""
    horizon = wind.shape[1]
    n_obs = max(1, min(t + 1, horizon - 1))
    refreshed = []
    for i in range(wind.shape[0]):
        _, toks, _ = condition_on_prefix(wind[i, :n_obs], m_tokens, candidate_pool)
        refreshed.append(toks)
    return np.stack(refreshed)


@dataclass
class OperateDiagnostics:
    """Per-hour bookkeeping recorded during operation."""

    tracked_rtg: np.ndarray        # (B, T+1) goal tokens over time
    tracked_ctg: np.ndarray
    pred_net: np.ndarray           # (B, T+1) predicted final net emissions
    risk: np.ndarray               # (B, T+1) exceedance fraction of sampled predictions
    n_feasible: np.ndarray         # (B, T)
    any_pred_nonpos: np.ndarray    # (B, T) some feasible candidate had CTG_hat <= 0
    chosen_pred_ctg: np.ndarray    # (B, T)
    fallback: np.ndarray           # (B, T) bool
    goal_samples: np.ndarray | None = None  # (B, T, S, 2) critic samples (rtg, ctg)
    refresh_hours: list[int] = field(default_factory=list)


def operate_batch(
    model: AgentModel,
    design: SystemDesign,
    scenarios: list[Scenario],
    params: TechnicalParams,
    n_action_samples: int = 32,
    seed: int = 0,
    screening: bool = True,
    tokens: np.ndarray | None = None,
    candidate_pool: list[Scenario] | None = None,
    m_tokens: int = 1,
    f_update: int | float = 24,
    force_actions: np.ndarray | None = None,
    initial=None,
    record_goal_samples: int = 0,
) -> tuple[list[Trajectory], OperateDiagnostics]:
    """Advance a batch of episodes in lockstep under the sampled-candidate
    screening policy.

    Offline setting: ``tokens`` holds one trend token per episode (by
    default the true scenario trend).  Online setting: pass a
    ``candidate_pool``; every ``f_update`` hours each episode's token set is
    refreshed to the ``m_tokens`` pool members best matching the observed
    wind prefix, and goal predictions average over the set.
    """
    n_b = len(scenarios)
    horizon = scenarios[0].horizon
    if any(s.horizon != horizon for s in scenarios):
        raise ValueError("scenarios must share one horizon")
    k = model.context_len
    norm = model.norm
    hyper = model.hyper
    online = candidate_pool is not None

    p_r = np.stack([s.power for s in scenarios])
    g = np.stack([s.price for s in scenarios])
    wind = np.stack([s.wind for s in scenarios])

    if tokens is None:
        token_set = np.stack([s.trend for s in scenarios])[:, None, :]
    else:
        token_set = tokens if tokens.ndim == 3 else tokens[:, None, :]

    rng_action = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    rng_sample = np.random.default_rng(np.random.SeedSequence(seed + 1).spawn(1)[0])

    d_token = None
    if hyper.actor_use_design or hyper.critic_use_design:
        from .cooptim import DesignSpace
        d_token = DesignSpace.default().normalize(design.raw())

    actor_seq = np.zeros((n_b, k + horizon, len(ACTOR_TUPLE)))
    critic_seq = np.zeros((n_b, k + horizon, len(CRITIC_TUPLE)))
    actor_seq[:, :k] = np.concatenate([
        [norm.normalize("ctg", 0.0), norm.normalize("rtg", 0.0)],
        norm.normalize_vec(STATE_KEYS, [0.0] * 4),
        norm.normalize_vec(ACTION_KEYS, [0.0] * 4)])
    critic_seq[:, :k] = np.concatenate([
        norm.normalize_vec(STATE_KEYS, [0.0] * 4),
        norm.normalize_vec(ACTION_KEYS, [0.0] * 4),
        [norm.normalize("c", 0.0), norm.normalize("r", 0.0)]])

    if initial is None:
        initial = default_initial_state(design)
    soc = np.full(n_b, initial.soc)
    h = np.full(n_b, initial.h)

    cols = {name: np.zeros((n_b, horizon)) for name in
            ("soc", "h", "b", "p_pem", "f_u", "f_s", "r", "c",
             "p_g", "p_ex", "h_sur")}
    feas_hours = np.ones((n_b, horizon), dtype=bool)
    diag = OperateDiagnostics(
        tracked_rtg=np.zeros((n_b, horizon + 1)),
        tracked_ctg=np.zeros((n_b, horizon + 1)),
        pred_net=np.zeros((n_b, horizon + 1)),
        risk=np.zeros((n_b, horizon + 1)),
        n_feasible=np.zeros((n_b, horizon), dtype=int),
        any_pred_nonpos=np.zeros((n_b, horizon), dtype=bool),
        chosen_pred_ctg=np.zeros((n_b, horizon)),
        fallback=np.zeros((n_b, horizon), dtype=bool),
        goal_samples=(np.zeros((n_b, horizon, record_goal_samples, 2))
                      if record_goal_samples else None),
    )

    def critic_predict(t, state_tuples, token_batch):
        """state_tuples: (n_b, n_cand, 10) normalized current tuples.
        token_batch: (n_b, n_tok, e_dim) raw tokens.
        Returns mu, std with shape (n_b, n_cand, n_tok, 2), denormalized."""
        n_cand = state_tuples.shape[1]
        n_tok = token_batch.shape[1]
        hist = critic_seq[:, t: t + k].reshape(n_b, -1)
        hist_full = np.broadcast_to(hist[:, None, None, :],
                                    (n_b, n_cand, n_tok, hist.shape[1]))
        cand = np.broadcast_to(state_tuples[:, :, None, :],
                               (n_b, n_cand, n_tok, state_tuples.shape[2]))
        parts = [hist_full, cand]
        if hyper.critic_use_trend:
            tok_norm = norm.normalize("e", token_batch)
            tok_full = np.broadcast_to(tok_norm[:, None, :, :],
                                       (n_b, n_cand, n_tok, token_batch.shape[2]))
            parts.insert(0, tok_full)
        if hyper.critic_use_design:
            d_full = np.broadcast_to(d_token, (n_b, n_cand, n_tok, 4))
            parts.insert(0, d_full)
        x = np.concatenate(parts, axis=3).reshape(n_b * n_cand * n_tok, -1)
        mu, std = model.critic.forward(x)
        mu = mu.reshape(n_b, n_cand, n_tok, 2)
        std = std.reshape(n_b, n_cand, n_tok, 2)
        stds = np.array([norm.std["rtg"], norm.std["ctg"]])
        means = np.array([norm.mean["rtg"], norm.mean["ctg"]])
        return means + mu * stds, std * stds

    if online:
        token_set = _refresh_tokens(wind, 0, m_tokens, candidate_pool)
        diag.refresh_hours.append(0)

    # bootstrap goals: critic pass over the zero-padded window with the
    # must-run action (and its realized cost/reward) as the current tuple
    fb0, fpem0, ffu0, ffs0 = repair_action_arrays(
        0.0, 0.0, 0.0, 0.0, soc, h, design, params)
    out0 = step_arrays(soc, h, fb0, fpem0, ffu0, ffs0, p_r[:, 0], g[:, 0],
                       design, params)
    state0 = np.column_stack([
        norm.normalize("p_r", p_r[:, 0]), norm.normalize("g", g[:, 0]),
        norm.normalize("soc", soc), norm.normalize("h", h),
        norm.normalize_vec(ACTION_KEYS,
                           np.column_stack([fb0, fpem0, ffu0, ffs0])),
        norm.normalize("c", out0["c"])[:, None],
        norm.normalize("r", out0["r"])[:, None],
    ])
    mu0, _ = critic_predict(0, state0[:, None, :], token_set)
    goals_rtg = mu0[:, 0, :, 0].mean(axis=1)
    goals_ctg = mu0[:, 0, :, 1].mean(axis=1)

    accrued_c = np.zeros(n_b)
    for t in range(horizon):
        if online and t > 0 and np.isfinite(f_update) and t % int(f_update) == 0:
            token_set = _refresh_tokens(wind, t, m_tokens, candidate_pool)
            diag.refresh_hours.append(t)

        diag.tracked_rtg[:, t] = goals_rtg
        diag.tracked_ctg[:, t] = goals_ctg

        state_norm = np.column_stack([
            norm.normalize("p_r", p_r[:, t]), norm.normalize("g", g[:, t]),
            norm.normalize("soc", soc), norm.normalize("h", h)])
        x_actor = [actor_seq[:, t: t + k].reshape(n_b, -1),
                   np.column_stack([norm.normalize("ctg", goals_ctg),
                                    norm.normalize("rtg", goals_rtg),
                                    state_norm])]
        if hyper.actor_use_design:
            x_actor.insert(0, np.tile(d_token, (n_b, 1)))
        mu_a, std_a = model.actor.forward(np.hstack(x_actor))

        if force_actions is not None:
            raw_actions = _clamp_actions_batch(
                force_actions[:, t][:, None, :], design, params)
        else:
            eps = rng_action.standard_normal((n_b, n_action_samples, 4))
            sampled = mu_a[:, None, :] + std_a[:, None, :] * eps
            raw = norm.denormalize_vec(ACTION_KEYS, sampled)
            # project samples onto the plant-feasible set so no candidate
            # is wasted on a physically impossible move
            rb, rpem, rfu, rfs = repair_action_arrays(
                raw[..., 0], raw[..., 1], raw[..., 2], raw[..., 3],
                soc[:, None], h[:, None], design, params)
            raw_actions = np.stack([rb, rpem, rfu, rfs], axis=-1)
        # final column: the must-run fallback candidate
        n_cand = raw_actions.shape[1] + 1
        fb, fpem, ffu, ffs = repair_action_arrays(
            0.0, 0.0, 0.0, 0.0, soc, h, design, params)
        floor = np.stack([fb, fpem, ffu, ffs], axis=-1)[:, None, :]
        cands = np.concatenate([raw_actions, floor], axis=1)

        out = step_arrays(
            soc[:, None], h[:, None], cands[..., 0], cands[..., 1],
            cands[..., 2], cands[..., 3], p_r[:, t][:, None], g[:, t][:, None],
            design, params)

        cand_tuples = np.concatenate([
            np.broadcast_to(state_norm[:, None, :], (n_b, n_cand, 4)),
            norm.normalize_vec(ACTION_KEYS, cands),
            norm.normalize("c", out["c"])[..., None],
            norm.normalize("r", out["r"])[..., None]], axis=2)
        mu_g, std_g = critic_predict(t, cand_tuples, token_set)
        pred_rtg = mu_g[..., 0].mean(axis=2)      # (B, n_cand)
        pred_ctg = mu_g[..., 1].mean(axis=2)

        sampled_feas = out["feasible"][:, :-1]
        diag.n_feasible[:, t] = sampled_feas.sum(axis=1)
        has_feasible = sampled_feas.any(axis=1)
        score = np.where(sampled_feas, pred_rtg[:, :-1], -np.inf)
        if screening:
            nonpos = sampled_feas & (pred_ctg[:, :-1] <= 0.0)
            diag.any_pred_nonpos[:, t] = nonpos.any(axis=1)
            screened = np.where(nonpos, pred_rtg[:, :-1], -np.inf)
            choice = np.where(nonpos.any(axis=1),
                              screened.argmax(axis=1), score.argmax(axis=1))
        else:
            choice = score.argmax(axis=1)
        choice = np.where(has_feasible, choice, raw_actions.shape[1])
        diag.fallback[:, t] = ~has_feasible

        rows = np.arange(n_b)
        chosen = cands[rows, choice]
        cols["soc"][:, t] = soc
        cols["h"][:, t] = h
        cols["b"][:, t] = chosen[:, 0]
        cols["p_pem"][:, t] = chosen[:, 1]
        cols["f_u"][:, t] = chosen[:, 2]
        cols["f_s"][:, t] = chosen[:, 3]
        for name in ("r", "c", "p_g", "p_ex", "h_sur"):
            cols[name][:, t] = out[name][rows, choice]
        feas_hours[:, t] = out["feasible"][rows, choice]

        sel_rtg = pred_rtg[rows, choice]
        sel_ctg = pred_ctg[rows, choice]
        diag.chosen_pred_ctg[:, t] = sel_ctg
        diag.pred_net[:, t] = accrued_c + sel_ctg

        mu_sel = mu_g[rows, choice]               # (B, n_tok, 2)
        std_sel = std_g[rows, choice]
        n_risk = max(n_action_samples, 1)
        draws = rng_sample.standard_normal((n_b, mu_sel.shape[1], n_risk))
        ctg_samples = (mu_sel[:, :, None, 1]
                       + std_sel[:, :, None, 1] * draws).reshape(n_b, -1)
        diag.risk[:, t] = np.mean(accrued_c[:, None] + ctg_samples > 0.0, axis=1)
        if record_goal_samples:
            # mixture over tokens: pick a token per draw, then sample its head
            n_tok = mu_sel.shape[1]
            tok_idx = (rng_sample.integers(0, n_tok, (n_b, record_goal_samples))
                       if n_tok > 1 else np.zeros((n_b, record_goal_samples), int))
            eps_g = rng_sample.standard_normal((n_b, record_goal_samples, 2))
            mu_mix = np.take_along_axis(mu_sel, tok_idx[..., None], axis=1)
            std_mix = np.take_along_axis(std_sel, tok_idx[..., None], axis=1)
            diag.goal_samples[:, t] = mu_mix + std_mix * eps_g

        # append realized tuples to the context buffers
        actor_seq[:, k + t] = np.column_stack([
            norm.normalize("ctg", goals_ctg), norm.normalize("rtg", goals_rtg),
            state_norm, norm.normalize_vec(ACTION_KEYS, chosen)])
        critic_seq[:, k + t] = cand_tuples[rows, choice]

        accrued_c = accrued_c + cols["c"][:, t]
        goals_rtg = sel_rtg - cols["r"][:, t]
        goals_ctg = sel_ctg - cols["c"][:, t]
        soc = out["soc_next"][rows, choice]
        h = out["h_next"][rows, choice]

    diag.tracked_rtg[:, horizon] = goals_rtg
    diag.tracked_ctg[:, horizon] = goals_ctg
    diag.pred_net[:, horizon] = accrued_c
    diag.risk[:, horizon] = (accrued_c >= 0.0).astype(float)

    trajectories = []
    for i in range(n_b):
        trajectories.append(assemble_trajectory(
            p_r[i], g[i], cols["soc"][i], cols["h"][i], cols["b"][i],
            cols["p_pem"][i], cols["f_u"][i], cols["f_s"][i], cols["r"][i],
            cols["c"][i], cols["p_g"][i], cols["p_ex"][i], cols["h_sur"][i],
            feas_hours[i], final_soc=soc[i], final_h=h[i],
            flagged_hours=diag.fallback[i],
        ))
    return trajectories, diag


def offline_operate(
    model: AgentModel,
    design: SystemDesign,
    scenario: Scenario,
    params: TechnicalParams,
    n_action_samples: int = 32,
    seed: int = 0,
    screening: bool = True,
    force_actions: np.ndarray | None = None,
    initial=None,
) -> Trajectory:
    """One episode with the trend token computed from the full scenario."""
    force = force_actions[None] if force_actions is not None else None
    trajectories, _ = operate_batch(
        model, design, [scenario], params,
        n_action_samples=n_action_samples, seed=seed, screening=screening,
        force_actions=force, initial=initial)
    return trajectories[0]


def online_operate(
    model: AgentModel,
    design: SystemDesign,
    realized_scenario: Scenario,
    candidate_pool: list[Scenario],
    params: TechnicalParams,
    n_action_samples: int = 32,
    m_tokens: int = 64,
    f_update: int | float = 24,
    seed: int = 0,
    screening: bool = True,
    initial=None,
) -> tuple[Trajectory, np.ndarray]:
    """One episode under hour-by-hour information; returns the trajectory and
    the risk series (estimated probability of ending with non-negative net
    emissions, one entry per hour plus the terminal point)."""
    trajectories, diag = operate_batch(
        model, design, [realized_scenario], params,
        n_action_samples=n_action_samples, seed=seed, screening=screening,
        candidate_pool=candidate_pool, m_tokens=m_tokens, f_update=f_update,
        initial=initial)
    return trajectories[0], diag.risk[0]


def bc_rollout_batch(model: BaselineModel, design: SystemDesign,
                     scenarios: list[Scenario], params: TechnicalParams,
                     initial=None) -> list[Trajectory]:
    """Deterministic rollout of the behavior-cloning baseline."""
    n_b = len(scenarios)
    horizon = scenarios[0].horizon
    norm = model.norm
    from .cooptim import DesignSpace
    d_token = np.tile(DesignSpace.default().normalize(design.raw()), (n_b, 1))
    p_r = np.stack([s.power for s in scenarios])
    g = np.stack([s.price for s in scenarios])
    if initial is None:
        initial = default_initial_state(design)
    soc = np.full(n_b, initial.soc)
    h = np.full(n_b, initial.h)
    cols = {name: np.zeros((n_b, horizon)) for name in
            ("soc", "h", "b", "p_pem", "f_u", "f_s", "r", "c",
             "p_g", "p_ex", "h_sur")}
    feas = np.ones((n_b, horizon), dtype=bool)
    for t in range(horizon):
        state_norm = np.column_stack([
            norm.normalize("p_r", p_r[:, t]), norm.normalize("g", g[:, t]),
            norm.normalize("soc", soc), norm.normalize("h", h)])
        pred = norm.denormalize_vec(ACTION_KEYS, model.net.forward(
            np.hstack([state_norm, d_token])))
        rb, rpem, rfu, rfs = repair_action_arrays(
            pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3], soc, h,
            design, params)
        actions = np.column_stack([rb, rpem, rfu, rfs])
        out = step_arrays(soc, h, actions[:, 0], actions[:, 1], actions[:, 2],
                          actions[:, 3], p_r[:, t], g[:, t], design, params)
        cols["soc"][:, t] = soc
        cols["h"][:, t] = h
        for j, name in enumerate(ACTION_KEYS):
            cols[name][:, t] = actions[:, j]
        for name in ("r", "c", "p_g", "p_ex", "h_sur"):
            cols[name][:, t] = out[name]
        feas[:, t] = out["feasible"]
        soc = out["soc_next"]
        h = out["h_next"]
    return [assemble_trajectory(
        p_r[i], g[i], cols["soc"][i], cols["h"][i], cols["b"][i],
        cols["p_pem"][i], cols["f_u"][i], cols["f_s"][i], cols["r"][i],
        cols["c"][i], cols["p_g"][i], cols["p_ex"][i], cols["h_sur"][i],
        feas[i], final_soc=soc[i], final_h=h[i]) for i in range(n_b)]


# ---------------------------------------------------------------------------
# evaluation

def crps_empirical(samples, y) -> float:
    """CRPS of an empirical ensemble against a realized scalar."""
    s = np.sort(np.asarray(samples, dtype=float))
    n = len(s)
    term1 = np.abs(s - y).mean()
    idx = np.arange(n)
    pairwise = 2.0 * np.sum((2 * idx - n + 1) * s) / (n * n)
    return float(term1 - 0.5 * pairwise)


def crps_batch(samples: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorized empirical CRPS; samples (..., S), y broadcastable."""
    s = np.sort(samples, axis=-1)
    n = s.shape[-1]
    term1 = np.abs(s - y[..., None]).mean(axis=-1)
    idx = np.arange(n)
    pairwise = 2.0 * ((2 * idx - n + 1) * s).sum(axis=-1) / (n * n)
    return term1 - 0.5 * pairwise


GAP_TOL = 1e-6


@dataclass
class PolicyReport:
    rows: list[dict]
    summary: dict
    risk_accuracy: np.ndarray


def evaluate_policy(
    model,
    instances: list[tuple[SystemDesign, Scenario]],
    params: TechnicalParams,
    lp_reference: list[tuple[float, float]],
    mode: str = "offline",
    n_action_samples: int = 32,
    seed: int = 0,
    candidate_pool: list[Scenario] | None = None,
    m_tokens: int = 16,
    f_update: int | float = 24,
    goal_sample_count: int = 32,
) -> PolicyReport:
    """Score a policy against LP references on a common instance set.

    Modes: ``offline`` / ``online`` (agent), ``bc`` (baseline net),
    ``lp-replay`` (forces the oracle actions through the same harness).
    lp_reference holds (objective, net_carbon) per instance.
    """
    rows = []
    pred_nets = []
    realized = []
    groups: dict[int, list[int]] = {}
    for i, (design, _) in enumerate(instances):
        groups.setdefault(id(design), []).append(i)

    results: dict[int, tuple[Trajectory, np.ndarray | None, np.ndarray | None]] = {}
    for idxs in groups.values():
        design = instances[idxs[0]][0]
        scenarios = [instances[i][1] for i in idxs]
        if mode == "bc":
            trajs = bc_rollout_batch(model, design, scenarios, params)
            diag = None
        elif mode == "lp-replay":
            from .lp import solve_instance
            trajs = []
            for i in idxs:
                _, traj = solve_instance(design, instances[i][1], params)
                if traj is None:
                    raise RuntimeError(f"instance {i}: LP not optimal")
                trajs.append(traj)
            diag = None
        else:
            kwargs = {}
            if mode == "online":
                if candidate_pool is None:
                    raise ValueError("online mode needs a candidate pool")
                kwargs = dict(candidate_pool=candidate_pool,
                              m_tokens=m_tokens, f_update=f_update)
            trajs, diag = operate_batch(
                model, design, scenarios, params,
                n_action_samples=n_action_samples, seed=seed,
                record_goal_samples=goal_sample_count, **kwargs)
        for pos, i in enumerate(idxs):
            samples = diag.goal_samples[pos] if (
                diag is not None and diag.goal_samples is not None) else None
            pred = diag.pred_net[pos] if diag is not None else None
            results[i] = (trajs[pos], samples, pred)

    for i, (design, scenario) in enumerate(instances):
        traj, samples, pred = results[i]
        lp_obj, lp_net = lp_reference[i]
        profit = traj.profit
        if abs(lp_obj) <= GAP_TOL:
            gap = lp_obj - profit
            gap_flag = "absolute"
        else:
            gap = (lp_obj - profit) / abs(lp_obj)
            gap_flag = "relative"
        row = {
            "instance": i,
            "lp_objective": lp_obj,
            "lp_net_carbon": lp_net,
            "profit": profit,
            "gap": gap,
            "gap_flag": gap_flag,
            "violation_ton": max(traj.net_carbon, 0.0),
            "feasible": traj.net_carbon <= GAP_TOL,
            "plant_feasible": traj.feasible,
        }
        if samples is not None:
            realized_rtg = traj.rtg
            realized_ctg = traj.ctg
            row["crps_rtg"] = float(
                crps_batch(samples[..., 0], realized_rtg).mean())
            row["crps_ctg"] = float(
                crps_batch(samples[..., 1], realized_ctg).mean())
        rows.append(row)
        if pred is not None:
            pred_nets.append(pred)
            realized.append(traj.net_carbon)

    if pred_nets:
        pred_arr = np.stack(pred_nets)
        realized_arr = np.array(realized)
        risk_accuracy = np.mean(
            (pred_arr >= 0.0) == (realized_arr[:, None] >= 0.0), axis=0)
    else:
        risk_accuracy = np.array([])

    gaps = np.array([r["gap"] for r in rows])
    summary = {
        "mode": mode,
        "n_instances": len(rows),
        "mean_gap": float(gaps.mean()),
        "median_gap": float(np.median(gaps)),
        "mean_violation_ton": float(np.mean([r["violation_ton"] for r in rows])),
        "feasibility_rate": float(np.mean([r["feasible"] for r in rows])),
    }
    for key in ("crps_rtg", "crps_ctg"):
        vals = [r[key] for r in rows if key in r]
        if vals:
            summary[f"mean_{key}"] = float(np.mean(vals))
    if len(risk_accuracy):
        summary["risk_accuracy_final"] = float(risk_accuracy[-1])
        early = risk_accuracy[: max(1, len(risk_accuracy) // 4)]
        summary["risk_accuracy_early_mean"] = float(early.mean())
    return PolicyReport(rows=rows, summary=summary, risk_accuracy=risk_accuracy)


# ---------------------------------------------------------------------------
# checkpoints

def save_model(model: AgentModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, net in (("actor", model.actor), ("critic", model.critic)):
        for i, w in enumerate(net.net.weights):
            arrays[f"{name}_w{i}"] = w
        for i, b in enumerate(net.net.biases):
            arrays[f"{name}_b{i}"] = b
    meta = {
        "hyper": {**model.hyper.__dict__, "hidden": list(model.hyper.hidden)},
        "norm_mean": model.norm.mean, "norm_std": model.norm.std,
        "e_dim": model.e_dim, "seed": model.seed, "meta": model.meta,
    }
    np.savez(path, meta=json.dumps(meta), **arrays)
    return path


def load_model(path: str | Path) -> AgentModel:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["meta"]))
    hyper_kw = dict(meta["hyper"])
    hyper_kw["hidden"] = tuple(hyper_kw["hidden"])
    hyper = AgentHyperparams(**hyper_kw)
    norm = Normalizer(mean=meta["norm_mean"], std=meta["norm_std"])

    def rebuild(name, target_dim):
        weights = []
        i = 0
        while f"{name}_w{i}" in data:
            weights.append(data[f"{name}_w{i}"])
            i += 1
        net = GaussianHeadNet(weights[0].shape[0], hyper.hidden, target_dim,
                              seed=0, std_floor=hyper.std_floor)
        net.net.weights = [np.array(w) for w in weights]
        net.net.biases = [np.array(data[f"{name}_b{j}"])
                          for j in range(len(weights))]
        return net

    return AgentModel(
        actor=rebuild("actor", len(ACTION_KEYS)),
        critic=rebuild("critic", 2), norm=norm, hyper=hyper,
        e_dim=int(meta["e_dim"]), seed=int(meta["seed"]), meta=meta["meta"])
