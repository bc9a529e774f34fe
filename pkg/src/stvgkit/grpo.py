"""Group-relative policy optimisation on a softmax-linear policy over candidate answers.

A response is one candidate answer, so its sequence probability is a single
softmax probability and the importance ratio is exact.  The objective per
update is::

    J = mean_i min(ratio_i * A_i, clip(ratio_i, 1-eps, 1+eps) * A_i) - beta * KL(pi || pi_ref)

with ``A_i`` the z-scored group rewards and the KL computed exactly over the
candidate set.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geometry import BBox, TemporalInterval, interval_frames, temporal_iou
from .mask_db import MaskDatabase
from .rewards import RewardBreakdown, max_total, render_transcript, reward_total
from .simulator import (Candidate, Episode, WorldConfig, gen_corpus, object_attributes,
                        frames_to_interval)

FEATURES = ("attribute_match", "presence_in_interval", "lifespan_tiou")


class DegenerateGroupError(ValueError):
    pass


def normalize_advantages(rewards: Sequence[float]) -> np.ndarray:
    """(R - mean) / population std; all zeros when every reward is equal."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise DegenerateGroupError("a group needs at least two rewards")
    if np.ptp(r) == 0:  # the float mean of equal values can miss them by an ulp
        return np.zeros_like(r)
    centered = r - r.mean()
    scale = np.max(np.abs(centered))
    if scale == 0:
        return np.zeros_like(r)
    centered = centered / scale  # keeps the squares clear of underflow
    std = np.sqrt(np.mean(centered ** 2))
    return centered / std


def surrogate_term(ratio: float, advantage: float, eps: float) -> float:
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    return min(ratio * advantage, float(np.clip(ratio, 1 - eps, 1 + eps)) * advantage)


def exact_kl(p, q) -> float:
    """KL(p || q) for discrete distributions on the same support."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch: {p.shape} vs {q.shape}")
    on = p > 0
    if np.any(q[on] <= 0):
        raise ValueError("q must be positive wherever p is")
    return float(max(0.0, np.sum(p[on] * (np.log(p[on]) - np.log(q[on])))))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class ToyPolicy:
    """Logits ``(features @ weights + bias) / temperature`` over a fixed number
    of candidate slots."""

    weights: np.ndarray
    bias: np.ndarray
    temperature: float = 1.0

    @classmethod
    def uniform(cls, n_features: int, n_candidates: int, temperature: float = 1.0) -> "ToyPolicy":
        return cls(np.zeros(n_features), np.zeros(n_candidates), temperature)

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def params(self) -> np.ndarray:
        return np.concatenate([self.weights, self.bias])

    def with_params(self, theta: np.ndarray) -> "ToyPolicy":
        d = self.weights.size
        return ToyPolicy(theta[:d].copy(), theta[d:].copy(), self.temperature)

    def copy(self) -> "ToyPolicy":
        return self.with_params(self.params())

    def logits(self, features: np.ndarray) -> np.ndarray:
        return (features @ self.weights + self.bias) / self.temperature

    def probs(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.logits(features))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias.tolist(),
                "temperature": self.temperature, "features": list(FEATURES)}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyPolicy":
        return cls(np.asarray(d["weights"], float), np.asarray(d["bias"], float), float(d["temperature"]))


def grpo_objective(policy: ToyPolicy, features: np.ndarray, old_probs: np.ndarray,
                   ref_probs: np.ndarray, samples: Sequence[int], advantages: np.ndarray,
                   eps: float, beta: float) -> float:
    p = policy.probs(features)
    terms = [surrogate_term(p[c] / old_probs[c], a, eps) for c, a in zip(samples, advantages)]
    return float(np.mean(terms)) - beta * exact_kl(p, ref_probs)


def grpo_gradient(policy: ToyPolicy, features: np.ndarray, old_probs: np.ndarray,
                  ref_probs: np.ndarray, samples: Sequence[int], advantages: np.ndarray,
                  eps: float, beta: float) -> np.ndarray:
    """Analytic gradient of :func:`grpo_objective` with respect to ``policy.params()``."""
    p = policy.probs(features)
    n = len(samples)
    g_z = np.zeros_like(p)
    for c, a in zip(samples, advantages):
        ratio = p[c] / old_probs[c]
        clipped = float(np.clip(ratio, 1 - eps, 1 + eps))
        if ratio * a <= clipped * a:  # unclipped branch active
            d_ratio = -ratio * p
            d_ratio[c] += ratio
            g_z += a * d_ratio / n
    logp, logq = np.log(p), np.log(ref_probs)
    kl = float(np.sum(p * (logp - logq)))
    g_z -= beta * p * (logp - logq - kl)
    g_z /= policy.temperature
    return np.concatenate([features.T @ g_z, g_z])


@dataclass
class GrpoConfig:
    n: int = 8
    clip_eps: float = 0.2
    beta: float = 0.04
    lr: float = 0.05
    updates: int = 2000
    seed: int = 0
    refresh_every: int = 1
    optimizer: str = "adam"  # "adam" | "sgd"
    temperature: float = 1.0
    reward_variant: str = "decoupled"
    corrupt_format_p: float = 0.0

    def validate(self) -> None:
        if self.n < 2:
            raise ValueError("group size n must be >= 2")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.lr <= 0 or self.updates < 0 or self.refresh_every < 1:
            raise ValueError("lr > 0, updates >= 0 and refresh_every >= 1 required")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.corrupt_format_p <= 1:
            raise ValueError("corrupt_format_p must be in [0, 1]")


class Optimizer:
    """Gradient ascent, plain or Adam-scaled."""

    def __init__(self, kind: str, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.kind, self.lr, self.betas, self.eps = kind, lr, betas, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return theta + self.lr * grad
        if self.m is None:
            self.m, self.v = np.zeros_like(theta), np.zeros_like(theta)
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        return theta + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- environment ---------------------------------------------------------------

@dataclass
class ToyEpisode:
    features: np.ndarray  # (n_candidates, n_features)
    candidates: list[Candidate]
    gt_interval: TemporalInterval
    gt_id: int
    db: MaskDatabase
    correct: int  # index of the fully correct candidate
    gt_boxes: dict[int, BBox] = field(default_factory=dict)


def candidate_features(ep: Episode, cand: Candidate, attrs: dict[int, dict[str, str]]) -> np.ndarray:
    a = attrs.get(cand.instance_id, {})
    match = np.mean([a.get(k) == v for k, v in ep.query.items()]) if ep.query else 0.0
    frames = list(interval_frames(cand.interval, ep.db.fps))
    present = set(ep.db.frames_of(cand.instance_id))
    presence = sum(t in present for t in frames) / len(frames) if frames else 0.0
    if present:
        life = frames_to_interval(min(present), max(present), ep.db.fps)
        tiou = temporal_iou(cand.interval, life)
    else:
        tiou = 0.0
    return np.array([match, presence, tiou], dtype=float)


def _distractor_pool(ep: Episode, rng: np.random.Generator) -> list[Candidate]:
    correct = Candidate(ep.target_id, ep.gt.interval)
    pool = [c for c in ep.candidates if c != correct]
    # the target with a shifted or shortened interval
    iv, step = ep.gt.interval, 1.0 / ep.db.fps
    span = max(step, iv.length)
    extra = [
        Candidate(ep.target_id, TemporalInterval(iv.t_s + span / 2, iv.t_e + span / 2)),
        Candidate(ep.target_id, TemporalInterval(iv.t_s, iv.t_s + span / 2)),
        Candidate(ep.target_id, TemporalInterval(max(0.0, iv.t_s - span / 2), max(0.0, iv.t_e - span / 2))),
        Candidate(ep.target_id, TemporalInterval(iv.t_s + span / 4, iv.t_e)),
    ]
    extra = [c for c in extra if c != correct and c not in pool]
    rng.shuffle(pool)
    # always keep one same-ID, wrong-interval distractor
    return extra[:1] + pool + extra[1:]


def toy_episode(ep: Episode, n_candidates: int, seed: int) -> ToyEpisode:
    rng = np.random.default_rng([seed, 4])
    correct = Candidate(ep.target_id, ep.gt.interval)
    chosen = [correct] + _distractor_pool(ep, rng)[: n_candidates - 1]
    if len(chosen) < n_candidates:
        raise ValueError(f"episode {ep.sample_id} yields only {len(chosen)} candidates")
    order = rng.permutation(n_candidates)
    chosen = [chosen[i] for i in order]
    attrs = object_attributes(ep.world) if ep.world is not None else {}
    feats = np.stack([candidate_features(ep, c, attrs) for c in chosen])
    return ToyEpisode(feats, chosen, ep.gt.interval, ep.target_id, ep.db,
                      int(np.flatnonzero(order == 0)[0]), dict(ep.gt.boxes))


@dataclass
class ToyEnv:
    episodes: list[ToyEpisode]

    @property
    def n_candidates(self) -> int:
        return self.episodes[0].features.shape[0]

    @property
    def n_features(self) -> int:
        return self.episodes[0].features.shape[1]

    def sample(self, rng: np.random.Generator) -> ToyEpisode:
        return self.episodes[int(rng.integers(len(self.episodes)))]

    @classmethod
    def from_simulator(cls, world_cfg: WorldConfig | None = None, n_episodes: int = 16,
                       n_candidates: int = 5) -> "ToyEnv":
        world_cfg = world_cfg if world_cfg is not None else WorldConfig()
        eps = gen_corpus(world_cfg, n_episodes)
        return cls([toy_episode(ep, n_candidates, world_cfg.seed + i) for i, ep in enumerate(eps)])


def default_env(seed: int = 0) -> ToyEnv:
    """The 5-candidate environment used by ``train-toy`` and the acceptance suite."""
    return ToyEnv.from_simulator(WorldConfig(seed=seed), n_episodes=16, n_candidates=5)


# -- training ---------------------------------------------------------------------

RewardFn = Callable[[str, ToyEpisode], RewardBreakdown]


def score_candidate(text: str, episode: ToyEpisode, variant: str) -> RewardBreakdown:
    return reward_total(text, episode.gt_interval, episode.gt_id, episode.db,
                        variant=variant, gt_boxes=episode.gt_boxes)


def _render(cand: Candidate, rng: np.random.Generator, corrupt_p: float) -> str:
    text = render_transcript(cand.interval, cand.instance_id, think="candidate")
    if corrupt_p > 0 and rng.random() < corrupt_p:
        return text.replace("<think>", "").replace("</think>", "")
    return text


@dataclass
class StepDiagnostics:
    samples: list[int]
    rewards: list[RewardBreakdown]
    advantages: np.ndarray
    kl: float
    gradient: np.ndarray


def grpo_step(policy: ToyPolicy, old_policy: ToyPolicy, ref_policy: ToyPolicy,
              episode: ToyEpisode, cfg: GrpoConfig, rng: np.random.Generator,
              optimizer: Optimizer | None = None,
              reward_fn: RewardFn | None = None) -> tuple[ToyPolicy, float, StepDiagnostics]:
    """Sample ``cfg.n`` answers from ``old_policy``, score them, and take one
    ascent step on the clipped, KL-regularised objective."""
    X = episode.features
    old_p = old_policy.probs(X)
    ref_p = ref_policy.probs(X)
    samples = [int(i) for i in rng.choice(len(old_p), size=cfg.n, p=old_p)]
    score = reward_fn or (lambda text, ep: score_candidate(text, ep, cfg.reward_variant))
    rewards = [score(_render(episode.candidates[i], rng, cfg.corrupt_format_p), episode) for i in samples]
    adv = normalize_advantages([r.total for r in rewards])
    objective = grpo_objective(policy, X, old_p, ref_p, samples, adv, cfg.clip_eps, cfg.beta)
    grad = grpo_gradient(policy, X, old_p, ref_p, samples, adv, cfg.clip_eps, cfg.beta)
    opt = optimizer if optimizer is not None else Optimizer(cfg.optimizer, cfg.lr)
    new = policy.with_params(opt.step(policy.params(), grad))
    kl = exact_kl(new.probs(X), ref_p)
    return new, objective, StepDiagnostics(samples, rewards, adv, kl, grad)


@dataclass
class TrainResult:
    policy: ToyPolicy
    curve: list[dict[str, float]]

    def rewards(self) -> np.ndarray:
        return np.array([row["mean_reward"] for row in self.curve])


def train_toy(env: ToyEnv, cfg: GrpoConfig, policy: ToyPolicy | None = None) -> TrainResult:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    policy = policy.copy() if policy is not None else ToyPolicy.uniform(
        env.n_features, env.n_candidates, cfg.temperature)
    ref = policy.copy()
    old = policy.copy()
    opt = Optimizer(cfg.optimizer, cfg.lr)
    curve = []
    for u in range(cfg.updates):
        if u % cfg.refresh_every == 0:
            old = policy.copy()
        ep = env.sample(rng)
        policy, _, diag = grpo_step(policy, old, ref, ep, cfg, rng, opt)
        rs = diag.rewards
        curve.append({
            "update": u,
            "mean_reward": float(np.mean([r.total for r in rs])),
            "mean_r_t": float(np.mean([r.r_t for r in rs])),
            "mean_r_s": float(np.mean([r.r_s for r in rs])),
            "mean_r_f": float(np.mean([r.r_f for r in rs])),
            "kl": diag.kl,
        })
    return TrainResult(policy, curve)


def converged_at(curve: Sequence[dict] | np.ndarray, target: float, window: int = 20) -> int | None:
    """First update whose trailing ``window``-update mean reward reaches ``target``."""
    r = np.asarray([row["mean_reward"] for row in curve] if len(curve) and isinstance(curve[0], dict) else curve, float)
    if r.size < window:
        return None
    means = np.convolve(r, np.ones(window) / window, mode="valid")
    hits = np.flatnonzero(means >= target)
    return int(hits[0] + window - 1) if hits.size else None


def convergence_target(variant: str, fraction: float = 0.95) -> float:
    return fraction * max_total(variant)


def expected_reward(policy: ToyPolicy, env: ToyEnv, variant: str = "decoupled") -> float:
    """Mean over episodes of the exact expected reward under ``policy``."""
    vals = []
    for ep in env.episodes:
        p = policy.probs(ep.features)
        r = [score_candidate(render_transcript(c.interval, c.instance_id), ep, variant).total for c in ep.candidates]
        vals.append(float(p @ np.asarray(r)))
    return float(np.mean(vals))


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def curve_csv(curve: Sequence[dict]) -> str:
    buf = io.StringIO()
    cols = ["update", "mean_reward", "mean_r_t", "mean_r_s", "mean_r_f", "kl"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in curve:
        w.writerow([row["update"]] + [f"{row[c]:.6f}" for c in cols[1:]])
    return buf.getvalue()


class GrpoTrainer(BaseEstimator):
    """Estimator facade over :func:`train_toy`.

    ``fit(env)`` trains and stores ``policy_`` and ``curve_``;
    ``predict_proba(env)`` returns per-episode candidate distributions and
    ``predict(env)`` the most likely candidate index per episode.
    """

    def __init__(self, n=8, clip_eps=0.2, beta=0.04, lr=0.05, updates=2000, seed=0,
                 refresh_every=1, optimizer="adam", temperature=1.0,
                 reward_variant="decoupled", corrupt_format_p=0.0):
        self.n = n
        self.clip_eps = clip_eps
        self.beta = beta
        self.lr = lr
        self.updates = updates
        self.seed = seed
        self.refresh_every = refresh_every
        self.optimizer = optimizer
        self.temperature = temperature
        self.reward_variant = reward_variant
        self.corrupt_format_p = corrupt_format_p

    def config(self) -> GrpoConfig:
        return GrpoConfig(**self.get_params())

    def fit(self, env: ToyEnv, y=None):
        result = train_toy(env, self.config())
        self.policy_ = result.policy
        self.curve_ = result.curve
        return self

    def predict_proba(self, env: ToyEnv) -> np.ndarray:
        check_is_fitted(self, "policy_")
        return np.stack([self.policy_.probs(ep.features) for ep in env.episodes])

    def predict(self, env: ToyEnv) -> np.ndarray:
        return self.predict_proba(env).argmax(axis=1)

    def score(self, env: ToyEnv, y=None) -> float:
        check_is_fitted(self, "policy_")
        return expected_reward(self.policy_, env, self.reward_variant)


def save_policy(policy: ToyPolicy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy.to_dict(), fh, indent=2)
