"""PPO with generalized advantage estimation.

Two actor heads share the machinery: a plain Gaussian over joint targets for
locomotion, and a hybrid categorical (skill) + Gaussian (command) head for
navigation. Continuous actions live in an unbounded pre-squash space; the
consumer squashes them into command bounds when decoding, so log-densities
here are plain normal densities and importance ratios need no Jacobian.

Also implements the mirror data augmentation: every transition is copied
through left-right, front-back, and combined mirrors (a Klein four-group),
with the original action log-prob attached to each copy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError

LOG_2PI = float(np.log(2.0 * np.pi))


# --------------------------------------------------------------------- GAE ----


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        gamma: float, lam: float):
    """Generalized advantage estimation over [T, N] arrays.

    values must carry T+1 rows (the last is the bootstrap value). dones mark
    transitions that ended an episode; both the TD target and the recursion
    are cut there. Returns (advantages, returns) as float32 [T, N].
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or dones.shape[0] != T:
        raise ConfigurationError(
            f"gae shapes: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}"
        )
    adv = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1:], dtype=np.float64)
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        acc = delta + gamma * lam * nonterminal * acc
        adv[t] = acc
    returns = adv + values[:T]
    return adv.astype(np.float32), returns.astype(np.float32)


# ------------------------------------------------------------ distributions ----


def gaussian_logprob(mean: np.ndarray, std: np.ndarray, a: np.ndarray) -> np.ndarray:
    z = (a - mean) / std
    return (-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI).sum(axis=-1)


@dataclass
class GaussianDist:
    mean: np.ndarray  # [N, A]
    std: np.ndarray   # [A] or [N, A]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return (self.mean + self.std * rng.standard_normal(self.mean.shape)).astype(
            np.float32
        )

    def deterministic(self) -> np.ndarray:
        return self.mean.astype(np.float32)

    def logprob(self, a: np.ndarray) -> np.ndarray:
        return gaussian_logprob(self.mean, self.std, a)

    def entropy(self) -> float:
        std = np.broadcast_to(self.std, self.mean.shape)
        return float((np.log(std) + 0.5 * (1.0 + LOG_2PI)).sum(axis=-1).mean())


@dataclass
class HybridDist:
    """Independent categorical skill head and Gaussian command head."""

    logits: np.ndarray  # [N, S]
    mean: np.ndarray    # [N, C]
    std: np.ndarray

    def _log_softmax(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def logprob(self, skill: np.ndarray, cmd: np.ndarray) -> np.ndarray:
        ls = self._log_softmax()
        n_skills = self.logits.shape[-1]
        skill = np.asarray(skill)
        if skill.size and (skill.min() < 0 or skill.max() >= n_skills):
            raise ConfigurationError(f"skill index out of range 0..{n_skills - 1}")
        cat = np.take_along_axis(ls, skill[..., None], axis=-1)[..., 0]
        return cat + gaussian_logprob(self.mean, self.std, cmd)

    def sample(self, rng: np.random.Generator):
        ls = self._log_softmax()
        p = np.exp(ls)
        cum = p.cumsum(axis=-1)
        u = rng.uniform(size=p.shape[:-1] + (1,))
        skill = (u > cum).sum(axis=-1)
        cmd = self.mean + self.std * rng.standard_normal(self.mean.shape)
        return skill.astype(np.int64), cmd.astype(np.float32)

    def deterministic(self):
        return self.logits.argmax(axis=-1), self.mean.astype(np.float32)

    def entropy(self) -> float:
        ls = self._log_softmax()
        cat = -(np.exp(ls) * ls).sum(axis=-1).mean()
        std = np.broadcast_to(self.std, self.mean.shape)
        gauss = (np.log(std) + 0.5 * (1.0 + LOG_2PI)).sum(axis=-1).mean()
        return float(cat + gauss)


def hybrid_logprob(dist: HybridDist, skill, cmd) -> np.ndarray:
    return dist.logprob(skill, cmd)


def hybrid_sample(dist: HybridDist, rng=None, deterministic: bool = False):
    if deterministic:
        return dist.deterministic()
    return dist.sample(rng)


# ---------------------------------------------------------------- policies ----


class RunningNorm:
    """Streaming mean/variance observation normalizer."""

    def __init__(self, dim: int, clip: float = 10.0):
        self.mean = np.zeros(dim, dtype=np.float64)
        self.var = np.ones(dim, dtype=np.float64)
        self.count = 1e-4
        self.clip = clip

    def update(self, x: np.ndarray):
        x = x.reshape(-1, x.shape[-1]).astype(np.float64)
        n = x.shape[0]
        if n == 0:
            return
        m = x.mean(axis=0)
        v = x.var(axis=0)
        delta = m - self.mean
        tot = self.count + n
        self.mean += delta * n / tot
        self.var = (self.var * self.count + v * n + delta**2 * self.count * n / tot) / tot
        self.count = tot

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / np.sqrt(self.var + 1e-8)
        return np.clip(z, -self.clip, self.clip).astype(np.float32)

    def state_dict(self) -> dict:
        return {
            "norm.mean": self.mean.astype(np.float32),
            "norm.var": self.var.astype(np.float32),
            "norm.count": np.asarray(self.count, dtype=np.float32),
        }

    def load_state_dict(self, d: dict):
        self.mean = np.asarray(d["norm.mean"], dtype=np.float64)
        self.var = np.asarray(d["norm.var"], dtype=np.float64)
        self.count = float(d["norm.count"])


class GaussianPolicy:
    """MLP producing the action mean, with a free log-std vector."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(256, 128, 64),
                 seed: int = 0, init_log_std: float = 0.0):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        spec = ad.mlp_spec([obs_dim, *hidden, act_dim], act="relu", out_gain=0.01)
        self.net = ad.Network(spec, seed=seed, name="pi")
        self.log_std = Tensor(
            np.full(act_dim, init_log_std, dtype=np.float32),
            requires_grad=True, name="pi.log_std",
        )

    def params(self) -> dict:
        p = dict(self.net.params)
        p["pi.log_std"] = self.log_std
        return p

    def dist(self, obs: np.ndarray) -> GaussianDist:
        mean = self.net.forward(Tensor(obs)).data
        return GaussianDist(mean=mean, std=np.exp(self.log_std.data))

    def forward_t(self, obs: Tensor) -> Tensor:
        return self.net.forward(obs)


class HybridPolicy:
    """MLP with categorical logits and Gaussian command mean side by side."""

    def __init__(self, obs_dim: int, n_skills: int, cmd_dim: int,
                 hidden=(256, 128), seed: int = 0, init_log_std: float = 0.0):
        self.obs_dim = obs_dim
        self.n_skills = n_skills
        self.cmd_dim = cmd_dim
        spec = ad.mlp_spec([obs_dim, *hidden, n_skills + cmd_dim], act="relu", out_gain=0.01)
        self.net = ad.Network(spec, seed=seed, name="pi")
        self.log_std = Tensor(
            np.full(cmd_dim, init_log_std, dtype=np.float32),
            requires_grad=True, name="pi.log_std",
        )

    def params(self) -> dict:
        p = dict(self.net.params)
        p["pi.log_std"] = self.log_std
        return p

    def dist(self, obs: np.ndarray) -> HybridDist:
        out = self.net.forward(Tensor(obs)).data
        return HybridDist(
            logits=out[:, : self.n_skills],
            mean=out[:, self.n_skills :],
            std=np.exp(self.log_std.data),
        )

    def forward_t(self, obs: Tensor) -> Tensor:
        return self.net.forward(obs)


class ValueNet:
    def __init__(self, obs_dim: int, hidden=(256, 128, 64), seed: int = 0):
        spec = ad.mlp_spec([obs_dim, *hidden, 1], act="relu", out_gain=1.0)
        self.net = ad.Network(spec, seed=seed, name="vf")

    def params(self) -> dict:
        return dict(self.net.params)

    def value(self, obs: np.ndarray) -> np.ndarray:
        return self.net.forward(Tensor(obs)).data[:, 0]

    def forward_t(self, obs: Tensor) -> Tensor:
        return self.net.forward(obs)


# ----------------------------------------------------------- rollout buffer ----


class RolloutBuffer:
    """Fixed-horizon on-policy storage, [T, N] per field."""

    def __init__(self, horizon: int, n_envs: int, obs_dim: int, act_dim: int,
                 store_skill: bool = False):
        T, N = horizon, n_envs
        self.T, self.N = T, N
        self.obs = np.zeros((T, N, obs_dim), dtype=np.float32)
        self.act = np.zeros((T, N, act_dim), dtype=np.float32)
        self.logp = np.zeros((T, N), dtype=np.float32)
        self.rew = np.zeros((T, N), dtype=np.float32)
        self.val = np.zeros((T + 1, N), dtype=np.float32)
        self.done = np.zeros((T, N), dtype=np.float32)
        self.skill = np.zeros((T, N), dtype=np.int64) if store_skill else None
        self.t = 0

    def add(self, obs, act, logp, rew, val, done, skill=None):
        t = self.t
        if t >= self.T:
            raise ConfigurationError("rollout buffer full")
        self.obs[t] = obs
        self.act[t] = act
        self.logp[t] = logp
        self.rew[t] = rew
        self.val[t] = val
        self.done[t] = done
        if self.skill is not None:
            if skill is None:
                raise ConfigurationError("buffer expects a skill index per step")
            self.skill[t] = skill
        self.t += 1

    def finish(self, last_value: np.ndarray, gamma: float, lam: float) -> dict:
        if self.t != self.T:
            raise ConfigurationError(f"buffer has {self.t}/{self.T} steps")
        self.val[self.T] = last_value
        adv, ret = gae(self.rew, self.val, self.done, gamma, lam)
        batch = {
            "obs": self.obs.reshape(self.T * self.N, -1),
            "act": self.act.reshape(self.T * self.N, -1),
            "logp": self.logp.reshape(-1),
            "adv": adv.reshape(-1),
            "ret": ret.reshape(-1),
        }
        if self.skill is not None:
            batch["skill"] = self.skill.reshape(-1)
        self.t = 0
        return batch


# ---------------------------------------------------------------- symmetry ----


@dataclass
class SymmetryTransform:
    """Permutation-with-signs map applied to observation and action vectors.

    All observation entries are relative, robot-frame quantities, so mirror
    images never need angle offsets; each transform is an involution.
    """

    label: str
    obs_perm: np.ndarray
    obs_sign: np.ndarray
    act_perm: np.ndarray
    act_sign: np.ndarray

    def apply_obs(self, x: np.ndarray) -> np.ndarray:
        return (x[..., self.obs_perm] * self.obs_sign).astype(x.dtype)

    def apply_act(self, a: np.ndarray) -> np.ndarray:
        return (a[..., self.act_perm] * self.act_sign).astype(a.dtype)


def identity_transform(obs_dim: int, act_dim: int) -> SymmetryTransform:
    return SymmetryTransform(
        label="identity",
        obs_perm=np.arange(obs_dim), obs_sign=np.ones(obs_dim, dtype=np.float32),
        act_perm=np.arange(act_dim), act_sign=np.ones(act_dim, dtype=np.float32),
    )


def compose(a: SymmetryTransform, b: SymmetryTransform, label: str) -> SymmetryTransform:
    """Transform equal to applying b first, then a."""
    return SymmetryTransform(
        label=label,
        obs_perm=b.obs_perm[a.obs_perm],
        obs_sign=a.obs_sign * b.obs_sign[a.obs_perm],
        act_perm=b.act_perm[a.act_perm],
        act_sign=a.act_sign * b.act_sign[a.act_perm],
    )


def transforms_equal(a: SymmetryTransform, b: SymmetryTransform) -> bool:
    return (
        np.array_equal(a.obs_perm, b.obs_perm)
        and np.array_equal(a.obs_sign, b.obs_sign)
        and np.array_equal(a.act_perm, b.act_perm)
        and np.array_equal(a.act_sign, b.act_sign)
    )


def symmetry_augment(batch: dict, transforms: list[SymmetryTransform]) -> dict:
    """Copy every transition through each transform. The stored log-prob of
    each variant is the original transition's log-prob; advantages and
    returns are carried over unchanged."""
    obs_dim = batch["obs"].shape[-1]
    act_dim = batch["act"].shape[-1]
    for t in transforms:
        if len(t.obs_perm) != obs_dim or len(t.act_perm) != act_dim:
            raise ConfigurationError(
                f"transform {t.label} does not fit obs {obs_dim}/act {act_dim}"
            )
    out = {}
    for key, arr in batch.items():
        if key == "obs":
            out[key] = np.concatenate([t.apply_obs(arr) for t in transforms])
        elif key == "act":
            out[key] = np.concatenate([t.apply_act(arr) for t in transforms])
        else:
            out[key] = np.concatenate([arr for _ in transforms])
    return out


# --------------------------------------------------------------------- PPO ----


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    lr: float = 3e-4
    c_value: float = 0.5
    c_entropy: float = 0.005
    max_kl: float = 0.5
    grad_clip: float = 1.0
    normalize_adv: bool = True


@dataclass
class PPOStats:
    surrogate: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    kl: float = 0.0
    clip_frac: float = 0.0
    epochs_run: int = 0


class PPO:
    """Clipped-surrogate PPO over one of the two policy heads."""

    def __init__(self, policy, value_net: ValueNet, cfg: PPOConfig = None, seed: int = 0):
        self.policy = policy
        self.value_net = value_net
        self.cfg = cfg or PPOConfig()
        self.params = {}
        self.params.update(policy.params())
        self.params.update(value_net.params())
        self.opt = ad.AdamState.for_params(self.params, lr=self.cfg.lr)
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.hybrid = isinstance(policy, HybridPolicy)

    # losses are built on the tape below; everything else is numpy plumbing

    def _policy_terms(self, obs: np.ndarray, batch: dict, idx: np.ndarray):
        pol = self.policy
        out = pol.forward_t(Tensor(obs))
        act = Tensor(batch["act"][idx])
        log_std = pol.log_std
        C = pol.cmd_dim if self.hybrid else pol.act_dim
        if self.hybrid:
            S = pol.n_skills
            logits = ad.crop(out, (slice(None), slice(0, S)))
            mean = ad.crop(out, (slice(None), slice(S, S + C)))
            lse = ad.logsumexp(logits, axis=1)
            logp_all = ad.sub(logits, lse)
            onehot = np.zeros((len(idx), S), dtype=np.float32)
            onehot[np.arange(len(idx)), batch["skill"][idx]] = 1.0
            cat_logp = ad.sum_(ad.mul(logp_all, Tensor(onehot)), axis=1)
            probs = ad.exp(logp_all)
            cat_ent = ad.neg(ad.sum_(ad.mul(probs, logp_all), axis=1))
        else:
            mean = out
            cat_logp = None
            cat_ent = None
        inv_std = ad.exp(ad.neg(log_std))
        z = ad.mul(ad.sub(act, mean), ad.reshape(inv_std, (1, C)))
        quad = ad.sum_(ad.square(z), axis=1)
        logdet = ad.sum_(log_std)
        gauss_logp = ad.sub(
            ad.mul(Tensor(np.float32(-0.5)), quad),
            ad.add(logdet, Tensor(np.float32(0.5 * C * LOG_2PI))),
        )
        logp = gauss_logp if cat_logp is None else ad.add(gauss_logp, cat_logp)
        gauss_ent = ad.add(logdet, Tensor(np.float32(0.5 * C * (1.0 + LOG_2PI))))
        if cat_ent is None:
            ent = gauss_ent  # scalar; same for every sample
        else:
            ent = ad.add(ad.mean(cat_ent), gauss_ent)
        return logp, ent

    def update(self, batch: dict) -> PPOStats:
        cfg = self.cfg
        M = batch["obs"].shape[0]
        adv = batch["adv"].astype(np.float32).copy()
        if cfg.normalize_adv:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        stats = PPOStats()
        samples = 0
        stop = False
        for epoch in range(cfg.epochs):
            order = self.rng.permutation(M)
            for mb in np.array_split(order, cfg.minibatches):
                if len(mb) == 0:
                    continue
                obs = batch["obs"][mb]
                with ad.Tape() as tape:
                    logp, ent = self._policy_terms(obs, batch, mb)
                    logp_old = Tensor(batch["logp"][mb])
                    ratio = ad.exp(ad.sub(logp, logp_old))
                    a_t = Tensor(adv[mb])
                    lo = np.float32(1.0 - cfg.clip)
                    hi = np.float32(1.0 + cfg.clip)
                    clipped = ad.minimum(ad.maximum(ratio, lo), hi)
                    surr = ad.mean(ad.minimum(ad.mul(ratio, a_t), ad.mul(clipped, a_t)))
                    v = self.value_net.forward_t(Tensor(obs))
                    ret = Tensor(batch["ret"][mb][:, None])
                    v_loss = ad.mean(ad.square(ad.sub(v, ret)))
                    loss = ad.sub(
                        ad.mul(Tensor(np.float32(cfg.c_value)), v_loss),
                        ad.add(surr, ad.mul(Tensor(np.float32(cfg.c_entropy)), ad.mean(ent))),
                    )
                    ad.backward(tape, loss)
                if cfg.grad_clip > 0:
                    ad.clip_grads(self.params, cfg.grad_clip)
                ad.adam_step(self.opt, self.params)
                n = len(mb)
                kl = float(np.mean(batch["logp"][mb] - logp.data))
                stats.surrogate += float(surr.data) * n
                stats.value_loss += float(v_loss.data) * n
                stats.entropy += float(np.mean(ent.data)) * n
                stats.kl += kl * n
                stats.clip_frac += float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip)) * n
                samples += n
                if kl > cfg.max_kl:
                    stop = True
                    break
            stats.epochs_run = epoch + 1
            if stop:
                break
        if samples:
            stats.surrogate /= samples
            stats.value_loss /= samples
            stats.entropy /= samples
            stats.kl /= samples
            stats.clip_frac /= samples
        return stats
