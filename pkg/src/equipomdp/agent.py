"""Recurrent advantage actor-critic over parallel CarFlag environments.

The policy runs a feature extractor (convolutions for image observations),
a recurrent cell, and separate actor/critic heads. The ``equi`` variant
assembles every stage from constrained layers so the actor permutes and the
critic is unchanged under the domain symmetry no matter what the parameter
values are; ``plain`` uses unconstrained twins of the same sizes. Collection
uses a tape-free numpy path; updates rebuild the graph over the segment and
backpropagate through time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, clip_grad_norm
from .envs import (
    CarFlag1dConfig,
    CarFlag2dConfig,
    EnvError,
    VectorEnv,
    env_group_binding,
    make_env,
)
from .nn import (
    Conv2dStack,
    DenseConv2d,
    EquiConv2d,
    dense_head,
    dense_lstm_cell,
    equi_actor_head,
    equi_critic_head,
    equi_lstm_cell,
    initial_state_np,
)
from .groups import direct_sum, regular_rep, sign_rep


class AgentError(ValueError):
    pass


class NonFiniteLossError(AgentError):
    pass


VARIANTS = ("equi", "plain", "equi-actor-only", "equi-critic-only")


@dataclass(frozen=True)
class AgentConfig:
    variant: str = "equi"
    lstm_init: str = "zero"          # zero | random (random breaks equivariance)
    n_envs: int = 16
    n_steps: int = 5
    discount: float = 0.99
    learning_rate: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    grad_clip: float = 0.5
    total_steps: int = 100_000
    eval_interval: int = 5_000
    eval_episodes: int = 40
    eval_greedy: bool = False
    seed: int = 0
    lstm_fields: int = 16
    head_fields: int = 16
    conv_fields: tuple = (4, 8)
    lstm_single_tanh: bool = False
    feed_prev_action: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise AgentError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")
        if not 0.0 <= self.discount < 1.0:
            raise AgentError("discount must be in [0, 1)")
        if min(self.value_coef, self.entropy_coef, self.grad_clip) < 0:
            raise AgentError("loss coefficients must be nonnegative")
        if self.lstm_init not in ("zero", "random"):
            raise AgentError("lstm_init must be 'zero' or 'random'")


# ---------------------------------------------------------------------------
# Policy network.
# ---------------------------------------------------------------------------

class RecurrentPolicy:
    def __init__(self, env_config, agent_config: AgentConfig, rng: np.random.Generator):
        self.env_config = env_config
        self.config = agent_config
        self.sym = env_group_binding(env_config)
        group = self.sym.group
        variant = agent_config.variant
        trunk_equi = variant != "plain"
        self.lstm_init = agent_config.lstm_init

        self.feed_prev_action = agent_config.feed_prev_action
        if isinstance(env_config, CarFlag1dConfig):
            self.n_actions = 2
            self.obs_shape = (2,)
            self._scale = np.array([1.0 / env_config.half_size, 1.0])
            self.extractor = None
            feat_dim = 2
            rho_x = self.sym.obs_rep
            if self.feed_prev_action:
                # the previous action enters as one signed component: the mirror
                # swaps left/right, so the encoding must flip sign with it
                feat_dim += 1
                rho_x = direct_sum([*rho_x.components, sign_rep(group)])
        elif isinstance(env_config, CarFlag2dConfig):
            self.n_actions = 4
            n = env_config.grid_size
            self.obs_shape = (2, n, n)
            self._scale = None
            depth = (n - 1) // 2
            widths = list(agent_config.conv_fields)
            while len(widths) < depth:
                widths.append(widths[-1])
            widths = widths[:depth]
            layers = []
            for i, w in enumerate(widths):
                if trunk_equi:
                    in_fields = 2 if i == 0 else widths[i - 1]
                    in_kind = "trivial" if i == 0 else "regular"
                    layers.append(EquiConv2d(group, in_fields, in_kind, w, 3, rng,
                                             name=f"extract{i}", padding="valid"))
                else:
                    in_ch = 2 if i == 0 else widths[i - 1] * group.order
                    layers.append(DenseConv2d(in_ch, w * group.order, 3, rng,
                                              name=f"extract{i}", padding="valid"))
            self.extractor = Conv2dStack(layers)
            feat_dim = widths[-1] * group.order
            rho_x = direct_sum([regular_rep(group)] * widths[-1])
            if self.feed_prev_action:
                # one-hot previous action permutes with the rotation: regular field
                feat_dim += group.order
                rho_x = direct_sum([*rho_x.components, regular_rep(group)])
        else:
            raise EnvError(f"unknown env config {type(env_config).__name__}")

        if trunk_equi:
            self.cell = equi_lstm_cell(group, rho_x, agent_config.lstm_fields, rng,
                                       name="lstm",
                                       single_candidate_tanh=agent_config.lstm_single_tanh)
        else:
            self.cell = dense_lstm_cell(feat_dim, agent_config.lstm_fields * group.order,
                                        rng, name="lstm",
                                        single_candidate_tanh=agent_config.lstm_single_tanh)
        self.hidden_dim = self.cell.hidden_dim

        actor_equi = variant in ("equi", "equi-actor-only")
        critic_equi = variant in ("equi", "equi-critic-only")
        if actor_equi and self.n_actions != group.order:
            raise AgentError(
                f"equivariant actor needs one action per group element "
                f"({group.order}), env has {self.n_actions}")
        head_hidden = agent_config.head_fields * group.order
        if actor_equi:
            self.actor = equi_actor_head(group, self.cell.rho_h,
                                         agent_config.head_fields, rng, name="actor")
        else:
            self.actor = dense_head(self.hidden_dim, head_hidden, self.n_actions,
                                    rng, name="actor")
        if critic_equi:
            self.critic = equi_critic_head(group, self.cell.rho_h,
                                           agent_config.head_fields, rng, name="critic")
        else:
            self.critic = dense_head(self.hidden_dim, head_hidden, 1, rng, name="critic")
        self._modules = ([] if self.extractor is None else [self.extractor]) + [
            self.cell, self.actor, self.critic]
        names = [p.name for m in self._modules for p in m.parameters()]
        if len(names) != len(set(names)):
            raise AgentError("duplicate parameter names in the policy")

    def describe(self) -> list[str]:
        """Ordered layer list with representation annotations."""

        def rep_name(rep, dim):
            if rep is None:
                return f"{dim} units"
            counts = {}
            for comp in rep.components:
                counts[comp.kind] = counts.get(comp.kind, 0) + 1
            return " + ".join(f"{n}*{kind}" for kind, n in counts.items())

        lines = []
        if self.extractor is not None:
            for layer in self.extractor.layers:
                lines.append(
                    f"conv3x3 {rep_name(layer.rho_in, layer.in_channels)} -> "
                    f"{rep_name(layer.rho_out, layer.out_channels)} (relu)")
        cell_in = rep_name(self.cell.rho_x,
                           self.cell.linear.in_dim - self.hidden_dim)
        lines.append(f"lstm {cell_in} -> {rep_name(self.cell.rho_h, self.hidden_dim)}")
        for name, head, out_dim in (("actor", self.actor, self.n_actions),
                                    ("critic", self.critic, 1)):
            parts = [rep_name(l.rho_in, l.in_dim) for l in head.layers]
            parts.append(rep_name(head.rho_out, out_dim))
            lines.append(f"{name} " + " -> ".join(parts))
        return lines

    # -- parameters ---------------------------------------------------------
    def parameters(self):
        return [p for m in self._modules for p in m.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def sync(self):
        for m in self._modules:
            m.sync()

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        if set(state) != set(params):
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            raise AgentError(f"checkpoint mismatch: missing {missing}, extra {extra}")
        for name, value in state.items():
            if params[name].value.shape != value.shape:
                raise AgentError(f"checkpoint shape mismatch on {name}")
            params[name].value = value.astype(np.float64).copy()
        self.sync()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters().items()}

    # -- forward ------------------------------------------------------------
    def initial_state(self, batch: int, rng: np.random.Generator | None = None):
        return initial_state_np(self.cell, batch, self.lstm_init, rng)

    def _encode(self, obs: np.ndarray) -> np.ndarray:
        return obs * self._scale if self._scale is not None else obs

    def encode_prev_action(self, prev: np.ndarray) -> np.ndarray:
        """Encode previous actions; -1 marks an episode start (zero vector)."""
        prev = np.asarray(prev, dtype=np.int64)
        if self.n_actions == 2:
            return np.where(prev < 0, 0.0, 2.0 * prev - 1.0)[:, None]
        out = np.zeros((prev.shape[0], self.n_actions))
        live = prev >= 0
        out[np.nonzero(live)[0], prev[live]] = 1.0
        return out

    def _features_np(self, obs: np.ndarray, prev: np.ndarray | None) -> np.ndarray:
        x = self._encode(obs)
        if self.extractor is not None:
            x = self.extractor.fwd_np(x)
            x = x.reshape(x.shape[0], -1)
        if self.feed_prev_action:
            x = np.concatenate([x, self.encode_prev_action(prev)], axis=-1)
        return x

    def step_np(self, obs: np.ndarray, h: np.ndarray, c: np.ndarray,
                prev: np.ndarray | None = None):
        """One recurrent step without a tape: (logits, values, h', c')."""
        x = self._features_np(obs, prev)
        h2, c2 = self.cell.step_np(x, h, c)
        logits = self.actor.fwd_np(h2)
        values = self.critic.fwd_np(h2)[:, 0]
        return logits, values, h2, c2

    def realize(self):
        out = {"cell": self.cell.realize_t(),
               "actor": self.actor.realize_t(),
               "critic": self.critic.realize_t()}
        if self.extractor is not None:
            out["extract"] = self.extractor.realize_t()
        return out

    def step_t(self, obs: np.ndarray, h: Tensor, c: Tensor, realized,
               prev: np.ndarray | None = None):
        x = ad.constant(self._encode(obs))
        if self.extractor is not None:
            x = self.extractor.forward_t(x, realized["extract"])
            x = ad.reshape(x, (x.value.shape[0], -1))
        if self.feed_prev_action:
            x = ad.concat([x, ad.constant(self.encode_prev_action(prev))], axis=-1)
        h2, c2 = self.cell.step_t(x, h, c, realized["cell"])
        logits = self.actor.forward_t(h2, realized["actor"])
        values = ad.reshape(self.critic.forward_t(h2, realized["critic"]),
                            (h2.value.shape[0],))
        return logits, values, h2, c2


def sample_categorical(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.random((logits.shape[0], 1))
    return np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), logits.shape[-1] - 1)


# ---------------------------------------------------------------------------
# Rollout collection and returns.
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    obs: np.ndarray             # (T, B, *obs_shape)
    prev_actions: np.ndarray    # (T, B) int; -1 marks an episode start
    actions: np.ndarray         # (T, B) int
    rewards: np.ndarray         # (T, B)
    terminated: np.ndarray      # (T, B) bool
    truncated: np.ndarray       # (T, B) bool
    values: np.ndarray          # (T, B) collection-time critic estimates
    logps: np.ndarray           # (T, B) log-prob of the sampled action
    entropies: np.ndarray       # (T, B) policy entropy at collection time
    trunc_bootstrap: np.ndarray  # (T, B) V(final obs) where truncated, else 0
    reset_mask: np.ndarray      # (T, B) 1.0 where the recurrent state was reinitialized
    reset_h: np.ndarray         # (T, B, H) injected state rows
    reset_c: np.ndarray         # (T, B, H)
    start_h: np.ndarray         # (B, H)
    start_c: np.ndarray         # (B, H)
    bootstrap_value: np.ndarray  # (B,)
    episodes_finished: int = 0

    @property
    def n_transitions(self) -> int:
        return self.rewards.size


def start_carry(policy: RecurrentPolicy, venv: VectorEnv,
                state_rng: np.random.Generator | None = None) -> dict:
    obs = venv.reset_all()
    h, c = policy.initial_state(len(venv), state_rng)
    prev = np.full(len(venv), -1, dtype=np.int64)
    return {"obs": obs, "h": h, "c": c, "prev": prev, "state_rng": state_rng}


def collect_rollouts(policy: RecurrentPolicy, venv: VectorEnv, n_steps: int,
                     rng: np.random.Generator, carry: dict) -> RolloutBatch:
    """Advance every env ``n_steps`` steps, sampling from the actor."""
    b = len(venv)
    h, c, obs, prev = carry["h"], carry["c"], carry["obs"], carry["prev"]
    state_rng = carry.get("state_rng")
    shape = policy.obs_shape
    batch = RolloutBatch(
        obs=np.zeros((n_steps, b, *shape)),
        prev_actions=np.zeros((n_steps, b), dtype=np.int64),
        actions=np.zeros((n_steps, b), dtype=np.int64),
        rewards=np.zeros((n_steps, b)),
        terminated=np.zeros((n_steps, b), dtype=bool),
        truncated=np.zeros((n_steps, b), dtype=bool),
        values=np.zeros((n_steps, b)),
        logps=np.zeros((n_steps, b)),
        entropies=np.zeros((n_steps, b)),
        trunc_bootstrap=np.zeros((n_steps, b)),
        reset_mask=np.zeros((n_steps, b)),
        reset_h=np.zeros((n_steps, b, policy.hidden_dim)),
        reset_c=np.zeros((n_steps, b, policy.hidden_dim)),
        start_h=h.copy(),
        start_c=c.copy(),
        bootstrap_value=np.zeros(b),
    )
    for t in range(n_steps):
        batch.obs[t] = obs
        batch.prev_actions[t] = prev
        logits, values, h, c = policy.step_np(obs, h, c, prev)
        actions = sample_categorical(logits, rng)
        batch.actions[t] = actions
        batch.values[t] = values
        logp = logits - logits.max(axis=-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        batch.logps[t] = logp[np.arange(b), actions]
        batch.entropies[t] = -(np.exp(logp) * logp).sum(axis=-1)
        next_obs = np.array(obs)
        next_prev = actions.copy()
        done_rows = []
        for i in range(b):
            o, r, term, trunc = venv.step_one(i, int(actions[i]))
            next_obs[i] = o
            batch.rewards[t, i] = r
            batch.terminated[t, i] = term
            batch.truncated[t, i] = trunc
            if term or trunc:
                done_rows.append(i)
        trunc_rows = [i for i in done_rows if batch.truncated[t, i]]
        if trunc_rows:
            # bootstrap value of the final observation under the post-step state
            _, v_fin, _, _ = policy.step_np(next_obs[trunc_rows], h[trunc_rows],
                                            c[trunc_rows], next_prev[trunc_rows])
            batch.trunc_bootstrap[t, trunc_rows] = v_fin
        for i in done_rows:
            next_obs[i] = venv.reset_one(i)
            next_prev[i] = -1
            nh, nc = policy.initial_state(1, state_rng)
            h[i], c[i] = nh[0], nc[0]
            batch.reset_mask[t, i] = 1.0
            batch.reset_h[t, i] = nh[0]
            batch.reset_c[t, i] = nc[0]
            assert np.array_equal(h[i], batch.reset_h[t, i])  # boundary hygiene
        batch.episodes_finished += len(done_rows)
        obs = next_obs
        prev = next_prev
    _, v_boot, _, _ = policy.step_np(obs, h, c, prev)
    batch.bootstrap_value = v_boot
    carry.update(obs=obs, h=h, c=c, prev=prev)
    return batch


def compute_returns(batch: RolloutBatch, discount: float):
    """n-step targets: cut at terminals, bootstrap at truncations and segment end."""
    n_steps, b = batch.rewards.shape
    returns = np.zeros((n_steps, b))
    future = batch.bootstrap_value.copy()
    for t in range(n_steps - 1, -1, -1):
        carried = np.where(batch.terminated[t], 0.0,
                           np.where(batch.truncated[t], batch.trunc_bootstrap[t], future))
        future = batch.rewards[t] + discount * carried
        returns[t] = future
    advantages = returns - batch.values
    return returns, advantages


# ---------------------------------------------------------------------------
# Update.
# ---------------------------------------------------------------------------

def segment_loss(policy: RecurrentPolicy, batch: RolloutBatch, config: AgentConfig,
                 returns: np.ndarray, advantages: np.ndarray):
    """Build the A2C loss graph over one collected segment (backprop through time)."""
    realized = policy.realize()
    h = ad.constant(batch.start_h)
    c = ad.constant(batch.start_c)
    pol_terms, ent_terms, val_terms = [], [], []
    n_steps = batch.rewards.shape[0]
    for t in range(n_steps):
        logits, values, h, c = policy.step_t(batch.obs[t], h, c, realized,
                                             batch.prev_actions[t])
        logp = ad.log_softmax(logits)
        lp_taken = ad.gather_rows(logp, batch.actions[t])
        pol_terms.append(ad.hadamard(ad.constant(advantages[t]), lp_taken))
        ent_terms.append(ad.scale(ad.sum_axis(ad.hadamard(ad.exp(logp), logp), -1), -1.0))
        diff = ad.add(ad.constant(returns[t]), ad.scale(values, -1.0))
        val_terms.append(ad.hadamard(diff, diff))
        if batch.reset_mask[t].any():
            keep = ad.constant(np.repeat(1.0 - batch.reset_mask[t, :, None],
                                         policy.hidden_dim, axis=1))
            h = ad.add(ad.hadamard(h, keep),
                       ad.constant(batch.reset_h[t] * batch.reset_mask[t, :, None]))
            c = ad.add(ad.hadamard(c, keep),
                       ad.constant(batch.reset_c[t] * batch.reset_mask[t, :, None]))
    policy_loss = ad.scale(ad.mean(ad.concat(pol_terms, axis=-1)), -1.0)
    value_loss = ad.mean(ad.concat(val_terms, axis=-1))
    entropy = ad.mean(ad.concat(ent_terms, axis=-1))
    loss = ad.add(policy_loss,
                  ad.add(ad.scale(value_loss, config.value_coef),
                         ad.scale(entropy, -config.entropy_coef)))
    stats = {
        "loss": float(loss.value),
        "policy_loss": float(policy_loss.value),
        "value_loss": float(value_loss.value),
        "entropy": float(entropy.value),
    }
    return loss, stats


def a2c_update(policy: RecurrentPolicy, opt: Adam, batch: RolloutBatch,
               config: AgentConfig):
    """One gradient step on policy, value, and entropy losses over the segment."""
    returns, advantages = compute_returns(batch, config.discount)
    loss, stats = segment_loss(policy, batch, config, returns, advantages)
    if not np.isfinite(loss.value):
        raise NonFiniteLossError(f"non-finite loss; diagnostics snapshot: {stats}")
    ad.backward(loss)
    stats["grad_norm"] = clip_grad_norm(policy.parameters(), config.grad_clip)
    opt.step()
    policy.sync()
    return stats


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------

class PolicyRunner:
    """Episode-level wrapper: fresh recurrent state per episode."""

    def __init__(self, policy: RecurrentPolicy, greedy: bool = False,
                 state_rng: np.random.Generator | None = None):
        self.policy = policy
        self.greedy = greedy
        self.state_rng = state_rng
        self.h = None
        self.c = None
        self.prev = None

    def reset(self):
        self.h, self.c = self.policy.initial_state(1, self.state_rng)
        self.prev = np.full(1, -1, dtype=np.int64)

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> int:
        logits, _, self.h, self.c = self.policy.step_np(obs[None], self.h, self.c,
                                                        self.prev)
        if self.greedy:
            action = int(np.argmax(logits[0]))
        else:
            action = int(sample_categorical(logits, rng)[0])
        self.prev[0] = action
        return action


def run_episodes(agent_like, env, episodes: int, rng: np.random.Generator):
    """Success rate (terminal with positive reward) and mean undiscounted return."""
    successes, returns = 0, []
    for _ in range(episodes):
        obs = env.reset()
        agent_like.reset()
        total = 0.0
        while True:
            a = agent_like.act(obs, rng)
            obs, reward, term, trunc = env.step(a)
            total += reward
            if term or trunc:
                if term and reward > 0:
                    successes += 1
                break
        returns.append(total)
    return successes / episodes, float(np.mean(returns))


def evaluate(policy: RecurrentPolicy, env_config, episodes: int,
             rng: np.random.Generator, greedy: bool = False,
             state_rng: np.random.Generator | None = None):
    env = make_env(env_config, rng)
    runner = PolicyRunner(policy, greedy=greedy, state_rng=state_rng)
    return run_episodes(runner, env, episodes, rng)


class OracleQPolicy:
    """Greedy play from an exact finite-horizon solution over histories."""

    def __init__(self, solution, maps):
        self.solution = solution
        self.maps = maps
        self.history = None

    def reset(self):
        self.history = None

    def act(self, obs: np.ndarray, rng=None) -> int:
        o = self.maps.obs_id_of_array(obs)
        self.history = (o,) if self.history is None else self.history + (o,)
        row = self.solution.q.get(self.history)
        if row is None:
            raise AgentError(
                f"history of length {len(self.history) // 2} exceeds the solved horizon")
        a = int(np.argmax(row))
        self.history = self.history + (a,)
        return a


# ---------------------------------------------------------------------------
# Whole-network equivariance suite.
# ---------------------------------------------------------------------------

def equivariance_residuals(policy: RecurrentPolicy, histories: int, max_len: int,
                           rng: np.random.Generator,
                           state_rng: np.random.Generator | None = None):
    """Worst actor/critic equivariance violation over random histories.

    Feeds each random observation sequence and all its group transforms
    through the network from the same initial state; the actor logits must
    permute by the action map and the critic must not move at all.
    """
    sym = policy.sym
    group = sym.group
    worst_actor, worst_critic = 0.0, 0.0
    for _ in range(histories):
        length = int(rng.integers(1, max_len + 1))
        seq = [rng.normal(size=policy.obs_shape) for _ in range(length)]
        prev_seq = np.concatenate([[-1], rng.integers(0, policy.n_actions, length - 1)])
        h0, c0 = policy.initial_state(1, state_rng)
        outs = {}
        for g in group.elements:
            h, c = h0.copy(), c0.copy()
            for obs, prev in zip(seq, prev_seq):
                gobs = sym.act_on_obs(g, obs)
                gprev = np.array([-1 if prev < 0 else sym.act_on_action(g, int(prev))])
                logits, values, h, c = policy.step_np(gobs[None], h, c, gprev)
            outs[g] = (logits[0], values[0])
        base_logits, base_value = outs[0]
        for g in group.elements:
            if g == 0:
                continue
            logits_g, value_g = outs[g]
            perm = sym.action_map[g]
            worst_actor = max(worst_actor,
                              float(np.max(np.abs(logits_g[perm] - base_logits))))
            worst_critic = max(worst_critic, abs(value_g - base_value))
    return worst_actor, worst_critic


def run_equivariance_suite(networks: int = 100, histories: int = 10, max_len: int = 50,
                           seed: int = 0, lstm_init: str = "zero",
                           grid_size: int = 3, lstm_fields: int = 3,
                           head_fields: int = 3, conv_fields: tuple = (2,)):
    """Random equivariant networks on both domains; returns the worst residuals."""
    rng = np.random.default_rng(seed)
    worst = {"actor": 0.0, "critic": 0.0}
    configs = [CarFlag1dConfig(half_size=10), CarFlag2dConfig(grid_size=grid_size)]
    for i in range(networks):
        env_cfg = configs[i % len(configs)]
        agent_cfg = AgentConfig(variant="equi", lstm_init=lstm_init,
                                lstm_fields=lstm_fields, head_fields=head_fields,
                                conv_fields=conv_fields)
        net_rng = np.random.default_rng(np.random.SeedSequence((seed, 7, i)))
        policy = RecurrentPolicy(env_cfg, agent_cfg, net_rng)
        state_rng = np.random.default_rng(np.random.SeedSequence((seed, 11, i)))
        a, c = equivariance_residuals(policy, histories, max_len, rng,
                                      state_rng=state_rng)
        worst["actor"] = max(worst["actor"], a)
        worst["critic"] = max(worst["critic"], c)
    worst["max"] = max(worst["actor"], worst["critic"])
    return worst


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------

CURVE_HEADER = "step,episodes,success_rate,mean_return,policy_loss,value_loss,entropy,seed"


@dataclass
class TrainResult:
    rows: list
    curve_path: str | None
    best_checkpoint: str | None
    final_checkpoint: str | None
    policy: RecurrentPolicy
    episodes: int
    wall_seconds: float


def _curve_line(row) -> str:
    return ("%d,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%d" % row)


def train(env_config, config: AgentConfig, out_dir=None) -> TrainResult:
    """Alternate rollout collection and updates; log evaluations at intervals."""
    t_start = time.perf_counter()
    root = np.random.SeedSequence(config.seed)
    params_ss, env_ss, sample_ss, state_ss = root.spawn(4)
    rng_params = np.random.default_rng(params_ss)
    rng_sample = np.random.default_rng(sample_ss)
    state_rng = np.random.default_rng(state_ss) if config.lstm_init == "random" else None

    policy = RecurrentPolicy(env_config, config, rng_params)
    opt = Adam(policy.parameters(), config.learning_rate)
    venv = VectorEnv(env_config, config.n_envs, env_ss)
    carry = start_carry(policy, venv, state_rng)

    rows = []
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    steps_done = 0
    episodes = 0
    eval_idx = 0
    next_eval = config.eval_interval
    best_success = -1.0
    best_path = final_path = curve_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        best_path = out_dir / "best.ckpt"
        final_path = out_dir / "final.ckpt"
        curve_path = out_dir / "curve.csv"
        ad.save_checkpoint(best_path, policy.state_dict())

    def run_eval(step):
        nonlocal eval_idx, best_success
        eval_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 101, eval_idx)))
        eval_state_rng = (np.random.default_rng(np.random.SeedSequence((config.seed, 103, eval_idx)))
                          if config.lstm_init == "random" else None)
        eval_idx += 1
        success, mean_return = evaluate(policy, env_config, config.eval_episodes,
                                        eval_rng, greedy=config.eval_greedy,
                                        state_rng=eval_state_rng)
        rows.append((step, episodes, success, mean_return,
                     stats.get("policy_loss", 0.0), stats.get("value_loss", 0.0),
                     stats.get("entropy", 0.0), config.seed))
        if out_dir is not None and success >= best_success:
            best_success = success
            ad.save_checkpoint(best_path, policy.state_dict())
        return success

    try:
        while steps_done < config.total_steps:
            batch = collect_rollouts(policy, venv, config.n_steps, rng_sample, carry)
            stats = a2c_update(policy, opt, batch, config)
            steps_done += batch.n_transitions
            episodes += batch.episodes_finished
            while steps_done >= next_eval and next_eval <= config.total_steps:
                run_eval(steps_done)
                next_eval += config.eval_interval
        if config.total_steps > 0 and (not rows or rows[-1][0] != steps_done):
            run_eval(steps_done)
    finally:
        if out_dir is not None:
            with open(curve_path, "w") as f:
                f.write(CURVE_HEADER + "\n")
                for row in rows:
                    f.write(_curve_line(row) + "\n")
            ad.save_checkpoint(final_path, policy.state_dict())
    return TrainResult(rows, None if curve_path is None else str(curve_path),
                       None if best_path is None else str(best_path),
                       None if final_path is None else str(final_path),
                       policy, episodes, time.perf_counter() - t_start)


def steps_to_threshold(rows, threshold: float):
    """First evaluation step whose success rate reaches the threshold, else None."""
    for row in rows:
        if row[2] >= threshold:
            return row[0]
    return None


def benchmark_env_config() -> CarFlag1dConfig:
    return CarFlag1dConfig(half_size=10)


def benchmark_agent_config(variant: str, seed: int,
                           total_steps: int = 300_000) -> AgentConfig:
    """Sample-efficiency benchmark setup: both methods share every training
    hyperparameter; widths are chosen so free-parameter counts match (the
    constrained layers have roughly half the parameters per unit width)."""
    fields = 24 if variant.startswith("equi") else 16
    return AgentConfig(variant=variant, seed=seed, total_steps=total_steps,
                       eval_interval=10_000, eval_episodes=100, n_steps=20,
                       learning_rate=1e-3, lstm_fields=fields, head_fields=fields,
                       feed_prev_action=True)


def a2c_loss_gradcheck(seed: int = 0) -> float:
    """Finite-difference check of the full recurrent loss on a toy batch."""
    env_cfg = CarFlag1dConfig(half_size=5)
    cfg = AgentConfig(variant="equi", n_envs=2, n_steps=2, lstm_fields=2,
                      head_fields=2, seed=seed)
    policy = RecurrentPolicy(env_cfg, cfg, np.random.default_rng(seed))
    venv = VectorEnv(env_cfg, 2, np.random.SeedSequence(seed + 1))
    carry = start_carry(policy, venv)
    batch = collect_rollouts(policy, venv, 2, np.random.default_rng(seed + 2), carry)
    returns, advantages = compute_returns(batch, cfg.discount)

    def build():
        return segment_loss(policy, batch, cfg, returns, advantages)[0]

    return ad.gradcheck(build, policy.parameters())
