"""Graph-attention actor-critic tracker.

All networks share one :class:`~gels.diffnum.ParamStore`:

* ``embed``: one row per viewer id plus a final row standing in for the CDN
* ``enc.W``, ``enc.alpha``: QoE-weighted attention over a viewer's providers
* ``actor.W1``, ``actor.W2``: two-layer head producing a distribution over providers
* ``critic.*``: two-layer MLP scoring (state, one-hot action) pairs

Batches of neighborhoods are padded to the widest one; padded slots are masked out of the
attention softmax, so a viewer with no providers encodes to the zero state.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .diffnum import Graph, ParamStore, backward, sgd_step
from .graph import CDN, EventTrace, Neighborhood, neighborhood
from .qoe import LABEL_CENTERS, QoeConfig, QoeLabel, kl_divergence, normalize_qoe

ENCODER = ("embed", "enc.W", "enc.alpha")
ACTOR_HEAD = ("actor.W1", "actor.W2")
CRITIC = ("critic.W1", "critic.b1", "critic.W2", "critic.b2")


class NoActionError(ValueError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    embed_dim: int = 128
    state_dim: int = 32
    hidden_dim: int = 64
    gamma: float = 0.96
    epsilon: float = 0.2
    buffer_k: int = 64
    eta: float = 1e-3
    # rescales the critic-side and actor-head gradients so each has norm at most this (None: never)
    clip_norm: float | None = None
    # add the viewer's own transformed embedding W z_u to the attended neighbor sum
    self_term: bool = True
    # actor-head step relative to the critic step; below one lets the critic lead
    actor_scale: float = 1.0
    # weight of the policy entropy bonus in the actor objective
    entropy_weight: float = 0.0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.buffer_k < 1:
            raise ValueError("buffer_k must be at least 1")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive or None")
        if self.actor_scale < 0 or self.entropy_weight < 0:
            raise ValueError("actor_scale and entropy_weight must be nonnegative")


def init_params(n_actions: int, cfg: AgentConfig = AgentConfig(), seed: int = 0) -> ParamStore:
    l, d, m = cfg.embed_dim, cfg.state_dim, cfg.hidden_dim
    store = ParamStore(seed)
    store.add("embed", (n_actions + 1, l), fan_in=1)
    store.add("enc.W", (d, l), fan_in=l)
    store.add("enc.alpha", (2 * d,), fan_in=2 * d)
    store.add("actor.W1", (m, d), fan_in=d)
    store.add("actor.W2", (n_actions, m), fan_in=m)
    store.add("critic.W1", (m, d + n_actions), fan_in=d + n_actions)
    store.add("critic.b1", (m,), zeros=True)
    store.add("critic.W2", (1, m), fan_in=m)
    store.add("critic.b2", (1,), zeros=True)
    return store


def n_actions_of(params: ParamStore) -> int:
    return params["actor.W2"].shape[0]


@dataclass
class NeighborhoodBatch:
    viewers: np.ndarray  # (B,)
    providers: np.ndarray  # (B, P) embedding rows
    qoe: np.ndarray  # (B, P)
    mask: np.ndarray  # (B, P) bool

    @classmethod
    def pack(cls, neighs: Sequence[Neighborhood], n_actions: int) -> "NeighborhoodBatch":
        width = max([len(nb) for nb in neighs] + [1])
        B = len(neighs)
        prov = np.zeros((B, width), dtype=int)
        q = np.zeros((B, width))
        mask = np.zeros((B, width), dtype=bool)
        for i, nb in enumerate(neighs):
            for j, (v, _, value) in enumerate(nb.providers):
                prov[i, j] = n_actions if v == CDN else v
                q[i, j] = value
                mask[i, j] = True
        return cls(np.array([nb.viewer for nb in neighs], dtype=int), prov, q, mask)


def _encode(g: Graph, batch: NeighborhoodBatch, self_term: bool = True):
    B, P = batch.providers.shape
    embed, W, alpha = g.param("embed"), g.param("enc.W"), g.param("enc.alpha")
    hu = g.linear(g.gather(embed, batch.viewers), W)  # (B, d)
    hv = g.linear(g.gather(embed, batch.providers), W)  # (B, P, d)
    d = hu.shape[-1]
    pair = g.concat([g.broadcast_to(g.reshape(hu, (B, 1, d)), (B, P, d)), hv], axis=-1)
    logits = g.relu(g.mul(g.const(batch.qoe), g.dot(pair, alpha)))
    coef = g.softmax(logits, mask=batch.mask)
    pooled = g.sum(g.mul(g.reshape(coef, (B, P, 1)), hv), axis=1)
    if self_term:
        # padded-only rows have all-zero coefficients, so an empty neighborhood still encodes to zero
        pooled = g.add(pooled, g.mul(g.const(batch.mask.any(axis=1, keepdims=True).astype(float)), hu))
    return g.relu(pooled), coef


def _actor_logits(g: Graph, state):
    return g.linear(g.relu(g.linear(state, g.param("actor.W1"))), g.param("actor.W2"))


def _critic(g: Graph, state, action_vec):
    x = g.concat([state, action_vec], axis=-1)
    h = g.relu(g.linear(x, g.param("critic.W1"), g.param("critic.b1")))
    out = g.linear(h, g.param("critic.W2"), g.param("critic.b2"))
    return g.reshape(out, out.shape[:-1])


def attention_coefficients(u: int, neigh: Neighborhood, params: ParamStore) -> dict[int, float]:
    if len(neigh) == 0:
        raise ValueError(f"viewer {u} has no providers to attend over")
    g = Graph(params)
    _, coef = _encode(g, NeighborhoodBatch.pack([neigh], n_actions_of(params)))
    return {v: float(c) for v, c in zip(neigh.ids, coef.value[0])}


def encode_states(neighs: Sequence[Neighborhood], params: ParamStore, self_term: bool = True) -> np.ndarray:
    g = Graph(params)
    state, _ = _encode(g, NeighborhoodBatch.pack(neighs, n_actions_of(params)), self_term)
    return state.value


def encode_state(u: int, neigh: Neighborhood, params: ParamStore, self_term: bool = True) -> np.ndarray:
    return encode_states([neigh], params, self_term)[0]


def actor_forward(s: np.ndarray, params: ParamStore, mask: np.ndarray | None = None) -> np.ndarray:
    """Distribution over provider ids for one state (d,) or a batch (B, d)."""
    g = Graph(params)
    return g.softmax(_actor_logits(g, g.const(s)), mask=mask).value


def critic_forward(s: np.ndarray, action_vec: np.ndarray, params: ParamStore) -> np.ndarray | float:
    g = Graph(params)
    q = _critic(g, g.const(s), g.const(action_vec)).value
    return float(q) if q.ndim == 0 else q


def one_hot(actions: Iterable[int], n_actions: int) -> np.ndarray:
    actions = np.asarray(list(actions), dtype=int)
    out = np.zeros((len(actions), n_actions))
    out[np.arange(len(actions)), actions] = 1.0
    return out


def select_action(dist, mask, epsilon: float, rng: np.random.Generator, viewer: int | None = None) -> int:
    """Epsilon-greedy choice among the ids allowed by ``mask`` (a set of ids or a bool vector)."""
    dist = np.asarray(dist, dtype=float)
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        allowed = np.flatnonzero(mask)
    else:
        allowed = np.array(sorted(mask), dtype=int)
    if viewer is not None:
        allowed = allowed[allowed != viewer]
    if allowed.size == 0:
        raise NoActionError(f"no allowed action for viewer {viewer}")
    if rng.random() < epsilon:
        return int(allowed[rng.integers(allowed.size)])
    # first maximum, so ties go to the smallest id
    return int(allowed[np.argmax(dist[allowed])])


@dataclass
class Transition:
    viewer: int
    neigh: Neighborhood
    action: int
    reward: float
    next_neigh: Neighborhood
    kl_score: float
    insert_order: int = -1
    state: np.ndarray | None = None
    next_state: np.ndarray | None = None


def transition_kl(neigh: Neighborhood, next_neigh: Neighborhood) -> float:
    value, _ = kl_divergence(neigh.qoe_map(), next_neigh.qoe_map())
    return max(value, 0.0)


@dataclass
class ReplayBuffer:
    """Keeps the ``k`` transitions with the largest KL score; among equal scores the newest win."""

    k: int
    # min-heap on (kl_score, insert_order), so the root is the next entry to go
    heap: list[tuple[float, int, Transition]] = field(default_factory=list)
    counter: int = 0

    def __len__(self):
        return len(self.heap)

    @property
    def items(self) -> list[Transition]:
        return [entry[2] for entry in self.heap]

    def insert(self, tr: Transition) -> None:
        tr.insert_order = self.counter
        self.counter += 1
        entry = (tr.kl_score, tr.insert_order, tr)
        if len(self.heap) < self.k:
            heapq.heappush(self.heap, entry)
        elif tr.kl_score >= self.heap[0][0]:
            heapq.heapreplace(self.heap, entry)

    def scores(self) -> list[tuple[float, int]]:
        return sorted(((t.kl_score, t.insert_order) for t in self.items), reverse=True)


def buffer_insert(buf: ReplayBuffer, tr: Transition) -> None:
    buf.insert(tr)


def td_targets(
    transitions: Sequence[Transition], params: ParamStore, gamma: float, self_term: bool = True
) -> np.ndarray:
    """``R + gamma * Q(s', a)`` evaluated at the current parameters."""
    n_actions = n_actions_of(params)
    g = Graph(params)
    s_next, _ = _encode(g, NeighborhoodBatch.pack([t.next_neigh for t in transitions], n_actions), self_term)
    q_next = _critic(g, s_next, g.const(one_hot([t.action for t in transitions], n_actions))).value
    rewards = np.array([t.reward for t in transitions])
    return rewards + gamma * q_next


def td_loss_graph(
    transitions: Sequence[Transition], params: ParamStore, gamma: float, targets=None, self_term: bool = True
):
    """Half mean squared TD error with the bootstrap target frozen as a constant."""
    g, loss, _ = _td_graph(transitions, params, gamma, targets, self_term)
    return g, loss


def _td_graph(transitions, params, gamma, targets, self_term):
    n_actions = n_actions_of(params)
    if targets is None:
        targets = td_targets(transitions, params, gamma, self_term)
    g = Graph(params)
    s, _ = _encode(g, NeighborhoodBatch.pack([t.neigh for t in transitions], n_actions), self_term)
    q = _critic(g, s, g.const(one_hot([t.action for t in transitions], n_actions)))
    err = g.sub(g.const(targets), q)
    loss = g.scale(g.mean(g.square(err)), 0.5)
    return g, loss, s


def actor_objective_graph(
    neighs: Sequence[Neighborhood],
    params: ParamStore,
    self_term: bool = True,
    states: np.ndarray | None = None,
    entropy_weight: float = 0.0,
):
    """Negated mean critic value (plus optional entropy bonus) of the actor's own distribution.

    The state is held fixed, so only the actor head receives gradient.
    """
    n_actions = n_actions_of(params)
    if states is None:
        states = encode_states(neighs, params, self_term)
    mask = np.ones((len(neighs), n_actions), dtype=bool)
    for i, nb in enumerate(neighs):
        if nb.viewer < n_actions:
            mask[i, nb.viewer] = False
    g = Graph(params)
    s = g.const(states)
    dist = g.softmax(_actor_logits(g, s), mask=mask)
    value = g.mean(_critic(g, s, dist))
    if entropy_weight:
        # mean of sum p log p is the negated entropy
        neg_entropy = g.scale(g.sum(g.mul(dist, g.log(dist))), 1.0 / len(neighs))
        value = g.sub(value, g.scale(neg_entropy, entropy_weight))
    return g, g.scale(value, -1.0)


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(v * v)) for v in grads.values()))
    if norm <= max_norm or norm == 0:
        return grads
    return {k: v * (max_norm / norm) for k, v in grads.items()}


def agent_gradients(transitions: Sequence[Transition], params: ParamStore, cfg: AgentConfig):
    """TD-loss gradients for encoder and critic plus actor-ascent gradients for the actor head."""
    g, loss, s = _td_graph(transitions, params, cfg.gamma, None, cfg.self_term)
    grads = backward(g, output=loss)
    grads = _clip({k: v for k, v in grads.items() if k in ENCODER or k in CRITIC}, cfg.clip_norm)
    ga, obj = actor_objective_graph(
        [t.neigh for t in transitions], params, cfg.self_term, states=s.value, entropy_weight=cfg.entropy_weight
    )
    actor_grads = backward(ga, output=obj)
    # clipped on its own so a large TD error cannot drown out the actor step
    actor_grads = _clip({k: actor_grads[k] for k in ACTOR_HEAD}, cfg.clip_norm)
    grads.update({k: cfg.actor_scale * v for k, v in actor_grads.items()})
    return float(loss.value), grads


def td_update(buf: ReplayBuffer, params: ParamStore, cfg: AgentConfig) -> float | None:
    """One SGD step on the buffer contents; returns the TD loss before the step, None if empty."""
    if len(buf) == 0:
        return None
    loss, grads = agent_gradients(buf.items, params, cfg)
    sgd_step(params, grads, cfg.eta)
    return loss


def predicted_quality(
    neighs: Sequence[Neighborhood],
    allowed: Sequence[Iterable[int] | None],
    params: ParamStore,
    cfg: AgentConfig,
    qoe_cfg: QoeConfig = QoeConfig(),
) -> np.ndarray:
    """Normalized next-minute QoE the critic expects under the greedy action, per viewer.

    The critic estimates a discounted sum of rewards, so it is scaled by ``1 - gamma`` to read as
    a per-minute QoE before normalization.
    """
    n_actions = n_actions_of(params)
    states = encode_states(neighs, params, cfg.self_term)
    dists = actor_forward(states, params)
    actions = []
    for nb, dist, ok in zip(neighs, dists, allowed):
        choices = set(range(n_actions)) if ok is None else set(ok)
        choices.discard(nb.viewer)
        if not choices:
            choices = set(range(n_actions)) - {nb.viewer}
        actions.append(select_action(dist, choices, 0.0, np.random.default_rng(0)))
    q = critic_forward(states, one_hot(actions, n_actions), params)
    q = np.atleast_1d(q)
    return np.array([normalize_qoe((1 - cfg.gamma) * v, qoe_cfg) for v in q])


def label_scores_from_quality(p_hat: float) -> dict[QoeLabel, float]:
    return {label: -abs(p_hat - c) for label, c in LABEL_CENTERS.items()}


def empty_scores() -> dict[QoeLabel, float]:
    return {label: (0.0 if label == QoeLabel.BAD else -1.0) for label in QoeLabel}


def predict_label_scores(
    u: int,
    t: int,
    trace: EventTrace,
    params: ParamStore,
    cfg: AgentConfig = AgentConfig(),
    qoe_cfg: QoeConfig = QoeConfig(),
    allowed: Iterable[int] | None = None,
) -> dict[QoeLabel, float]:
    """Scores for each label of viewer ``u`` at minute ``t + 1`` from its neighborhood at ``t``."""
    neigh = neighborhood(trace, u, t, qoe_cfg)
    if len(neigh) == 0:
        return empty_scores()
    p_hat = predicted_quality([neigh], [allowed], params, cfg, qoe_cfg)[0]
    return label_scores_from_quality(p_hat)
