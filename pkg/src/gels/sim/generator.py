"""Synthetic enterprise events: viewers in offices, fast links inside an office, slow ones between.

The recorded connections come from a naive tracker that, each minute, sends a fraction of the
viewers to a random new peer. That reproduces the slow drift towards high-bandwidth links
seen in real deployments without any learning.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..graph import CDN, EventTrace
from .env import EnvConfig, env_step, start_state


@dataclass(frozen=True)
class GeneratorConfig:
    n_viewers: int = 60
    n_offices: int = 3
    T: int = 20
    intra_office_mbps: tuple[float, float] = (6.0, 20.0)
    inter_office_mbps: tuple[float, float] = (0.2, 4.0)
    cdn_seeds_per_office: int = 1
    cdn_capacity: float = 6.0
    seed: int = 0
    max_degree: int = 2
    explore_rate: float = 0.3

    def __post_init__(self):
        for name in ("intra_office_mbps", "inter_office_mbps"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be an ordered nonnegative range")
        if not 1 <= self.n_offices <= self.n_viewers:
            raise ValueError("need 1 <= n_offices <= n_viewers")
        if self.T < 2:
            raise ValueError("an event lasts at least two minutes")
        if self.max_degree < 1 or self.max_degree >= self.n_viewers:
            raise ValueError("max_degree must be in [1, n_viewers)")
        if not 0 <= self.explore_rate <= 1:
            raise ValueError("explore_rate must be a probability")


def generate_event(cfg: GeneratorConfig, env_cfg: EnvConfig = EnvConfig()) -> EventTrace:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_viewers
    office_of = [i % cfg.n_offices for i in range(n)]
    office = np.array(office_of)

    same = office[:, None] == office[None, :]
    intra = rng.uniform(*cfg.intra_office_mbps, size=(n, n))
    inter = rng.uniform(*cfg.inter_office_mbps, size=(n, n))
    bw = np.where(same, intra, inter)
    bw = np.triu(bw, 1)
    bw = bw + bw.T

    n_seeds = min(cfg.cdn_seeds_per_office * cfg.n_offices, n)
    links = {}
    for u in range(n):
        chosen = [CDN] if u < n_seeds else []
        peers = [v for v in range(n) if v != u]
        k = min(cfg.max_degree - len(chosen), len(peers))
        chosen += [int(v) for v in rng.choice(peers, size=k, replace=False)]
        links[u] = chosen

    state = start_state(
        n=n,
        T=cfg.T,
        office_of=office_of,
        bandwidth=bw,
        cdn_capacity=cfg.cdn_capacity,
        max_degree=cfg.max_degree,
        initial_links=links,
        seed=int(rng.integers(2**63)),
        cfg=env_cfg,
    )
    while state.minute < cfg.T:
        actions = {}
        for u in range(n):
            if rng.random() >= cfg.explore_rate:
                continue
            taken = set(state.providers[u])
            candidates = [v for v in range(n) if v != u and v not in taken]
            if candidates:
                actions[u] = int(candidates[rng.integers(len(candidates))])
        env_step(state, actions)
    return state.to_trace()
