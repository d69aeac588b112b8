import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gels.graph import CDN
from gels.qoe import QoeConfig, qoe
from gels.sim import (
    EnvConfig,
    GeneratorConfig,
    InvalidActionError,
    LadderConfig,
    MaskedActionError,
    TraceParseError,
    allowed_from_trace,
    env_reset,
    env_step,
    generate_event,
    load_event_trace,
    save_event_trace,
    simulate_segments,
)


def test_generator_round_robin_and_determinism():
    cfg = GeneratorConfig(n_viewers=60, n_offices=3, T=5, seed=3)
    a, b = generate_event(cfg), generate_event(cfg)
    assert a == b
    assert np.bincount(a.office_of).tolist() == [20, 20, 20]


def test_single_office_uses_intra_range():
    tr = generate_event(GeneratorConfig(n_viewers=10, n_offices=1, T=3, seed=1))
    off = tr.bandwidth[~np.eye(10, dtype=bool)]
    assert off.min() >= 6.0 and off.max() <= 20.0


def test_generator_bandwidth_structure():
    tr = generate_event(GeneratorConfig(n_viewers=30, n_offices=3, T=3, seed=2))
    office = np.array(tr.office_of)
    same = office[:, None] == office[None, :]
    off = ~np.eye(30, dtype=bool)
    assert tr.bandwidth[same & off].min() >= 6.0
    assert tr.bandwidth[~same].max() <= 4.0
    assert np.array_equal(tr.bandwidth, tr.bandwidth.T)


def test_generator_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(intra_office_mbps=(5.0, 1.0))
    with pytest.raises(ValueError):
        GeneratorConfig(n_viewers=2, n_offices=3)


def test_ladder_validation_and_pick():
    with pytest.raises(ValueError):
        LadderConfig(qualities=((1, 2.0), (2, 1.0)))
    with pytest.raises(ValueError):
        LadderConfig(segments_per_minute=20, segment_seconds=4.0)
    ladder = LadderConfig()
    assert ladder.pick(0.1) == (1, 0.5)
    assert ladder.pick(5.0) == (4, 5.0)
    assert ladder.pick(100.0) == (5, 8.0)


@given(st.floats(0, 50), st.floats(0, 50))
def test_quality_monotone_in_throughput(a, b):
    lo, hi = sorted((a, b))
    ladder = LadderConfig()
    assert ladder.pick(lo)[0] <= ladder.pick(hi)[0]


def test_starved_edge_rebuffers_every_segment():
    cfg = EnvConfig()
    st_ = simulate_segments(0.1, cfg)
    K = cfg.ladder.segments_per_minute
    assert all(s.quality == 1 for s in st_.segments)
    assert qoe(st_) == pytest.approx(1 - QoeConfig().mu * K)


def test_reset_is_deterministic(small_event):
    s1, n1 = env_reset(small_event, seed=5)
    s2, n2 = env_reset(small_event, seed=5)
    assert n1 == n2
    assert s1.minute == 1
    assert np.all(s1.player_buffers == EnvConfig().buffer_seconds)


def _open_peer(state, u):
    return next(v for v in range(state.n) if v != u and v not in state.providers[u])


def test_step_rewards_match_returned_traces(small_event):
    state, _ = env_reset(small_event, seed=0)
    actions = {u: _open_peer(state, u) for u in range(state.n)}
    res = env_step(state, actions)
    for u, r in res.rewards.items():
        assert r == qoe(res.segment_traces[u])
        assert len(res.neighborhoods[u]) <= small_event.max_degree
        assert actions[u] in res.neighborhoods[u].ids


def test_step_evicts_slowest_provider(small_event):
    state, _ = env_reset(small_event, seed=0)
    u = next(u for u in range(state.n) if len(state.providers[u]) == state.max_degree)
    slowest = min(state.providers[u].values(), key=lambda e: (e.throughput, e.dst)).dst
    keep = set(state.providers[u]) - {slowest}
    v = _open_peer(state, u)
    env_step(state, {u: v})
    assert set(state.providers[u]) == keep | {v}


def test_existing_provider_is_refresh(small_event):
    state, _ = env_reset(small_event, seed=0)
    u = next(u for u in range(state.n) if state.providers[u])
    before = set(state.providers[u])
    env_step(state, {u: next(v for v in before if v != CDN)} if any(v != CDN for v in before) else {})
    assert set(state.providers[u]) == before


def test_step_errors(small_event):
    state, _ = env_reset(small_event, seed=0)
    with pytest.raises(InvalidActionError):
        env_step(state, {0: 0})
    with pytest.raises(InvalidActionError):
        env_step(state, {0: small_event.n})
    allowed = allowed_from_trace(small_event, 0, 2)
    bad = next(v for v in range(1, small_event.n) if v not in allowed)
    with pytest.raises(MaskedActionError):
        env_step(state, {0: bad}, small_event)


def test_done_flag(small_event):
    state, _ = env_reset(small_event, seed=0)
    for t in range(1, small_event.T):
        res = env_step(state, {})
        assert res.done == (t == small_event.T - 1)
    with pytest.raises(RuntimeError):
        env_step(state, {})


def test_replaying_recorded_edges_reproduces_trace(small_event):
    state, _ = env_reset(small_event, seed=9)
    for t in range(2, small_event.T + 1):
        actions = {}
        for u in range(small_event.n):
            new = allowed_from_trace(small_event, u, t) - set(state.providers[u])
            if new:
                actions[u] = min(new)
        env_step(state, actions, small_event)
    assert state.to_trace().edges == small_event.edges


def test_step_determinism(small_event):
    def run():
        state, _ = env_reset(small_event, seed=4)
        rng = np.random.default_rng(0)
        out = []
        for _ in range(3):
            acts = {u: _open_peer(state, u) for u in range(state.n) if rng.random() < 0.5}
            out.append(env_step(state, acts))
        return out

    a, b = run(), run()
    assert [r.rewards for r in a] == [r.rewards for r in b]
    assert [r.neighborhoods for r in a] == [r.neighborhoods for r in b]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_degree_cap_holds(seed):
    tr = generate_event(GeneratorConfig(n_viewers=8, n_offices=2, T=4, seed=seed))
    state, _ = env_reset(tr, seed=seed)
    rng = np.random.default_rng(seed)
    while state.minute < tr.T:
        acts = {u: int(rng.choice([v for v in range(tr.n) if v != u])) for u in range(tr.n)}
        env_step(state, acts)
        assert all(len(p) <= tr.max_degree for p in state.providers.values())


def test_trace_round_trip(tmp_path, small_event):
    path = tmp_path / "e.jsonl"
    save_event_trace(small_event, path)
    assert load_event_trace(path) == small_event
    raw = path.read_bytes()
    save_event_trace(load_event_trace(path), path)
    assert path.read_bytes() == raw


def _corrupt(tmp_path, small_event, edit):
    path = tmp_path / "e.jsonl"
    save_event_trace(small_event, path)
    lines = path.read_text().splitlines()
    lines[1] = edit(lines[1])
    path.write_text("\n".join(lines) + "\n")
    return path


def test_negative_throughput_rejected(tmp_path, small_event):
    import json

    def edit(line):
        rec = json.loads(line)
        rec["throughput_mbps"] = -1.0
        return json.dumps(rec)

    with pytest.raises(TraceParseError, match="line 2"):
        load_event_trace(_corrupt(tmp_path, small_event, edit))


def test_minute_beyond_horizon_rejected(tmp_path, small_event):
    import json

    def edit(line):
        rec = json.loads(line)
        rec["minute"] = small_event.T + 1
        return json.dumps(rec)

    with pytest.raises(TraceParseError, match="line 2"):
        load_event_trace(_corrupt(tmp_path, small_event, edit))


def test_garbage_file_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("not json\n")
    with pytest.raises(TraceParseError):
        load_event_trace(path)
