import pytest

from gels.agent import AgentConfig
from gels.boosting import TrainConfig
from gels.sim import GeneratorConfig, generate_event

SMALL_AGENT = AgentConfig(embed_dim=8, state_dim=4, hidden_dim=6, buffer_k=16, eta=1e-2)


@pytest.fixture(scope="session")
def small_event():
    return generate_event(GeneratorConfig(n_viewers=12, n_offices=3, T=8, seed=11))


@pytest.fixture(scope="session")
def small_events():
    return [generate_event(GeneratorConfig(n_viewers=12, n_offices=3, T=8, seed=100 + i)) for i in range(3)]


@pytest.fixture
def small_train_cfg():
    return TrainConfig(agent=SMALL_AGENT, eta=1e-2, cut=5, epochs=1)


from hypothesis import settings

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")
