import numpy as np
import pytest

from mtnet.netblocks import EncoderSpec, ModelConfig, init_params


def tiny_config(**kw) -> ModelConfig:
    """Smallest structurally complete network: S=16, a handful of channels."""
    base = dict(
        encoder=EncoderSpec(channels=(3, 4, 4, 4)),
        embed_dim=4,
        mask_channels=8,
        gcn_kernel=3,
        decoder_width=8,
        score_channels=4,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_params():
    return init_params(tiny_config(), seed=5, dtype=np.float64)


@pytest.fixture(scope="session")
def desk_params():
    return init_params(ModelConfig(), seed=0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
