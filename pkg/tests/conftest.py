import pytest

from flowsel.scenegen import PretrainConfig, pretrain_frozen


@pytest.fixture(scope="session")
def pretrained():
    """Source-pretrained, frozen toy pipeline plus its training record (built once per session)."""
    return pretrain_frozen(PretrainConfig(), return_curve=True)
