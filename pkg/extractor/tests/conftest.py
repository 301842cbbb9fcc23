import pytest

from featex import init_weights


@pytest.fixture(scope="session")
def weights_dir(tmp_path_factory):
    """Weights for both registered models, built once per test session."""
    d = str(tmp_path_factory.mktemp("weights"))
    init_weights("m730", weights_dir=d)
    init_weights("vit2d", weights_dir=d)
    return d
