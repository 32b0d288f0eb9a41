import pytest

from vitseg_export.testing import tiny_model


@pytest.fixture(scope="session")
def tiny():
    """(model, tokenizer) pair shared across the suite; tests must not
    mutate the model (corruption tests build their own)."""
    return tiny_model(seed=13)
