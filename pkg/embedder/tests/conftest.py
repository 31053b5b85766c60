import pytest


@pytest.fixture
def patch_dir(tmp_path):
    d = tmp_path / "patches"
    d.mkdir()
    return d
