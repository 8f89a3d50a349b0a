import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stubs import ThinStub, WideStub, build_image_folder  # noqa: E402

from vit_exporter import register_backbone, unregister_backbone  # noqa: E402


@pytest.fixture
def stub_backbones():
    register_backbone("stub-wide", 12, "2x2 downsample of the image", lambda device: WideStub())
    register_backbone("stub-thin", 4, "channel means plus contrast", lambda device: ThinStub())
    yield ("stub-wide", "stub-thin")
    unregister_backbone("stub-wide")
    unregister_backbone("stub-thin")


@pytest.fixture
def two_datasets(tmp_path, stub_backbones):
    a = build_image_folder(tmp_path / "blobs", ["amber", "jade", "slate", "rust"], seed=1)
    b = build_image_folder(tmp_path / "tiles", ["dawn", "dusk", "noon", "rain"], seed=2, palette_offset=4)
    return a, b
