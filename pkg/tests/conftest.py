import sys
from datetime import datetime, timezone

import numpy as np
import pytest

from plumeseg.raster import ChannelId, GeoTransform, RasterScene

T0 = datetime(2019, 9, 8, 20, 0, tzinfo=timezone.utc)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_scene(height=8, width=8, channels=(ChannelId.RED, ChannelId.VEGGIE, ChannelId.BLUE), seed=0, transform=None):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0.0, 1.0, (len(channels), height, width))
    return RasterScene(data, channels, transform or GeoTransform(100.0, 0.5, 0.0, 200.0, 0.0, -0.5), "EPSG:32610", T0)


@pytest.fixture
def scene():
    return make_scene()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
