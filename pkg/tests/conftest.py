import time

import numpy as np
import pytest

from viewreid import EmbeddingSet, l2_normalize

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion from the build contract")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    _ACCEPTANCE.append((number, title, report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, duration in sorted(_ACCEPTANCE):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  ({duration:5.2f}s)  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_set(features, vehicle_ids, view_ids=None, camera_ids=None, num_views=None,
             image_ids=None, normalize=True):
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    view_ids = np.zeros(n, dtype=int) if view_ids is None else np.asarray(view_ids)
    return EmbeddingSet(
        features=l2_normalize(features) if normalize else features,
        image_ids=np.arange(n) if image_ids is None else image_ids,
        vehicle_ids=vehicle_ids,
        view_ids=view_ids,
        num_views=num_views or int(np.max(view_ids)) + 1,
        camera_ids=camera_ids,
        normalized=normalize,
    )


def random_set(rng, n, dim=4, num_ids=5, num_views=3, num_cameras=3, cameras=True, image_offset=0):
    return make_set(
        rng.normal(size=(n, dim)),
        vehicle_ids=rng.integers(0, num_ids, size=n),
        view_ids=rng.integers(0, num_views, size=n),
        camera_ids=rng.integers(0, num_cameras, size=n) if cameras else None,
        num_views=num_views,
        image_ids=np.arange(image_offset, image_offset + n),
    )


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
