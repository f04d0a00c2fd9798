import pytest

from posefield.config import PretrainConfig
from posefield.scene import gen_scene
from posefield.training import pretrain
from posefield.unet import UNetConfig

SMALL = UNetConfig(image_size=16, channels=(16, 16, 16), text_dim=8, temb_dim=32, nerf_hidden=16)


@pytest.fixture(scope="session")
def small_scene(tmp_path_factory):
    return gen_scene("car", 3, tmp_path_factory.mktemp("scene"), views=28, n_val=8)


@pytest.fixture(scope="session")
def small_base(tmp_path_factory):
    out = tmp_path_factory.mktemp("base")
    return pretrain("car", PretrainConfig(steps=3, batch=2, pool_size=8), out, SMALL)


_criteria: dict[int, list[tuple[str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _criteria.setdefault(mark.args[0], []).append((item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        results = _criteria[n]
        ok = all(o == "passed" for _, o in results)
        failed = [name for name, o in results if o != "passed"]
        detail = f"{len(results)} checks" if ok else "failed: " + ", ".join(failed)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({detail})")
