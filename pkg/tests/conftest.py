import contextlib
import os
import time
from types import SimpleNamespace

import pytest

from wordspot.cli import main


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Default synthetic corpus pushed through synth, train and index via the CLI, once."""
    root = tmp_path_factory.mktemp("spot")
    ws = SimpleNamespace(
        root=str(root),
        data=str(root / "data"),
        bundle=str(root / "model.spot"),
        index=str(root / "index.spix"),
        maps=str(root / "maps"),
    )
    ws.train_pages = os.path.join(ws.data, "train", "pages")
    ws.train_gt = os.path.join(ws.data, "train", "gt")
    ws.test_pages = os.path.join(ws.data, "test", "pages")
    ws.test_gt = os.path.join(ws.data, "test", "gt")
    t0 = time.perf_counter()
    assert main(["synth", "--out", ws.data, "--seed", "0"]) == 0
    assert main(["train", "--pages", ws.train_pages, "--gt", ws.train_gt,
                 "--bundle", ws.bundle, "--seed", "0"]) == 0
    assert main(["index", "--pages", ws.test_pages, "--bundle", ws.bundle,
                 "--index", ws.index, "--maps", ws.maps]) == 0
    ws.build_seconds = time.perf_counter() - t0
    return ws


@pytest.fixture(scope="session")
def searcher(workspace):
    from wordspot.cli import read_pages
    from wordspot.integral import load_page_map, map_cache_name
    from wordspot.layout import load_index
    from wordspot.pipeline import Searcher, load_bundle

    bundle, bhash = load_bundle(workspace.bundle)
    index = load_index(workspace.index)
    maps = {pid: load_page_map(os.path.join(workspace.maps,
                                            map_cache_name(pid, bhash, bundle.params.block)))[0]
            for pid, _, _ in index.pages}
    return Searcher(bundle, index, maps, read_pages(workspace.test_pages))


@pytest.fixture
def criterion(request):
    """Context manager recording a PASS/FAIL line for one acceptance criterion."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    @contextlib.contextmanager
    def run(number, title):
        detail = {}
        try:
            yield detail
        except BaseException:
            results.append((number, "FAIL", title, detail))
            raise
        results.append((number, "PASS", title, detail))

    return run


ACCEPTANCE_KEY = pytest.StashKey()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    seen = {r[0] for r in results}
    results = results + [(n, "FAIL", "did not run", {}) for n in range(1, 11) if n not in seen]
    for number, status, title, detail in sorted(results, key=lambda r: r[0]):
        extra = " ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"{status} {number:2d} {title}" + (f" [{extra}]" if extra else ""))
