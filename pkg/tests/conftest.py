from __future__ import annotations

from datetime import date
from pathlib import Path

import pytest

from border_flux.ingest import CellRegistry, CellSite, MobilityClass, Subscriber
from border_flux.synth import SynthConfig, write_world

KEYS = {"BORDER_FLUX_MOBILE_KEY": "mobile-test-key", "BORDER_FLUX_SOCIAL_KEY": "social-test-key"}

RUN_TOML = """\
[inputs]
events = "events.csv"
cells = "cells.csv"
subscribers = "subscribers.csv"
visa_policy = "visa_policy.csv"
lang_policy = "lang_policy.csv"
dest_policy = "dest_policy.csv"
tweets = "tweets.ndjson"
fence = "fence.geojson"
lexicons = "lexicons"

[run]
output = "{output}"
workers = {workers}

[mobility]
horizon = [2020-02-28, 2020-06-16]

[privacy]
k = 10
"""


@pytest.fixture(autouse=True)
def _keys(monkeypatch):
    for k, v in KEYS.items():
        monkeypatch.setenv(k, v)


@pytest.fixture(scope="session")
def registry() -> CellRegistry:
    return CellRegistry([
        CellSite("e1", "Edirne", "Merkez", 41.67, 26.56),
        CellSite("e2", "Edirne", "Uzunköprü", 41.27, 26.69),
        CellSite("k1", "Kırklareli", "Merkez", 41.73, 27.22),
        CellSite("i1", "Istanbul", "Fatih", 41.01, 28.95),
        CellSite("a1", "Ankara", "Çankaya", 39.92, 32.85),
    ])


@pytest.fixture(scope="session")
def subscribers() -> dict[str, Subscriber]:
    return {s: Subscriber(s, n) for s, n in [
        ("s1", "SYR"), ("s2", "SYR"), ("s3", "AFG"), ("s4", "GRC"), ("s5", "TUR"), ("s6", "ZZZ"),
    ]}


@pytest.fixture(scope="session")
def visa_policy() -> dict[str, MobilityClass]:
    return {"SYR": MobilityClass.VISA, "AFG": MobilityClass.VISA, "GRC": MobilityClass.NO_VISA}


def scenario_config(seed: int = 7, **kw) -> SynthConfig:
    """A 110-day noise-free world with a surge and three disappearances."""
    base = dict(
        seed=seed,
        start=date(2020, 2, 28),
        end=date(2020, 6, 16),
        nationalities={"SYR": 600, "AFG": 200, "GRC": 150, "BGR": 100},
        injections=[
            {"kind": "surge", "date": "2020-03-01", "count": 50, "target": "Edirne"},
            {"kind": "disappear", "date": "2020-03-10", "count": 80, "group": "Visa"},
            {"kind": "disappear", "date": "2020-04-04", "count": 80},
            {"kind": "disappear", "date": "2020-05-14", "count": 70},
        ],
        tweets={"users": 300},
    )
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="session")
def world(tmp_path_factory) -> tuple[Path, dict]:
    d = tmp_path_factory.mktemp("world")
    manifest = write_world(scenario_config(), d)
    return d, manifest


def write_run_config(world_dir: Path, output: Path, workers: int = 1, extra: str = "") -> Path:
    path = world_dir / f"run_{output.name}.toml"
    path.write_text(RUN_TOML.format(output=output.as_posix(), workers=workers) + extra, encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def full_run(world, tmp_path_factory):
    """One complete pipeline run over the session world."""
    from border_flux.pipeline import RunConfig, run_pipeline

    d, _ = world
    out = tmp_path_factory.mktemp("run")
    cfg = RunConfig.from_toml(write_run_config(d, out))
    mp = pytest.MonkeyPatch()
    for k, v in KEYS.items():
        mp.setenv(k, v)
    try:
        manifest = run_pipeline(cfg)
    finally:
        mp.undo()
    return cfg, manifest


# acceptance reporting: one line per criterion at the end of the session

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA[number] = ("PASS" if report.outcome == "passed" else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
