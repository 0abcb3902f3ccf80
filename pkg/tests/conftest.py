import os
import time
from pathlib import Path

import pytest

# one line per acceptance criterion, printed in the terminal summary
_CRITERIA: dict[int, str] = {}


class Criterion:
    """Context manager that records a PASS/FAIL line for criterion ``number``."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        secs = time.perf_counter() - self.t0
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:2d} [{status}] {self.title}: {self.detail} ({secs:.1f} s)"
        _CRITERIA[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])


class AcceptanceRuns:
    """Full-size training runs shared by several criteria, trained on first use.

    Set ``VCUBE_ACCEPTANCE_DIR`` to keep the runs on disk and reuse them in a
    later session; a run is reused only if its saved config matches.
    """

    SEEDS = (0, 1, 2)

    def __init__(self, root: Path):
        self.root = root
        self._data = None
        self._runs = {}

    def data(self):
        if self._data is None:
            from vcube.trainer import synthetic_dataset

            self._data = synthetic_dataset(2000, 0, "train"), synthetic_dataset(200, 0, "eval")
        return self._data

    def run(self, seed: int, anneal: bool = True):
        key = (seed, anneal)
        if key not in self._runs:
            self._runs[key] = self._train(seed, anneal)
        return self._runs[key]

    def _train(self, seed, anneal):
        import json

        from vcube.trainer import TrainConfig, dump_config, load_model, train

        cfg = TrainConfig(seed=seed, anneal=anneal)
        out = self.root / f"seed{seed}_{'anneal' if anneal else 'fixed_eta'}"
        ck, metrics, saved = out / "final.qsck", out / "metrics.jsonl", out / "config.txt"
        if ck.exists() and metrics.exists() and saved.exists() and saved.read_text() == dump_config(cfg):
            model, _ = load_model(ck)
            records = [json.loads(x) for x in metrics.read_text().splitlines()]
            return model, records
        tr, ev = self.data()
        res = train(cfg, tr, ev, out_dir=out)
        saved.write_text(dump_config(cfg))
        return res.model, res.records


@pytest.fixture(scope="session")
def acceptance_runs(tmp_path_factory):
    root = os.environ.get("VCUBE_ACCEPTANCE_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    return AcceptanceRuns(root)
