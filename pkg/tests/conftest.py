import os
from pathlib import Path

import numpy as np
import pytest

from chronor.data import RawQuadruple, generate_synthetic_kg

BENCHMARK_DIR = Path(os.environ.get("CHRONOR_BENCHMARK_DIR",
                                    Path(__file__).resolve().parent.parent / "data"))

_ACCEPTANCE = []


def record_acceptance(name: str, passed: bool, detail: str = "") -> None:
    _ACCEPTANCE.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def write_raw(path: Path, facts) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for q in facts:
            fh.write(f"{q.head}\t{q.relation}\t{q.tail}\t{q.time_literal}\n")
    return path


def split_facts(facts, valid_frac=0.1, test_frac=0.1, seed=0):
    order = np.random.default_rng(seed).permutation(len(facts))
    n_valid = int(len(facts) * valid_frac)
    n_test = int(len(facts) * test_frac)
    pick = lambda idx: [facts[i] for i in idx]
    return (pick(order[n_valid + n_test:]), pick(order[:n_valid]),
            pick(order[n_valid:n_valid + n_test]))


@pytest.fixture
def synthetic_files(tmp_path):
    """20-entity synthetic KG written as ICEWS-style train/valid/test files."""
    facts = generate_synthetic_kg(20, 5, 10, 200, seed=3)
    train, valid, test = split_facts(facts)
    return {name: str(write_raw(tmp_path / f"{name}.txt", part))
            for name, part in (("train", train), ("valid", valid), ("test", test))}


@pytest.fixture
def memorization_files(tmp_path):
    """50-entity KG whose valid and test splits repeat the train facts."""
    facts = generate_synthetic_kg(50, 5, 10, 500, seed=1)
    path = str(write_raw(tmp_path / "facts.txt", facts))
    empty = str(write_raw(tmp_path / "empty.txt", []))
    return {"train": path, "valid": path, "test": empty}


def benchmark_paths(name: str) -> dict[str, Path]:
    d = BENCHMARK_DIR / name
    return {split: d / f"{split}.txt" for split in ("train", "valid", "test")}


def require_benchmark(name: str) -> dict[str, str]:
    """Benchmark files are a hard requirement of the criteria that use them."""
    paths = benchmark_paths(name)
    missing = [str(p) for p in paths.values() if not p.is_file()]
    if missing:
        pytest.fail(f"benchmark {name} not available under {BENCHMARK_DIR} "
                    f"(missing {len(missing)} of 3 split files); set CHRONOR_BENCHMARK_DIR")
    return {k: str(v) for k, v in paths.items()}


__all__ = ["RawQuadruple", "record_acceptance", "write_raw", "split_facts", "require_benchmark"]
