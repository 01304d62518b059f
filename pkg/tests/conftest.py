"""Shared network fixtures."""
from __future__ import annotations

import pytest

from mixtraffic.network import generate_grid, load_network


def chain_doc(n: int = 2, length: float = 100.0, speed: float = 10.0) -> dict:
    """Straight west-to-east chain s0 -> s1 -> ... of ``n`` segments."""
    nodes = [{"id": f"n{i}", "x": 100.0 * i, "y": 0.0} for i in range(n + 1)]
    segs = [
        {"id": f"s{i}", "from": f"n{i}", "to": f"n{i + 1}", "length_m": length,
         "speed_mps": speed, "lanes": 1, "spawn": i == 0, "exit": i == n - 1}
        for i in range(n)
    ]
    conns = [{"from": f"s{i}", "to": f"s{i + 1}", "movement": "through"} for i in range(n - 1)]
    return {"format": 1, "nodes": nodes, "segments": segs, "connections": conns}


def diamond_doc(upper: float = 100.0, lower: float = 100.0) -> dict:
    """Five segments: S splits at node b into U (b->e) and the two-segment
    detour D (b->d), D2 (d->e); both rejoin into T (e->f).

    With unit lengths of 100 m the direct path S-U-T is 300 m and the detour
    S-D-D2-T is 400 m.
    """
    nodes = [
        {"id": "a", "x": 0, "y": 0}, {"id": "b", "x": 100, "y": 0},
        {"id": "d", "x": 150, "y": -80}, {"id": "e", "x": 200, "y": 0},
        {"id": "f", "x": 300, "y": 0},
    ]
    segs = [
        {"id": "S", "from": "a", "to": "b", "length_m": 100, "speed_mps": 10, "spawn": True},
        {"id": "U", "from": "b", "to": "e", "length_m": upper, "speed_mps": 10},
        {"id": "D", "from": "b", "to": "d", "length_m": lower, "speed_mps": 10},
        {"id": "D2", "from": "d", "to": "e", "length_m": 100, "speed_mps": 10},
        {"id": "T", "from": "e", "to": "f", "length_m": 100, "speed_mps": 10, "exit": True},
    ]
    conns = [
        {"from": "S", "to": "U", "movement": "through"},
        {"from": "S", "to": "D", "movement": "right"},
        {"from": "D", "to": "D2", "movement": "left"},
        {"from": "U", "to": "T", "movement": "through"},
        {"from": "D2", "to": "T", "movement": "left"},
    ]
    return {"format": 1, "nodes": nodes, "segments": segs, "connections": conns}


def fan_in_doc(k: int) -> dict:
    """``k`` incoming segments (parallel pairs over three legs) feeding ``out``."""
    legs = ["a0", "a1", "a2"]
    nodes = [{"id": "c", "x": 0, "y": 0}, {"id": "z", "x": 100, "y": 0},
             {"id": "a0", "x": -100, "y": 0}, {"id": "a1", "x": 0, "y": 100},
             {"id": "a2", "x": 0, "y": -100}]
    segs = [{"id": f"in{i}", "from": legs[i % 3], "to": "c", "length_m": 100,
             "speed_mps": 10, "spawn": True} for i in range(k)]
    segs.append({"id": "out", "from": "c", "to": "z", "length_m": 100, "speed_mps": 10, "exit": True})
    conns = [{"from": f"in{i}", "to": "out"} for i in range(k)]
    return {"format": 1, "nodes": nodes, "segments": segs, "connections": conns}


@pytest.fixture(scope="session")
def grid4():
    return load_network(generate_grid(4, 4))


@pytest.fixture
def chain2():
    return load_network(chain_doc(2))


@pytest.fixture
def diamond():
    return load_network(diamond_doc())


# ------------------------------------------------------- acceptance report

ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def report():
    """Record one acceptance verdict: ``report("C1", ok, "detail")``."""
    def record(name: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
