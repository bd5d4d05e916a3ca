"""Smoke test for the `lfm` extension module.

Build and run with:
    pip install maturin && maturin develop -m crates/py/Cargo.toml
    python python/smoke_test.py
"""

import math
import os
import tempfile

import lfm


def test_schedule():
    knots = lfm.schedule('{"kind": "flow_linear", "K": 4}')
    assert [t for t, _, _ in knots] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert all(abs(a - (1 - t)) < 1e-12 and abs(s - t) < 1e-12 for t, a, s in knots)
    exp = lfm.schedule('{"kind": "exponential_refiner", "sigma_min": 0.01, "K": 10}')
    assert abs(exp[5][2] - 0.1) < 1e-12
    try:
        lfm.schedule('{"kind": "exponential_refiner", "K": 10}')
    except ValueError:
        pass
    else:
        raise AssertionError("missing sigma_min must be rejected")


def test_spectrum():
    n = 32
    field = [math.cos(2 * math.pi * (3 * i + 4 * j) / n) for i in range(n) for j in range(n)]
    energy, counts = lfm.energy_spectrum(field, [n, n])
    total = sum(e * c for e, c in zip(energy, counts))
    assert abs(total - 0.5) < 1e-9
    assert energy[5] * counts[5] / total > 0.99


def test_nrmse():
    assert lfm.nrmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert lfm.nrmse([0.0, 0.0], [3.0, 4.0]) == 1.0


def test_cli():
    with tempfile.TemporaryDirectory() as d:
        cfg = os.path.join(d, "cfg.json")
        with open(cfg, "w") as f:
            f.write('{"data": {"problem": "burgers1d", "n": 16, "frames": 6, "train": 1, "valid": 0, "test": 1}}')
        out = os.path.join(d, "data.lfmd")
        assert lfm.run(["gen-data", "--problem", "burgers1d", "--config", cfg, "--out", out]) == 0
        assert os.path.getsize(out) > 0
        spec = os.path.join(d, "spec")
        assert lfm.run(["spectrum", "--data", out, "--center", "3", "--half-width", "1", "--out", spec]) == 0
        assert os.path.exists(os.path.join(spec, "spectra.csv"))
        assert lfm.run(["no-such-command"]) == 2


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"{name} ok")
