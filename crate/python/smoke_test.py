"""Smoke test for the crprime extension.

Build first:  cargo build -p crprime-py --release
Then:         python3 python/smoke_test.py  [path/to/libcrprime.so]
"""
import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load(path):
    loader = importlib.machinery.ExtensionFileLoader("crprime", str(path))
    spec = importlib.util.spec_from_loader("crprime", loader)
    mod = importlib.util.module_from_spec(spec)
    loader.exec_module(mod)
    return mod


def main():
    lib = pathlib.Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "target" / "release" / "libcrprime.so"
    crprime = load(lib)

    rep = json.loads(crprime.run(["solve", "--n", "1"]))
    assert rep["pass"], rep["checks"]

    rep = json.loads(crprime.run(["qprime", "--n", "1", "--grid", "6"]))
    q = rep["results"]["totals"]["route_def"]
    assert abs(q - 8 * math.pi**2) < 1e-8, q

    assert crprime.check_domain((ROOT / "inputs" / "perturbed_ball2.json").read_text()) == 2
    try:
        crprime.check_domain('{"schema":1,"n":1,"rho":[],"bogus":0}')
    except ValueError:
        pass
    else:
        raise AssertionError("unknown field accepted")
    try:
        crprime.run(["solve", "--input", str(ROOT / "inputs" / "bad.json")])
    except ValueError as e:
        assert "vanishes" in str(e), e
    else:
        raise AssertionError("degenerate domain accepted")
    print("crprime smoke test ok: Q' =", q)


if __name__ == "__main__":
    main()
