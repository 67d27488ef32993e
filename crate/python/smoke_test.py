"""Smoke test for the kointeract extension module.

Build and install first, e.g.

    pip install maturin
    maturin develop -m crates/python/Cargo.toml --release

then run `python python/smoke_test.py`.
"""

import json

import kointeract as ki


def main():
    x, y, truth = ki.simulate(5, n=400, p=12, seed=3)
    assert len(x) == 400 and len(x[0]) == 12 and len(y) == 400
    assert (7, 8) in truth
    assert (8, 9) in ki.ground_truth(5)

    xt = ki.gaussian_knockoffs(x, seed=4)
    diag = ki.knockoff_diagnostics(x, xt)
    assert diag["mean_gap"] < 0.2, diag
    perm = ki.permutation_knockoffs(x, seed=4)
    assert sorted(r[0] for r in perm) == sorted(r[0] for r in x)

    model = ki.Model.train(x, xt, y, epochs=15, seed=1)
    assert model.input_dim == 24
    rows = [a + b for a, b in zip(x, xt)]
    preds = model.predict(rows[:5])
    assert len(preds) == 5
    again = ki.Model.from_json(model.to_json())
    assert again.predict(rows[:5]) == preds

    attrib = ki.attribute(model, rows[:100], draws=8, seed=2)
    assert attrib.measure == "expected"
    assert len(attrib.e1d) == 24 and len(attrib.e2d) == 24
    same = ki.Attribution.from_json(attrib.to_json())
    assert same.e2d == attrib.e2d

    scores = attrib.distill()
    assert len(scores) == 24 * 23 // 2 - 12
    assert {c for _, _, c, _ in scores.entries()} == {"OO", "OK", "KK"}
    sel = scores.select(0.2)
    for i, j, _ in sel.selected:
        assert i < j < 12
        assert sel.q_values[(i, j)] <= 0.2
    print(sel)

    assert ki.step_up([0.001, 0.5, 0.01, 0.9], 0.05) == [0, 2]
    assert ki.step_up([0.001, 0.5, 0.01, 0.9], 0.03) == [0, 2]
    assert ki.step_up([0.001, 0.5, 0.01, 0.9], 0.03, dependent=True) == [0]
    adj = ki.adjusted_pvalues([0.01, 0.02, 0.03])
    assert all(abs(a - 0.03) < 1e-12 for a in adj)

    cfg = {
        "data": {"kind": "simulation", "function_id": 5, "n_samples": 200, "n_features": 10},
        "train": {"epochs": 5},
        "attribution": {"draws": 2},
        "repetitions": 2,
        "base_seed": 11,
    }
    summary = json.loads(ki.run_pipeline(json.dumps(cfg)))
    assert summary["schema"] == "kointeract-summary/v1"
    assert len(summary["repetitions"]) == 2

    try:
        ki.simulate(11, 10, 12)
    except ValueError:
        pass
    else:
        raise AssertionError("function 11 accepted")

    print("kointeract", ki.__version__, "smoke test passed")


if __name__ == "__main__":
    main()
