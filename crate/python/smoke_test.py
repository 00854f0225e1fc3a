"""Smoke test for the pkforecast Python bindings.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml && pip install target/wheels/pkforecast-*.whl
"""
import json
import math

import pkforecast_py as pk


def main():
    # concentration integrates to the dose; a coarse Riemann sum is close enough here
    area = sum(pk.concentration_at(0.01 * (i + 0.5), 2.0, 1.0) * 0.01 for i in range(2_000_000))
    assert abs(area - 2.0) < 1e-2, area

    enc = pk.encode_doses([0.0, 3.0, 0.0, 0.0, 0.0], 1.3)
    assert enc[0] == 0.0 and enc[1] == 0.0 and enc[2] > 0.0
    assert enc[2] == pk.concentration_at(5.0, 3.0, 1.3)

    assert pk.mae([100.0, 110.0], [90.0, 120.0]) == 10.0
    assert pk.rmse([100.0, 110.0], [90.0, 120.0]) == 10.0
    assert pk.huber_loss([0.0], [3.0], 1.0) == 2.5
    t, p = pk.paired_t_test([1.0, 2.0, 3.5], [0.5, 1.0, 1.5])
    assert t > 0 and 0.0 < p < 0.5

    data = pk.Dataset.simulate(3, 3, seed=1, mode="encoder_oracle")
    assert len(data) == 3 and len(data.glucose(data.patient_ids[0])) == 3 * 288
    train, _ = data.split(288)
    cfg = pk.TrainConfig(json.dumps({
        "training_steps": 20, "eval_every": 10, "val_stride": 4,
        "model": {"architecture": "nhits", "input_len": 24, "hidden": [16]},
    }))
    cks = pk.train(train, "pk", cfg, trials=2)
    assert [c.trial for c in cks] == [0, 1]
    for c in cks:
        for kb, ka in c.absorption_constants().values():
            assert kb > 0 and ka > 0

    report = json.loads(pk.evaluate(cks, data, 288, "pk-global"))
    mae_all = [c for c in report["cells"] if c["patient"] == "all" and c["metric"] == "mae" and c["subset"] == "all"]
    assert len(mae_all) == 1 and math.isfinite(mae_all[0]["trial_mean"])

    means = cks[0].counterfactual(data, 10.0, 3 * 288 - 288)
    assert set(means) == set(data.patient_ids)

    mean_kb, mean_ka, t, p = pk.inspect_k(cks)
    assert mean_kb > 0 and mean_ka > 0 and 0.0 <= p <= 1.0
    print("python smoke test OK")


if __name__ == "__main__":
    main()
