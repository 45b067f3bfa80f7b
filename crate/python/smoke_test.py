"""Smoke test for the prophet_py extension module.

Build and run:
    cargo build --release -p prophet-py
    cp target/release/libprophet_py.so python/prophet_py.so
    python3 python/smoke_test.py
"""

import json
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import prophet_py


def main():
    cfg = prophet_py.Config("[workload]\nn_txns = 80\nn_contracts = 100\n")
    cfg.n_shards = 4
    cfg.seed = 7
    print(cfg)

    for mech in ("prophet", "occ", "2pl"):
        cfg.mechanism = mech
        res = prophet_py.run(cfg)
        assert not res.invariant_violations, res.invariant_violations
        again = prophet_py.run(cfg)
        assert again.event_digest == res.event_digest
        report = json.loads(res.to_json())
        assert report[0]["mechanism"] == mech, report[0]["mechanism"]
        assert res.to_csv().startswith("kind,mechanism")
        print(f"{mech:8s} tps={res.throughput_tps:.2f} latency={res.latency_mean_ms:.0f}ms "
              f"abort={res.abort_ratio:.3f} confirmed={res.confirmed}")
    cfg.mechanism = "prophet"
    res = prophet_py.run(cfg)
    assert res.abort_ratio == 0.0
    assert len(res.confirmed_history) == 80
    assert res.confirmed_state()

    trace = prophet_py.generate_trace(cfg)
    assert prophet_py.count_trace(trace) == 80

    p = prophet_py.shard_failure_probability(800, 100, 100)
    assert 0.0 <= p < 1e-3, p

    try:
        prophet_py.Config("[sim]\nshard_count = 4\n")
    except ValueError as e:
        assert "shard_count" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
