"""Smoke test for the ctxpar extension module.

Build and install first, e.g.:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/ctxpar-*.whl
"""
import json
import math
import pathlib

import ctxpar

ROOT = pathlib.Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "crates" / "core" / "scenarios"


def rel_err(a, b):
    num = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    den = math.sqrt(sum(y * y for y in b))
    return num / max(den, 1e-300)


def check_cost_model():
    m = ctxpar.CostModel("llama3-405b+gtt-h100", 4)
    assert m.size_threshold() > 0
    assert m.choose_strategy(128000 * 0.01, 128000 * 0.99) == "pass-q"
    assert m.choose_strategy(128000, 0) == "pass-kv"
    times = m.predict_step_times(3200, 124800)
    assert times["a2a_s"] > 0 and times["attn_s"] > 0
    assert abs(m.scaling_ratio(128000) - 4.0) / 4.0 < 0.1
    mfu = ctxpar.CostModel().mfu(1e6, 128, 77.0)
    assert 0.55 < mfu["utilization"] < 0.70, mfu
    try:
        ctxpar.CostModel("nonexistent+gtt-h100")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown profile accepted")


def check_sharding():
    ranks = ctxpar.shard_positions([16], 2)
    assert len(ranks) == 2
    flat = sorted(t for r in ranks for t in r if t is not None)
    assert flat == [(0, p) for p in range(16)]


def check_session():
    cfg = ctxpar.GqaConfig(8, 2, 16)
    s = ctxpar.Session(cfg, 4, seed=3)
    worst = 0.0
    turns = [
        dict(kind="full_prefill", lengths=[40, 17]),
        dict(kind="partial_prefill", lengths=[5], strategy="pass-q"),
        dict(kind="decode", steps=2),
    ]
    for t in turns:
        for rec in s.run_turn(**t):
            for seq, pos, out, _lse in rec.outputs:
                ref, _ = ctxpar.dense_attention(cfg, 3, seq, pos)
                worst = max(worst, rel_err(out, ref))
    assert s.sequences() == {0: 47, 1: 24}, s.sequences()
    assert sum(s.cached_lens(0)) == 47
    assert worst < ctxpar.VERIFY_TOLERANCE, worst
    return worst


def check_scenarios():
    passed, err = ctxpar.verify_scenario(str(SCENARIOS / "three_stage.toml"))
    assert passed, err
    transcript = json.loads(ctxpar.run_scenario(str(SCENARIOS / "cp4_full_prefill.toml")))
    assert transcript["n_ranks"] == 4


if __name__ == "__main__":
    check_cost_model()
    check_sharding()
    worst = check_session()
    check_scenarios()
    print(f"ctxpar smoke test OK (max rel err {worst:.3e})")
