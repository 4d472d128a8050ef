"""Smoke test for the compiled extension: python python/smoke_test.py"""

import json

import motion_intent as mi


def main():
    scenario = json.loads(mi.generate_scenario(1, 0, future_steps=8))
    assert scenario["agents"], "no agents"
    text = json.dumps(scenario)

    labels = json.loads(mi.label_scenario(text))
    assert len(labels["intentions"]) == len(scenario["agents"])
    assert all(sum(row) == 1.0 for row in labels["intentions"])

    pred = json.loads(mi.predict(text, seed=0))
    assert len(pred["trajectories"]) == len(pred["scores"])
    assert all(len(t) == 8 for t in pred["trajectories"])

    assert mi.adaptive_threshold(10.0) == 2.5
    assert mi.adaptive_threshold(30.0) == 3.25
    assert mi.adaptive_threshold(50.0) == 3.5

    members = [{"trajectories": pred["trajectories"] * 3, "scores": pred["scores"] * 3}]
    out = json.loads(mi.ensemble(json.dumps(members)))
    assert len(out["trajectories"]) == 6
    assert abs(sum(out["scores"]) - 1.0) < 1e-9

    passed, worst = mi.gradcheck(7, 1)
    assert passed and worst <= 1e-4, worst

    try:
        mi.label_scenario("{}")
    except ValueError:
        pass
    else:
        raise AssertionError("invalid scenario accepted")

    print("smoke test ok (version %s)" % mi.__version__)


if __name__ == "__main__":
    main()
