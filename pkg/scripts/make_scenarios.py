"""Regenerate the bundled scenario files.

Every number below is invented for illustration; none comes from recorded
traffic. Run from the repository root:

    python3 scripts/make_scenarios.py [--out src/smpc_cvpm/scenarios]
"""
import argparse
import json
from pathlib import Path

import numpy as np

T = 0.1
ROAD = {"lanes": 3, "lane_width": 3.5}
LANES = (0.0, 3.5, 7.0)


def car(oid, s, vs, d, seed, **model):
    ob = {"id": oid, "init": {"s": s, "vs": vs, "d": d, "vd": 0.0},
          "behavior": {"type": "model", "seed": seed}}
    if model:
        ob["model"] = model
    return ob


def overtake(N_sim=60):
    """A faster car in the middle lane closes in and merges into the ego lane just behind the ego, then slows down."""
    obs = [car("passer", -15.0, 28.0, 3.5, 1, ref={"vs": 14.0, "d": 0.0})]
    for i, (s, v, d) in enumerate([(-40, 22, 7.0), (35, 22, 7.0), (90, 21, 3.5), (-60, 20, 0.0)]):
        obs.append(car(f"car{i + 1}", float(s), float(v), d, 10 + i))
    return {"schema_version": 1, "id": "overtake", "T": T, "N_sim": N_sim, "road": ROAD,
            "description": "Synthetic overtake: ego in the rightmost lane, a faster car from the middle "
                           "lane merges into the ego lane just behind the ego and slows down; 5 dynamic "
                           "obstacles. Invented parameters.",
            "ego": {"init": {"s": 0.0, "d": 0.0, "v": 20.0}, "ref": {"d": 0.0, "v": 20.0}},
            "planner": {"N": 15}, "obstacles": obs}


def braker_inputs(N_sim, v0, t_brake=1.0, decel=9.0):
    v, out = v0, []
    for k in range(N_sim):
        a = max(-decel, -v / T) if k * T >= t_brake and v > 0 else 0.0
        out.append([a, 0.0])
        v += a * T
    return out


def sudden_stop(N_sim=60, gap=25.0, v=20.0):
    """The car ahead brakes at 9 m/s^2 although its model allows only mild deceleration."""
    obs = [{"id": "braker", "init": {"s": gap, "vs": v, "d": 0.0, "vd": 0.0},
            "model": {"u_max": [0.5, 1.5], "q": [0.0, 0.002, 0.5, 0.5]},
            "behavior": {"type": "scripted", "inputs": braker_inputs(N_sim, v)}}]
    others = [(-30, 20, 3.5), (30, 20, 3.5), (-45, 21, 7.0), (-15, 22, 7.0), (20, 21, 7.0),
              (55, 22, 7.0), (90, 21, 7.0), (70, 20, 3.5), (110, 21, 3.5), (60, 19, 0.0),
              (-55, 20, 0.0), (130, 20, 0.0)]
    for i, (s, vv, d) in enumerate(others):
        obs.append(car(f"car{i + 1:02d}", float(s), float(vv), d, 100 + i))
    return {"schema_version": 1, "id": "sudden_stop", "T": T, "N_sim": N_sim, "road": ROAD,
            "description": "Synthetic emergency stop: the leading car brakes far beyond its "
                           "prediction model; 13 dynamic obstacles. Invented parameters.",
            "ego": {"init": {"s": 0.0, "d": 0.0, "v": v}, "ref": {"d": 0.0, "v": v}},
            "planner": {"N": 15}, "obstacles": obs}


def anticipated(idx: int, rng: np.random.Generator, N_sim=40):
    """Model-driven traffic that never closes in on the ego from behind in its own lane."""
    ego_lane = int(rng.integers(0, 3))
    v_ego = float(rng.choice([15.0, 18.0, 20.0, 22.0]))
    ref_lane = ego_lane if rng.random() < 0.6 else int(np.clip(ego_lane + rng.choice([-1, 1]), 0, 2))
    obs = []
    for j in range(int(rng.integers(2, 4))):
        lane = int(rng.integers(0, 3))
        if lane == ego_lane:
            # ahead and not much slower, so a steady gap exists
            s = float(rng.uniform(15.0, 40.0))
            v = v_ego + float(rng.uniform(-3.0, 3.0))
        else:
            s = float(rng.uniform(-30.0, 40.0))
            v = v_ego + float(rng.uniform(-4.0, 4.0))
            if abs(s) < 12.0:
                s = 12.0 if s >= 0 else -12.0
        model = {}
        if lane != ego_lane and s > 10.0 and rng.random() < 0.6:
            # lane change into the ego lane, part of the obstacle's own model
            model = {"ref": {"vs": round(v, 2), "d": LANES[ego_lane]}}
        obs.append(car(f"do{j + 1}", round(s, 1), round(v, 2), LANES[lane], 1000 * idx + j, **model))
    return {"schema_version": 1, "id": f"anticipated_{idx:02d}", "T": T, "N_sim": N_sim, "road": ROAD,
            "description": "Model-driven traffic within the prediction model and its supports. "
                           "Randomly generated, invented parameters.",
            "ego": {"init": {"s": 0.0, "d": LANES[ego_lane], "v": v_ego},
                    "ref": {"d": LANES[ref_lane], "v": v_ego}},
            "planner": {"N": 12}, "obstacles": obs}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("src/smpc_cvpm/scenarios"))
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--count", type=int, default=20)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    docs = [overtake(), sudden_stop()] + [anticipated(i + 1, rng) for i in range(args.count)]
    for doc in docs:
        path = args.out / f"{doc['id']}.json"
        path.write_text(json.dumps(doc, indent=1) + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
