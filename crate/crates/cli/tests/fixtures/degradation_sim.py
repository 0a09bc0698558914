"""Monte-Carlo estimate of grade agreement and G0-1 vs G2-3 ROC AUC when
every keypoint coordinate of the grade-mix phantoms gets iid N(0, 1 mm)
noise. Writes degradation_expected.json next to this script.

    python3 degradation_sim.py [--trials N] [--seed S]
"""
import argparse
import json
import pathlib

import numpy as np

HERE = pathlib.Path(__file__).parent
THRESHOLDS = (0.8, 0.74, 0.6)  # mild, moderate, severe upper bounds


def grade(g):
    mild, moderate, severe = THRESHOLDS
    return np.where(g <= severe, 3, np.where(g <= moderate, 2, np.where(g <= mild, 1, 0)))


def heights(kind, target, base):
    if kind is None:
        return (base, base, base)
    r = target * base
    return {"wedge": (r, base, base), "biconcave": (base, r, base), "crush": (r, r, base)}[kind]


def composition(mix):
    out = []
    for p in mix["phantoms"]:
        for i in range(mix["n_vertebrae"]):
            f = p["fractures"].get(str(i))
            out.append(heights(f["type"], f["target_genant"], mix["base_height"]) if f else heights(None, 1.0, mix["base_height"]))
    return np.array(out)


def auc(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--sigma", type=float, default=1.0)
    args = ap.parse_args()
    mix = json.loads((HERE / "grade_mix.json").read_text())
    h = composition(mix)
    half_w = mix["body_width"] / 2.0
    xs = np.array([-half_w, 0.0, half_w])
    true_g = h.min(1) / h.max(1)
    true_grade = grade(true_g)
    labels = true_grade >= 2

    rng = np.random.default_rng(args.seed)
    agree, aucs = [], []
    for _ in range(args.trials):
        n = len(h)
        # top and bottom points per column, each coordinate perturbed
        top = np.stack([np.broadcast_to(xs, (n, 3)), h / 2.0], -1) + rng.normal(0, args.sigma, (n, 3, 2))
        bot = np.stack([np.broadcast_to(xs, (n, 3)), -h / 2.0], -1) + rng.normal(0, args.sigma, (n, 3, 2))
        hh = np.linalg.norm(top - bot, axis=-1)
        g = hh.min(1) / hh.max(1)
        agree.append((grade(g) == true_grade).mean())
        aucs.append(auc(1.0 - g, labels))
    agree, aucs = np.array(agree), np.array(aucs)
    report = {
        "sigma_mm": args.sigma,
        "trials": args.trials,
        "seed": args.seed,
        "n_vertebrae": int(len(h)),
        "grade_counts": {k: int((true_grade == i).sum()) for i, k in enumerate(["normal", "mild", "moderate", "severe"])},
        "agreement_mean": float(agree.mean()),
        "agreement_p05": float(np.quantile(agree, 0.05)),
        "p_agreement_ge_0.90": float((agree >= 0.90).mean()),
        "auc_mean": float(aucs.mean()),
        "auc_p05": float(np.quantile(aucs, 0.05)),
        "p_auc_ge_0.95": float((aucs >= 0.95).mean()),
        "thresholds": {"agreement": 0.90, "auc": 0.95},
    }
    (HERE / "degradation_expected.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
