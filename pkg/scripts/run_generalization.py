"""Held-out violation of margin-tuned policies across tuning-set sizes."""
import argparse

from constrained_defer.pipeline import StudyConfig, run_generalization_study, summarize_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kind", default="dp")
    ap.add_argument("--delta", type=float, default=0.15)
    ap.add_argument("--n-grid", default="1000,10000,100000")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--constant", type=float, default=1.0, help="leading constant of the margin")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="gen_study")
    args = ap.parse_args()
    study = StudyConfig(kind=args.kind, delta=args.delta, seeds=args.seeds, seed=args.seed,
                        constant=args.constant,
                        n_grid=tuple(int(float(x)) for x in args.n_grid.split(",")))
    df = run_generalization_study(study, out_dir=args.out)
    print(summarize_study(df).to_string(index=False))


if __name__ == "__main__":
    main()
