"""Sweep the alignment weight and report KDE log-likelihood and removal drops per value."""
from _common import balanced_subset, base_parser, setup
from freqmask.evaluate import lambda_sweep


def main():
    p = base_parser(__doc__)
    p.add_argument("--lambdas", type=lambda s: [float(v) for v in s.split(",")], default=[0, 0.0005, 0.005, 0.05, 0.5])
    args = p.parse_args()
    epochs, _, model, clusters = setup(args.seed, args.model)
    rows = lambda_sweep(model, epochs, clusters, args.lambdas, seed=args.seed,
                        explain_set=balanced_subset(epochs, args.instances, args.seed))
    print("lambda,kde,rn_drop,rs_drop")
    for r in rows:
        print(f"{r.lam:g},{r.kde_score:.4f},{r.rn_drop:.4f},{r.rs_drop:.4f}")


if __name__ == "__main__":
    main()
