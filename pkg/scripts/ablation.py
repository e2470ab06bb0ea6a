"""Compare the full explainer with the no-regularizer and one-branch variants."""
from _common import balanced_subset, base_parser, setup
from freqmask.evaluate import removal_feed_in, threshold_split
from freqmask.explainer import ExplainerConfig, explain_epochs, group_saliency
from freqmask.spectral import make_partition


def main():
    args = base_parser(__doc__).parse_args()
    epochs, truth, model, clusters = setup(args.seed, args.model)
    part = make_partition(epochs[0].data.shape[1], 10)
    subset = balanced_subset(epochs, args.instances, args.seed)
    variants = {"full": ExplainerConfig(), "no_regularizers": ExplainerConfig(regularizers_enabled=False),
                "one_branch": ExplainerConfig(one_branch_mode=True)}
    print("variant,rn,rs,gap,map_contrast")
    for name, cfg in variants.items():
        g = group_saliency([e.saliency for e in explain_epochs(model, subset, clusters, cfg, seed=args.seed)])
        g = g.mask_values
        r = removal_feed_in(model, epochs, threshold_split(g), part)
        contrast = g[truth.informative].mean() - g[~truth.informative].mean()
        print(f"{name},{r.accuracy_remove_nonsalient:.4f},{r.accuracy_remove_salient:.4f},{r.gap:.4f},{contrast:.4f}")


if __name__ == "__main__":
    main()
