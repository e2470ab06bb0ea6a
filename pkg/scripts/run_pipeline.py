"""Explain the default ground-truth setup and score the group map with the removal game and easyPEASI."""
import time

import numpy as np

from _common import balanced_subset, base_parser, setup
from freqmask.evaluate import easy_peasi, removal_feed_in, removal_feed_in_instance, threshold_split
from freqmask.explainer import ExplainerConfig, explain_epochs, group_saliency
from freqmask.spectral import make_partition


def main():
    args = base_parser(__doc__).parse_args()
    epochs, truth, model, clusters = setup(args.seed, args.model)
    part = make_partition(epochs[0].data.shape[1], 10)
    subset = balanced_subset(epochs, args.instances, args.seed)
    start = time.perf_counter()
    exps = explain_epochs(model, subset, clusters, ExplainerConfig(), seed=args.seed)
    print(f"explained {len(exps)} instances in {time.perf_counter() - start:.1f}s")
    g = group_saliency([e.saliency for e in exps]).mask_values
    np.set_printoptions(precision=2, suppress=True, linewidth=140)
    print("group map (channels x bands):\n", g)
    print(f"mean informative {g[truth.informative].mean():.3f}, other {g[~truth.informative].mean():.3f}")
    for name, rep in (("group", removal_feed_in(model, epochs, threshold_split(g), part)),
                      ("instance", removal_feed_in_instance(model, subset, [e.saliency for e in exps], part)),
                      ("easyPEASI", removal_feed_in(model, epochs,
                                                    threshold_split(easy_peasi(model, epochs, part)), part))):
        print(f"{name:>9}: Ori {rep.accuracy_original:.3f} RN {rep.accuracy_remove_nonsalient:.3f} "
              f"RS {rep.accuracy_remove_salient:.3f} gap {rep.gap:.3f}")


if __name__ == "__main__":
    main()
