"""Leave-one-subject-out study: retrain per held-out subject, explain, and score on the held-out epochs."""
from _common import base_parser
from freqmask.evaluate import loso_study
from freqmask.explainer import ExplainerConfig
from freqmask.models import ModelConfig, TrainHyperparams
from freqmask.synthdata import generate_dataset


def main():
    args = base_parser(__doc__).parse_args()
    epochs, _ = generate_dataset(args.seed)
    res = loso_study(epochs, ModelConfig(), TrainHyperparams(), ExplainerConfig(), seed=args.seed,
                     max_explained=args.instances)
    print("subject,train_acc,ori,rn_drop,rs_drop")
    for s in res.splits:
        r = s.report
        print(f"{s.subject},{s.train_accuracy:.4f},{r.accuracy_original:.4f},{r.rn_drop:.4f},{r.rs_drop:.4f}")


if __name__ == "__main__":
    main()
