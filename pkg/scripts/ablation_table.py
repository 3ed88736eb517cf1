"""Train the full model and every ablation variant on one dataset; print HR@1 overall and on CPU faults.

usage: python scripts/ablation_table.py FEATURES_DIR [--epochs 50] [--seed 0]
"""
import argparse
import dataclasses
from pathlib import Path

from eadro.cli import VARIANTS
from eadro.evaluate import evaluate_end_to_end, evaluate_verdicts, subset
from eadro.model import ModelConfig
from eadro.telemetry import FaultType, load_dataset
from eadro.train import TrainConfig, split_dataset, train_model


def main():
    p = argparse.ArgumentParser()
    p.add_argument("features", type=Path)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    ds = load_dataset(args.features / "dataset.bin")
    train, test = split_dataset(ds.samples, 0.6)
    cpu = subset(test, FaultType.CPU_EXHAUSTION)
    base = ModelConfig(n_services=len(ds.services), n_events=ds.n_events, slots=ds.slots)
    print(f"{'variant':12s} {'F1':>7s} {'HR@1':>7s} {'HR@3':>7s} {'CPU HR@1':>9s}")
    for variant, flags in VARIANTS.items():
        model, _ = train_model(train, ds.graph(), dataclasses.replace(base, **flags),
                               TrainConfig(epochs=args.epochs, seed=args.seed))
        verdicts = model.predict(test)
        m = evaluate_end_to_end(model, test).metrics
        c = evaluate_verdicts([test[i] for i in cpu], [verdicts[i] for i in cpu]).metrics
        print(f"{variant:12s} {m['F1']:7.4f} {m['HR@1']:7.4f} {m['HR@3']:7.4f} {c['HR@1']:9.4f}", flush=True)


if __name__ == "__main__":
    main()
