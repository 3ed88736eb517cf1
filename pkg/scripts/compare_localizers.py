"""Train the node-scoring and the pooled-FC localizer on one dataset and compare test metrics.

usage: python scripts/compare_localizers.py FEATURES_DIR [--epochs 50] [--seed 0]
"""
import argparse
import dataclasses
from pathlib import Path

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
    base = ModelConfig(n_services=len(ds.services), n_events=ds.n_events, slots=ds.slots)
    tcfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    types = " ".join(f"{f.value[:8]:>9s}" for f in FaultType)
    print(f"{'localizer':10s} {'F1':>7s} {'HR@1':>7s} {'HR@3':>7s} {types}")
    for localizer in ("node", "pooled"):
        model, _ = train_model(train, ds.graph(), dataclasses.replace(base, localizer=localizer), tcfg)
        verdicts = model.predict(test)
        m = evaluate_end_to_end(model, test).metrics
        per = []
        for ft in FaultType:
            idx = subset(test, ft)
            per.append(evaluate_verdicts([test[i] for i in idx], [verdicts[i] for i in idx]).metrics["HR@1"])
        print(f"{localizer:10s} {m['F1']:7.4f} {m['HR@1']:7.4f} {m['HR@3']:7.4f} " + " ".join(f"{h:9.4f}" for h in per))


if __name__ == "__main__":
    main()
