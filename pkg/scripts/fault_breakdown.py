"""Most common top-3 rankings per injected (service, fault type) on the test split of a trained run.

usage: python scripts/fault_breakdown.py FEATURES_DIR RUN_DIR
"""
import collections
import sys
from pathlib import Path

from eadro.telemetry import load_dataset
from eadro.train import load_run, split_dataset


def main():
    features, run = Path(sys.argv[1]), Path(sys.argv[2])
    ds = load_dataset(features / "dataset.bin")
    names = ds.services
    model, manifest = load_run(run)
    _, test = split_dataset(ds.samples, manifest["split"]["ratio"] if "split" in manifest else 0.6)
    tally = collections.defaultdict(collections.Counter)
    for s, v in zip(test, model.predict(test)):
        if s.label_y:
            top = tuple(names[i] for i in v.ranking[:3]) if v.abnormal else ("(missed)",)
            tally[(names[s.label_culprit], s.fault_type.value)][top] += 1
    for (service, fault), counts in tally.items():
        n = sum(counts.values())
        hit = sum(c for top, c in counts.items() if top[0] == service) / n
        common = "; ".join(f"{'>'.join(t)} x{c}" for t, c in counts.most_common(3))
        print(f"{service:12s} {fault:15s} HR@1 {hit:.2f}  {common}")


if __name__ == "__main__":
    main()
