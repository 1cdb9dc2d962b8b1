"""Train standard / invariant / equivariant on several MNIST-scale folds and print the comparison.

Full protocol (needs the 70k MNIST IDX files under --data-dir):

    python3 benchmarks/reproduce_tables.py --data-dir ~/mnist --out results/tables.json

The acceptance suite reads ``results/tables.json`` (or $SCALEVEC_RESULTS).
Reduced runs for a quick look::

    python3 benchmarks/reproduce_tables.py --images X-idx3-ubyte --labels Y-idx1-ubyte \
        --sizes 3000,500,1500 --folds 1 --epochs 10 --out results/desk_demo.json
"""
import argparse
import json
import logging
from pathlib import Path

from scalevec import data
from scalevec.experiment import format_table, run_protocol, summarize
from scalevec.models import VARIANTS
from scalevec.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir")
    ap.add_argument("--images")
    ap.add_argument("--labels")
    ap.add_argument("--folds", type=int, default=3)
    ap.add_argument("--sizes", default="10000,2000,50000")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--decay-epoch", type=int, default=None, help="default: 2/3 of --epochs")
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--out", default="results/tables.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    if args.images:
        images, labels = data.read_idx(args.images), data.read_idx(args.labels)
    else:
        images, labels = data.load_mnist(args.data_dir)
    sizes = data.check_sizes(args.sizes.split(","))
    decay = args.decay_epoch or max(1, round(args.epochs * 2 / 3))
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, decay_epoch=decay, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    results = run_protocol(images, labels, args.out, args.folds, sizes, cfg, args.variants.split(","))
    table = summarize(results)
    print(format_table(table))
    print(json.dumps(table, indent=1))


if __name__ == "__main__":
    main()
