import argparse
import sys
from dataclasses import replace
from typing import List, Optional

from .serve import TrainerConfig, serve, stub_evaluate, torch_evaluate


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="capstrainer",
        description="Stdio worker: builds, trains, and scores capsule networks "
                    "described by genotype strings",
    )
    parser.add_argument("--config", help="trainer config file (key = value lines)")
    parser.add_argument(
        "--evaluator", choices=("torch", "stub"), default="torch",
        help="stub answers with deterministic pseudo-accuracies (dry runs, tests)",
    )
    parser.add_argument("--data-dir", help="directory of <dataset>.npz files")
    args = parser.parse_args(argv)

    config = TrainerConfig.from_file(args.config) if args.config else TrainerConfig()
    if args.data_dir:
        config = replace(config, data_dir=args.data_dir)
    evaluate = stub_evaluate if args.evaluator == "stub" else torch_evaluate
    return serve(sys.stdin, sys.stdout, evaluate, config)


if __name__ == "__main__":
    sys.exit(main())
