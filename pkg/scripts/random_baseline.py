"""Print the uniform-random-policy return for every setting and condition.

These numbers anchor the quantitative floors in the acceptance suite: a
trained agent is compared against multiples of them.

Usage:
    python scripts/random_baseline.py [--episodes 200] [--seed 0]
"""

import argparse

import numpy as np

from gudrl.agent import random_baseline


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--episodes", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    for setting in ("online", "gcrl", "meta"):
        rng = np.random.default_rng(args.seed)
        returns = random_baseline(setting, rng, episodes_per_condition=args.episodes)
        print(f"\n{setting}:")
        for condition, mean in returns.items():
            print(f"  {condition:32s} {mean:8.2f}")
        print(f"  {'<average>':32s} {np.mean(list(returns.values())):8.2f}")


if __name__ == "__main__":
    main()
