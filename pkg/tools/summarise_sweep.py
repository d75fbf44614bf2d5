import sys

import pandas as pd

from imvc.io import SweepIndexWriter


def metric_grid(df, metric='acc'):
    """
    alpha down the rows, beta across the columns. Cells trained more than
    once (re-runs into the same sweep directory) are averaged.
    """
    grouped = df.groupby(['alpha', 'beta'])[metric].mean().reset_index()
    return grouped.pivot(index='alpha', columns='beta', values=metric)


if __name__ == '__main__':
    sweep_dir = sys.argv[1]
    metric = sys.argv[2] if len(sys.argv) > 2 else 'acc'
    df = pd.DataFrame(SweepIndexWriter(sweep_dir).get_metadata())

    print(f"{len(df)} cells")
    print(metric_grid(df, metric).to_string(float_format=lambda x: f"{x:.4f}"))

    best = df.loc[df[metric].idxmax()]
    print(f"Best {metric}: {best[metric]:.4f} at alpha={best['alpha']}, beta={best['beta']}")
