"""
FDR Summary Figure
Draws simulated FDR against the proportion of false nulls from a results CSV
"""
from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

# Fixed ids and no timestamp keep the SVG byte-identical across runs
matplotlib.rcParams['svg.hashsalt'] = 'online-fdr-summary'


def plot_fdr_summary(results_csv: Union[str, Path], svg_path: Union[str, Path], level: float = 0.05) -> Path:
    """
    One panel per (rho, n_batch): FDR vs pi1 per procedure with +-2 MCSE
    ribbons and a dashed line at the target level.

    Args:
        results_csv: Table written by the simulate command
        svg_path: Destination of the figure
        level: Target FDR level

    Returns:
        Path of the written SVG
    """
    results = pd.read_csv(results_csv)
    rhos = sorted(results['rho'].unique())
    batches = sorted(results['n_batch'].unique())
    procedures = sorted(results['procedure'].unique())

    fig, axes = plt.subplots(
        len(rhos) or 1, len(batches) or 1,
        figsize=(3.2 * max(len(batches), 1), 2.6 * max(len(rhos), 1)),
        sharex=True, sharey=True, squeeze=False,
    )
    for row, rho in enumerate(rhos):
        for col, n_batch in enumerate(batches):
            ax = axes[row][col]
            cell = results[(results['rho'] == rho) & (results['n_batch'] == n_batch)]
            for procedure in procedures:
                line = cell[cell['procedure'] == procedure].sort_values('pi1')
                if line.empty:
                    continue
                ax.plot(line['pi1'], line['fdr'], marker='o', markersize=3, label=procedure)
                ax.fill_between(line['pi1'], line['fdr'] - 2 * line['mcse'], line['fdr'] + 2 * line['mcse'], alpha=0.2)
            ax.axhline(level, linestyle='--', color='black', linewidth=0.8)
            ax.set_title(f"rho={rho}, n_batch={n_batch}", fontsize=8)
            if row == len(rhos) - 1:
                ax.set_xlabel('pi1')
            if col == 0:
                ax.set_ylabel('FDR(t_max)')
    if procedures:
        axes[0][0].legend(fontsize=6)
    fig.tight_layout()

    svg_path = Path(svg_path)
    svg_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(svg_path, format='svg', metadata={'Date': None})
    plt.close(fig)
    return svg_path
