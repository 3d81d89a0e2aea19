#!/usr/bin/env python3
"""
Sweep Visualization
Plots accuracy against the number of attacks, one panel per attack kind.
"""

import logging
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd

logger = logging.getLogger(__name__)

CURVES = {
    'attacked_accuracy': ('No defense', '#F1995D', 'o'),
    'defended_accuracy': ('DISP', '#4472C4', 's'),
    'disp_g_accuracy': ('DISP_G', '#A9D08E', '^'),
}


def plot_sweep(sweep_df: pd.DataFrame, output_file: str = 'sweep.png'):
    """
    Draw undefended and defended accuracy over num_attacks.

    Args:
        sweep_df: Rows with kind, num_attacks and accuracy columns, as
            returned by run_sweep
        output_file: Image path
    """
    if sweep_df.empty:
        raise ValueError("Nothing to plot: the sweep has no rows")
    kinds = list(dict.fromkeys(sweep_df['kind']))
    fig, axes = plt.subplots(1, len(kinds), figsize=(4 * len(kinds), 4), sharey=True, squeeze=False)
    axes = axes[0]

    for ax, kind in zip(axes, kinds):
        rows = sweep_df[sweep_df['kind'] == kind].sort_values('num_attacks')
        for column, (label, color, marker) in CURVES.items():
            if column in rows:
                ax.plot(rows['num_attacks'], rows[column], label=label, color=color, marker=marker)
        if 'attack_free_accuracy' in rows and len(rows):
            ax.axhline(rows['attack_free_accuracy'].iloc[0], color='gray', linewidth=0.8, linestyle='--',
                       label='Attack-free')
        ax.set_title(kind.upper() if kind == 'overall' else kind.capitalize(), fontsize=12, weight='bold')
        ax.set_xlabel('Number of attacks')
        ax.set_xticks(sorted(rows['num_attacks'].unique()))
        ax.set_ylim(0.0, 1.05)
        ax.grid(alpha=0.3)

    axes[0].set_ylabel('Accuracy')
    axes[-1].legend(loc='lower left', fontsize=8)

    plt.tight_layout()
    dirname = os.path.dirname(output_file)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    plt.savefig(output_file, dpi=150, bbox_inches='tight')
    logger.info(f"Sweep plot saved to {output_file}")
    plt.close(fig)
