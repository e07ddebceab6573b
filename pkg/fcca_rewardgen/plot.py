""" Plots and CSV extracts of training metrics and tune reports

Images are drawn with matplotlib's Agg backend, imported lazily so the rest
of the package does not pay for it.
"""

import csv
import io
import os

from fcca_rewardgen.exception import RewardGenError, InputError
from fcca_rewardgen.files import read_records, write_atomically

class PlotError(RewardGenError):
    pass

METRIC_COLUMNS = ('batch', 'phase', 'mean_reward', 'policy_loss', 'value_loss', 'entropy',
                  'total_loss', 'goal_fraction', 'converged')
REPORT_COLUMNS = ('iteration', 'success_rate_pct', 'average_time_s', 'formation_error')
_REPORT_HEADERS = ('Iteration', 'Success rate (%)', 'Average time (s)', 'Formation error')

def load_metrics(path):
    """ Records of a training metrics file; an empty file is an error """
    try:
        records = read_records(path)
    except InputError as err:
        raise PlotError(err.reason, location=err.location)
    records = [r for r in records if 'batch' in r]
    if not records:
        raise PlotError('no training records', location=path)
    return records

def _csv_text(columns, rows):
    stream = io.StringIO()
    writer = csv.writer(stream, lineterminator='\n')
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row.get(c, '') for c in columns])
    return stream.getvalue()

def metrics_csv(records):
    return _csv_text(METRIC_COLUMNS, records)

def report_table_csv(rows):
    return _csv_text(REPORT_COLUMNS, rows)

def report_table_text(rows):
    """ The iteration x metric table as aligned plain text """
    cells = [list(_REPORT_HEADERS)]
    for row in rows:
        cells.append([str(row['iteration']),
                      f'{row["success_rate_pct"]:.1f}',
                      f'{row["average_time_s"]:.2f}',
                      f'{row["formation_error"]:.4g}'])
    widths = [max(len(r[i]) for r in cells) for i in range(len(_REPORT_HEADERS))]
    lines = ['  '.join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return '\n'.join(lines) + '\n'

def _pyplot():
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    return plt

def _save_figure(plt, fig, path):
    """ Render to memory, then write the PNG through `write_atomically` """
    image = io.BytesIO()
    try:
        fig.savefig(image, format='png', dpi=120)
    finally:
        plt.close(fig)
    write_atomically(path, image.getvalue())

def plot_reward_curves(runs, path):
    """ Mean episode reward against batch for each (label, records) run, overlaid """
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, records in runs:
        ax.plot(range(len(records)), [r['mean_reward'] for r in records], label=label)
        boundaries = [i for i in range(1, len(records)) if records[i].get('phase') != records[i - 1].get('phase')]
        for b in boundaries:
            ax.axvline(b, color='grey', linewidth=0.5, linestyle=':')
    ax.set_xlabel('batch')
    ax.set_ylabel('mean episode reward')
    if len(runs) > 1:
        ax.legend()
    fig.tight_layout()
    _save_figure(plt, fig, path)

def plot_report_trend(rows, path):
    """ Success rate, average time and formation error per tune iteration """
    if not rows:
        raise PlotError('no report rows to plot')
    plt = _pyplot()
    iterations = [r['iteration'] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    for ax, key, title in zip(axes, REPORT_COLUMNS[1:], _REPORT_HEADERS[1:]):
        ax.plot(iterations, [r[key] for r in rows], marker='o')
        ax.set_title(title)
        ax.set_xlabel('iteration')
        ax.set_xticks(iterations)
    fig.tight_layout()
    _save_figure(plt, fig, path)

def emit_plots(metrics_paths, output_dir, labels=None, report_rows=None):
    """ Reward curves (one overlaid image), a CSV per metrics file, and optionally the report trend """
    if not metrics_paths:
        raise PlotError('no metrics files given')
    labels = labels or [os.path.splitext(os.path.basename(p))[0] for p in metrics_paths]
    if len(labels) != len(metrics_paths):
        raise PlotError(f'{len(labels)} labels for {len(metrics_paths)} metrics files')
    runs = []
    written = []
    for label, path in zip(labels, metrics_paths):
        records = load_metrics(path)
        runs.append((label, records))
        csv_path = os.path.join(output_dir, f'{label}.csv')
        write_atomically(csv_path, metrics_csv(records))
        written.append(csv_path)
    curve = os.path.join(output_dir, 'reward_curves.png')
    plot_reward_curves(runs, curve)
    written.append(curve)
    if report_rows:
        trend = os.path.join(output_dir, 'report_trend.png')
        plot_report_trend(report_rows, trend)
        written.append(trend)
    return written
