import os
import tempfile
import unittest
from unittest import mock

from fcca_rewardgen.plot import PlotError, emit_plots, plot_reward_curves, plot_report_trend, report_table_text

RECORDS = [{'batch': b, 'mean_reward': -10.0 + b, 'phase': 'init-1' if b < 2 else 'tune-1'} for b in range(4)]

ROWS = [{'iteration': 0, 'success_rate_pct': 60.0, 'average_time_s': 31.5, 'formation_error': 0.25},
        {'iteration': 1, 'success_rate_pct': 75.0, 'average_time_s': 29.0, 'formation_error': 0.2}]

class FigureTest(unittest.TestCase):

    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.dir = tmp.name

    def test_png_written(self):
        path = os.path.join(self.dir, 'nested', 'curves.png')
        plot_reward_curves([('goal', RECORDS)], path)
        with open(path, 'rb') as f:
            self.assertEqual(b'\x89PNG', f.read(4))
        self.assertEqual(['curves.png'], os.listdir(os.path.dirname(path)))

    def test_failed_render_keeps_previous_file(self):
        path = os.path.join(self.dir, 'curves.png')
        with open(path, 'wb') as f:
            f.write(b'previous')
        with mock.patch('matplotlib.figure.Figure.savefig', side_effect=OSError('disk full')):
            with self.assertRaises(OSError):
                plot_reward_curves([('goal', RECORDS)], path)
        with open(path, 'rb') as f:
            self.assertEqual(b'previous', f.read())
        self.assertEqual(['curves.png'], os.listdir(self.dir))

    def test_report_trend(self):
        path = os.path.join(self.dir, 'trend.png')
        plot_report_trend(ROWS, path)
        self.assertTrue(os.path.isfile(path))
        with self.assertRaises(PlotError):
            plot_report_trend([], path)

    def test_label_count_mismatch(self):
        with self.assertRaises(PlotError):
            emit_plots(['a.jsonl', 'b.jsonl'], self.dir, labels=['a'])

class ReportTableTest(unittest.TestCase):

    def test_one_line_per_iteration(self):
        lines = report_table_text(ROWS).splitlines()
        self.assertEqual(3, len(lines))
        self.assertTrue(lines[0].lstrip().startswith('Iteration'))
