import difflib
import filecmp
import io
import os
import shutil
import traceback
from dataclasses import dataclass, field
from enum import Enum

def _perform_diff(result, original):
    """  Compares the files `result` and `original`

    Returns a tuple:
      The first value is True if the files are the same
      The second arg is the text representation of the diff
    """

    if filecmp.cmp(result, original, shallow=False):
        return (True, "")
    with open(result) as f:
        result_txt = f.readlines()
    with open(original) as f:
        original_txt = f.readlines()
    with io.StringIO() as output_stream:
        for line in difflib.unified_diff(original_txt, result_txt, fromfile=original, tofile=result):
            output_stream.write(line)
        return (False, output_stream.getvalue())

def _prep_output_dir(outdir):
    if os.path.exists(outdir):
        if not os.path.isdir(outdir):
            raise Exception(f'output directory {outdir} is a file')
        shutil.rmtree(outdir)
    os.makedirs(outdir)

_divider_len = 40

def _output_err_title(message, outfile):
    equal_sign_amount = _divider_len - len(message) - 2
    start_banner = '=' * (equal_sign_amount // 2)
    end_banner = '=' * (equal_sign_amount - len(start_banner))
    print(start_banner, message, end_banner, file=outfile)

def _output_err_bar(outfile):
    print(('=' * _divider_len), file=outfile)

def _output_diff_error(input_file, base_file, output_file, diff, outfile):
    _output_err_title("TEST FAILED", outfile)
    outfile.write(f"input:   {input_file}\n")
    outfile.write(f"base:    {base_file}\n\n")
    outfile.write(f"result:  {output_file}\n")
    outfile.write(diff)
    _output_err_bar(outfile)

def _output_error(name, message, reason, outfile):
    _output_err_title(message, outfile)
    outfile.write(f"test: {name}\n\n")
    print(reason, '\n', sep='', file=outfile)
    _output_err_bar(outfile)

def _exception_text(err):
    stream = io.StringIO()
    stream.write("Exception thrown:\n")
    if hasattr(err, 'message'):
        stream.write(str(err.message))
        stream.write('\n')
    traceback.print_exc(file=stream)
    return stream.getvalue().rstrip()

class TestOptions(Enum):
    EXPECT_FAIL = 0
    SKIP = 1
    # the input is invalid: the generator must raise, and no output is compared
    THROWS_EXCEPTION = 2

def _get_options(opt_dict):
    return {option: opt_dict.get(option, False) for option in TestOptions}

def _output_name(filename):
    """ `inputs/a_b.rdsl` -> `inputs_a_b.rdsl`, so outputs of different directories never collide """
    parts = os.path.normpath(filename).split(os.sep)
    return '_'.join(p for p in parts if p not in ('', '.', '..'))

@dataclass
class TestStats:
    failed: list = field(default_factory=list)
    expected_fail: list = field(default_factory=list)
    unexpected_pass: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    total: int = 0

    def print_stats(self, outfile):
        outfile.write("Results:\n")
        num_okay = (self.total - len(self.failed) - len(self.expected_fail)
                    - len(self.unexpected_pass) - len(self.skipped))
        outfile.write(f"  Ok:                    {num_okay}\n")
        outfile.write(f"  Expected Fail:         {len(self.expected_fail)}\n")
        outfile.write(f"  Fail:                  {len(self.failed)}\n")
        outfile.write(f"  Unexpected Pass:       {len(self.unexpected_pass)}\n")
        outfile.write(f"  Skipped:               {len(self.skipped)}\n")

    def was_success(self):
        return len(self.failed) == 0 and len(self.unexpected_pass) == 0

def _perform_test(form, gen_fn, stats, outdir, outfile):
    input_file, compare_file, opts = form
    output_file = os.path.join(outdir, _output_name(input_file))
    options = _get_options(opts)
    stats.total += 1

    if options[TestOptions.SKIP]:
        stats.skipped.append(input_file)
        return
    try:
        gen_fn(input_file, output_file)
    except Exception as err:
        if options[TestOptions.EXPECT_FAIL]:
            stats.expected_fail.append(input_file)
        elif not options[TestOptions.THROWS_EXCEPTION]:
            stats.failed.append(input_file)
            _output_error(input_file, "TEST FAILED", _exception_text(err), outfile)
        return
    if options[TestOptions.THROWS_EXCEPTION]:
        stats.failed.append(input_file)
        _output_error(input_file, "TEST FAILED", "The input was accepted but should be rejected", outfile)
        return

    if not os.path.exists(output_file):
        stats.failed.append(input_file)
        _output_error(input_file, "TEST FAILED", f"File {output_file} wasn't produced.", outfile)
        return

    is_same, diff = _perform_diff(output_file, compare_file)
    if not is_same:
        if options[TestOptions.EXPECT_FAIL]:
            stats.expected_fail.append(input_file)
        else:
            stats.failed.append(input_file)
            _output_diff_error(input_file, compare_file, output_file, diff, outfile)
    elif options[TestOptions.EXPECT_FAIL]:
        stats.unexpected_pass.append(input_file)
        _output_error(input_file, "UNEXPECTED PASS", "The test unexpectedly passed", outfile)

def _perform_check(name, check_fn, stats, outdir, outfile):
    """ Run a check that does its own comparison: it returns None on success, or a failure reason """
    stats.total += 1
    workdir = os.path.join(outdir, name)
    os.makedirs(workdir, exist_ok=True)
    try:
        reason = check_fn(workdir)
    except Exception as err:
        reason = _exception_text(err)
    if reason is not None:
        stats.failed.append(name)
        _output_error(name, "CHECK FAILED", reason, outfile)

def run_tests(test_forms, gen_fn, outdir, outfile, checks=()):
    """ Golden-file tests of `gen_fn(input, output)`, followed by the (name, check_fn) checks """
    _prep_output_dir(outdir)

    stats = TestStats()
    for form in test_forms:
        _perform_test(form, gen_fn, stats, outdir, outfile)
    for name, check_fn in checks:
        _perform_check(name, check_fn, stats, outdir, outfile)

    stats.print_stats(outfile)
    return stats.was_success()
