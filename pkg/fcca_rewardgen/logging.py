# Diagnostics go to stderr; INFO lines only when verbose.

import sys

_verbose = False

def set_verbose(flag: bool):
    global _verbose
    _verbose = bool(flag)

def is_verbose():
    return _verbose

def _emit_message(level_string, messages, location, sep, end):
    sys.stderr.write(level_string)
    iterator = iter(messages)
    val = next(iterator, None)
    if val is not None:
        sys.stderr.write(str(val))
    for val in iterator:
        sys.stderr.write(sep)
        sys.stderr.write(str(val))
    if location is not None:
        sys.stderr.write(f' at {location}')
    sys.stderr.write(end)
    sys.stderr.flush()

def info(*messages, location=None, sep='\n ', end='\n'):
    if _verbose:
        _emit_message('INFO: ', messages, location, sep, end)

def warn(*messages, location=None, sep='\n ', end='\n'):
    _emit_message('WARNING: ', messages, location, sep, end)

def error(*messages, location=None, sep='\n ', end='\n'):
    _emit_message('ERROR: ', messages, location, sep, end)
