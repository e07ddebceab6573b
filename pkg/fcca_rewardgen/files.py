""" Output helpers: atomic writes and line-delimited JSON records """

import json
import os
import tempfile

from fcca_rewardgen.exception import InputError

def write_atomically(path, data):
    """ Write `data` (str or bytes) to `path` through a temporary file and a rename """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = 'wb' if isinstance(data, (bytes, bytearray)) else 'w'
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.' + os.path.basename(path) + '.')
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

def dump_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(',', ':'))

def dump_records(records) -> str:
    return ''.join(dump_record(r) + '\n' for r in records)

class RecordWriter:
    """ Writes one JSON object per line, flushing after every record

    Records go to `<path>.partial`, which is renamed to `path` when the writer
    is closed normally; a run that fails leaves only the partial file.
    """

    def __init__(self, path):
        self.path = path
        self.partial_path = path + '.partial'
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        self._file = open(self.partial_path, 'w', encoding='utf-8')

    def write(self, record: dict):
        self._file.write(dump_record(record) + '\n')
        self._file.flush()

    def close(self, commit=True):
        if self._file.closed:
            return
        self._file.close()
        if commit:
            os.replace(self.partial_path, self.path)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close(commit=exc_type is None)

def read_records(path):
    """ All records of a line-delimited JSON file; blank lines are skipped """
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            if not line.endswith('\n'):
                raise InputError('last record is not terminated (truncated file?)',
                                 location=f'{path}:{number}')
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise InputError(f'malformed record ({err.msg})', location=f'{path}:{number}')
    return records
