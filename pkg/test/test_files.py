import os
import tempfile
import unittest

from fcca_rewardgen.exception import InputError
from fcca_rewardgen.files import RecordWriter, dump_record, read_records, write_atomically

class WriteAtomicallyTest(unittest.TestCase):

    def test_text_and_bytes(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'nested', 'report.txt')
            write_atomically(path, 'success_rate: 1\n')
            with open(path) as f:
                self.assertEqual('success_rate: 1\n', f.read())
            write_atomically(path, b'\x00\x01')
            with open(path, 'rb') as f:
                self.assertEqual(b'\x00\x01', f.read())
            self.assertEqual(['report.txt'], os.listdir(os.path.dirname(path)))

class RecordWriterTest(unittest.TestCase):

    def test_commit(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'metrics.jsonl')
            with RecordWriter(path) as writer:
                writer.write({'batch': 0, 'b': [1, 2]})
                writer.write({'batch': 1})
                self.assertTrue(os.path.exists(path + '.partial'))
                self.assertFalse(os.path.exists(path))
            self.assertFalse(os.path.exists(path + '.partial'))
            self.assertEqual([{'batch': 0, 'b': [1, 2]}, {'batch': 1}], read_records(path))

    def test_failure_leaves_partial_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'metrics.jsonl')
            with self.assertRaises(RuntimeError):
                with RecordWriter(path) as writer:
                    writer.write({'batch': 0})
                    raise RuntimeError('training failed')
            self.assertFalse(os.path.exists(path))
            self.assertEqual([{'batch': 0}], read_records(path + '.partial'))

    def test_stable_key_order(self):
        self.assertEqual('{"a":1,"b":2}', dump_record({'b': 2, 'a': 1}))

class ReadRecordsTest(unittest.TestCase):

    def read(self, text):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'records.jsonl')
            with open(path, 'w') as f:
                f.write(text)
            return read_records(path)

    def test_blank_lines(self):
        self.assertEqual([{'a': 1}, {'a': 2}], self.read('{"a":1}\n\n{"a":2}\n'))

    def test_malformed(self):
        with self.assertRaises(InputError) as ctx:
            self.read('{"a":1}\n{"a":\n')
        self.assertTrue(ctx.exception.location.endswith(':2'))

    def test_truncated(self):
        with self.assertRaises(InputError):
            self.read('{"a":1}\n{"a":2}')
