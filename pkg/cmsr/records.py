"""
The CMSR record file: a small little-endian container of named float32
tensors, used for model files and for patch archives.

    magic "CMSR" | version u8 | scale u8 | profile u8 | record count u16
    per record: name length u16 | UTF-8 name | rank u8 | dims u32 * rank |
                float32 payload

Records follow each other without padding.
"""
import struct
from collections import OrderedDict

import numpy as np

from cmsr.exceptions import CorruptModel, InvalidArgument


MAGIC = b'CMSR'
VERSION = 1
MAX_RECORDS = 0xFFFF

_HEADER = struct.Struct('<4sBBBH')


def write_records(path, scale, profile, records):
    """
    Writes records (an iterable of (name, array) pairs, in order) to path.
    """
    records = list(records)
    if len(records) > MAX_RECORDS:
        raise InvalidArgument(
            "%i records do not fit in one file (limit %i)"
            % (len(records), MAX_RECORDS))
    chunks = [_HEADER.pack(MAGIC, VERSION, scale, profile, len(records))]
    for name, array in records:
        encoded = name.encode('utf-8')
        array = np.ascontiguousarray(array, dtype='<f4')
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', array.ndim))
        chunks.append(struct.pack('<%iI' % array.ndim, *array.shape))
        chunks.append(array.tobytes())
    with open(path, 'wb') as f:
        f.write(b''.join(chunks))


class _Reader(object):
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, size, record):
        if self.offset + size > len(self.data):
            raise CorruptModel("file truncated inside record %r" % record,
                               record=record)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt, record):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), record))


def read_records(path):
    """
    Returns (scale, profile, records) where records is an OrderedDict of
    name -> float32 array. Raises CorruptModel on any structural problem;
    nothing is returned for a partially readable file.
    """
    with open(path, 'rb') as f:
        data = f.read()
    reader = _Reader(data)
    magic, version, scale, profile, count = reader.unpack(
        _HEADER.format, '<header>')
    if magic != MAGIC:
        raise CorruptModel("bad magic %r" % magic, record='<header>')
    if version != VERSION:
        raise CorruptModel("unsupported version %i" % version,
                           record='<header>')

    records = OrderedDict()
    for index in range(count):
        label = '#%i' % index
        (name_len,) = reader.unpack('<H', label)
        try:
            name = reader.take(name_len, label).decode('utf-8')
        except UnicodeDecodeError:
            raise CorruptModel("record %s has an invalid name" % label,
                               record=label)
        (rank,) = reader.unpack('<B', name)
        dims = reader.unpack('<%iI' % rank, name)
        size = int(np.prod(dims, dtype=np.int64)) * 4
        payload = reader.take(size, name)
        if name in records:
            raise CorruptModel("duplicate record %r" % name, record=name)
        records[name] = np.frombuffer(payload, dtype='<f4').reshape(dims) \
            .astype(np.float32)
    if reader.offset != len(data):
        raise CorruptModel("%i trailing bytes after the last record"
                           % (len(data) - reader.offset), record='<trailer>')
    return scale, profile, records
