'''
VDMK checkpoint format (little endian):

    "VDMK" | u32 version | u32 meta length | meta (UTF-8 JSON)
    | u32 tensor count
    | per tensor: u32 name length, name (UTF-8), u32 rank, u64 dims[rank], u64 payload offset
    | f64 payloads
    | u32 CRC-32 of everything before it

Offsets are relative to the start of the payload region.
'''

import json
import math
import struct
import zlib

import numpy as np

from utils.errors import ChecksumError, FileFormatError, TruncatedFileError, VersionError
from utils.file_utils import atomic_write_bytes

MAGIC = b'VDMK'
VERSION = 1


def encode_checkpoint(tensors, meta=None):
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(',', ':')).encode('utf-8')
    head = [MAGIC, struct.pack('<II', VERSION, len(meta_bytes)), meta_bytes,
            struct.pack('<I', len(tensors))]
    payloads = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype='<f8')
        name_bytes = name.encode('utf-8')
        head.append(struct.pack('<I', len(name_bytes)) + name_bytes)
        head.append(struct.pack('<I', arr.ndim) + struct.pack('<%dQ' % arr.ndim, *arr.shape))
        head.append(struct.pack('<Q', offset))
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    body = b''.join(head + payloads)
    return body + struct.pack('<I', zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise TruncatedFileError('checkpoint truncated at byte %d' % self.pos)
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob):
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise FileFormatError('not a VDMK checkpoint')
    version, meta_len = reader.unpack('<II')
    if version != VERSION:
        raise VersionError('VDMK version %d, expected %d' % (version, VERSION))
    meta_raw = reader.take(meta_len)
    (count,) = reader.unpack('<I')
    directory = []
    for _ in range(count):
        (name_len,) = reader.unpack('<I')
        name_raw = reader.take(name_len)
        (rank,) = reader.unpack('<I')
        dims = reader.unpack('<%dQ' % rank)
        (offset,) = reader.unpack('<Q')
        directory.append((name_raw, dims, offset))

    payload_start = reader.pos
    payload_len = sum(8 * math.prod(dims) for _, dims, _ in directory)
    expected = payload_start + payload_len + 4
    if len(blob) < expected:
        raise TruncatedFileError('checkpoint truncated: %d of %d bytes' % (len(blob), expected))
    if len(blob) > expected:
        raise FileFormatError('trailing bytes after checkpoint')
    (stored_crc,) = struct.unpack('<I', blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError('checkpoint checksum mismatch')

    try:
        meta = json.loads(meta_raw.decode('utf-8'))
        tensors = {}
        for name_raw, dims, offset in directory:
            n = math.prod(dims)
            start = payload_start + offset
            if start + 8 * n > payload_start + payload_len:
                raise FileFormatError('tensor payload out of range')
            arr = np.frombuffer(blob, dtype='<f8', count=n, offset=start)
            tensors[name_raw.decode('utf-8')] = arr.astype(np.float64).reshape(dims)
    except (UnicodeDecodeError, ValueError) as e:
        raise FileFormatError('corrupt checkpoint: %s' % e)
    return tensors, meta


def save_checkpoint(path, tensors, meta=None):
    atomic_write_bytes(encode_checkpoint(tensors, meta), path)
    return


def load_checkpoint(path):
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read())
