'''
Reading and writing of ``.obsd`` containers.

A container holds a JSON metadata document and a list of named tensors. The
same format is used for models, calibration sets and Hessian snapshots.

Layout (all integers little-endian)::

    b'OBSD'                      magic
    uint32                       version
    uint32 + bytes               metadata (UTF-8 JSON object)
    uint32                       number of records
    per record:
        uint32 + bytes           name (UTF-8)
        uint8                    dtype code (0: f32, 1: f64)
        uint8                    rank
        uint64 * rank            dimensions
        raw element data         row-major, little-endian
'''
import json
import struct

import numpy as np
from brian2.utils.logger import get_logger

from .errors import (ContainerError, NotAContainer, Truncated, UnknownDtype,
                     DuplicateName, BadShape, MissingRecord)

logger = get_logger(__name__)

MAGIC = b'OBSD'
VERSION = 1
EXTENSION = '.obsd'

DTYPE_CODES = {'f32': 0, 'f64': 1}
DTYPE_NAMES = {code: name for name, code in DTYPE_CODES.items()}
NUMPY_DTYPES = {'f32': np.dtype('<f4'), 'f64': np.dtype('<f8')}


def dtype_name(array):
    """Return the container dtype name (``'f32'`` or ``'f64'``) of an array"""
    if array.dtype == np.float32:
        return 'f32'
    if array.dtype == np.float64:
        return 'f64'
    raise UnknownDtype(f'Unsupported array dtype {array.dtype}')


class TensorRecord(object):
    """
    A named tensor stored in a container.

    Parameters
    ----------
    name : str
        Unique identifier within the container.
    data : `~numpy.ndarray`
        The tensor. Its shape is stored as given.
    dtype : str, optional
        ``'f32'`` or ``'f64'``. Defaults to the dtype of ``data`` (which then
        has to be ``float32`` or ``float64``).
    """
    def __init__(self, name, data, dtype=None):
        data = np.asarray(data)
        if dtype is None:
            dtype = dtype_name(data)
        if dtype not in NUMPY_DTYPES:
            raise UnknownDtype(f'Unknown dtype "{dtype}" for tensor "{name}"')
        self.name = name
        self.dtype = dtype
        self.data = np.require(data, dtype=NUMPY_DTYPES[dtype],
                               requirements='C')

    @property
    def shape(self):
        return tuple(self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, TensorRecord):
            return NotImplemented
        return (self.name == other.name and self.dtype == other.dtype and
                self.shape == other.shape and
                self.data.tobytes() == other.data.tobytes())

    def __repr__(self):
        return f'TensorRecord({self.name!r}, shape={self.shape}, dtype={self.dtype!r})'


class Container(object):
    """
    Metadata plus an ordered list of `TensorRecord` objects.

    Parameters
    ----------
    metadata : dict, optional
        JSON-serializable metadata (model config, seeds, provenance). It is
        stored in its JSON form, so tuples become lists.
    records : list of `TensorRecord`, optional
    version : int, optional
        Format version, defaults to the current version.
    """
    def __init__(self, metadata=None, records=None, version=VERSION):
        self.magic = MAGIC
        self.version = version
        self.metadata = _json_metadata({} if metadata is None else metadata)
        self.records = [] if records is None else list(records)

    def __getitem__(self, name):
        for record in self.records:
            if record.name == name:
                return record.data
        raise MissingRecord(f'Container has no tensor "{name}"')

    def __contains__(self, name):
        return any(record.name == name for record in self.records)

    @property
    def names(self):
        return [record.name for record in self.records]

    def add(self, name, data, dtype=None):
        """Append a tensor, returns the new `TensorRecord`"""
        record = TensorRecord(name, data, dtype=dtype)
        self.records.append(record)
        return record

    def __eq__(self, other):
        if not isinstance(other, Container):
            return NotImplemented
        return (self.version == other.version and
                _json_metadata(self.metadata) ==
                _json_metadata(other.metadata) and
                self.records == other.records)

    def __repr__(self):
        return (f'Container(version={self.version}, '
                f'records={self.names!r})')


def _metadata_bytes(metadata):
    if not isinstance(metadata, dict):
        raise ContainerError('Container metadata has to be a dictionary')
    try:
        text = json.dumps(metadata, sort_keys=True, separators=(',', ':'))
    except (TypeError, ValueError, RecursionError) as ex:
        raise ContainerError(f'Metadata is not JSON-serializable: {ex!r}')
    return text.encode('utf-8')


def _json_metadata(metadata):
    return json.loads(_metadata_bytes(metadata))


def write_container(container):
    """
    Serialize a container to bytes.

    Parameters
    ----------
    container : `Container`

    Returns
    -------
    bytes
    """
    meta = _metadata_bytes(container.metadata)
    chunks = [MAGIC,
              struct.pack('<I', container.version),
              struct.pack('<I', len(meta)), meta,
              struct.pack('<I', len(container.records))]
    seen = set()
    for record in container.records:
        if record.name in seen:
            raise DuplicateName(f'Tensor name "{record.name}" is used twice')
        seen.add(record.name)
        if any(dim <= 0 for dim in record.shape):
            raise BadShape(f'Tensor "{record.name}" has a zero dimension: '
                           f'{record.shape}')
        if len(record.shape) > 255:
            raise BadShape(f'Tensor "{record.name}" has too many dimensions')
        name = record.name.encode('utf-8')
        chunks.append(struct.pack('<I', len(name)))
        chunks.append(name)
        chunks.append(struct.pack('<BB', DTYPE_CODES[record.dtype],
                                  len(record.shape)))
        chunks.append(struct.pack(f'<{len(record.shape)}Q', *record.shape))
        chunks.append(record.data.tobytes(order='C'))
    return b''.join(chunks)


class _Reader(object):
    """Cursor over a byte buffer that raises `Truncated` on short reads"""
    def __init__(self, buffer):
        self.buffer = memoryview(buffer)
        self.offset = 0

    def take(self, n_bytes, what):
        end = self.offset + n_bytes
        if end > len(self.buffer):
            raise Truncated(f'Buffer ends inside {what} (needed {n_bytes} '
                            f'bytes at offset {self.offset}, '
                            f'{len(self.buffer) - self.offset} left)')
        chunk = self.buffer[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(data):
    """
    Parse bytes produced by `write_container`.

    Parameters
    ----------
    data : bytes-like

    Returns
    -------
    `Container`

    Raises
    ------
    NotAContainer
        If the buffer does not start with the magic tag.
    Truncated
        If the buffer ends before the framing is complete.
    UnknownDtype
        If a record uses an unknown dtype code.
    ContainerError
        For any other framing inconsistency.
    """
    reader = _Reader(data)
    if len(reader.buffer) < len(MAGIC):
        if bytes(reader.buffer) == MAGIC[:len(reader.buffer)]:
            raise Truncated('Buffer ends inside the magic tag')
        raise NotAContainer('Not an .obsd container')
    if bytes(reader.take(len(MAGIC), 'magic')) != MAGIC:
        raise NotAContainer('Not an .obsd container (wrong magic)')
    version, = reader.unpack('<I', 'version')
    if version != VERSION:
        raise ContainerError(f'Unsupported container version {version}')
    meta_length, = reader.unpack('<I', 'metadata length')
    meta_raw = bytes(reader.take(meta_length, 'metadata'))
    try:
        metadata = json.loads(meta_raw.decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as ex:
        raise ContainerError(f'Metadata is not valid JSON: {ex}')
    except RecursionError:
        raise ContainerError('Metadata is nested too deeply')
    if not isinstance(metadata, dict):
        raise ContainerError('Metadata has to be a JSON object')

    n_records, = reader.unpack('<I', 'record count')
    records = []
    seen = set()
    for index in range(n_records):
        name_length, = reader.unpack('<I', f'name length of record {index}')
        try:
            name = bytes(reader.take(name_length,
                                     f'name of record {index}')).decode('utf-8')
        except UnicodeDecodeError as ex:
            raise ContainerError(f'Record {index} has an invalid name: {ex}')
        if name in seen:
            raise DuplicateName(f'Tensor name "{name}" is used twice')
        seen.add(name)
        code, rank = reader.unpack('<BB', f'header of "{name}"')
        if code not in DTYPE_NAMES:
            raise UnknownDtype(f'Unknown dtype code {code} for "{name}"')
        dtype = DTYPE_NAMES[code]
        shape = reader.unpack(f'<{rank}Q', f'dimensions of "{name}"')
        if any(dim == 0 for dim in shape):
            raise BadShape(f'Tensor "{name}" has a zero dimension')
        count = int(np.prod(shape, dtype=object))
        n_bytes = count * NUMPY_DTYPES[dtype].itemsize
        raw = reader.take(n_bytes, f'data of "{name}"')
        array = np.frombuffer(raw, dtype=NUMPY_DTYPES[dtype]).reshape(shape).copy()
        records.append(TensorRecord(name, array, dtype=dtype))

    if reader.offset != len(reader.buffer):
        raise ContainerError(f'{len(reader.buffer) - reader.offset} trailing '
                             f'bytes after the last record')
    return Container(metadata=metadata, records=records, version=version)


def save_container(filename, container):
    """Write ``container`` to ``filename``"""
    data = write_container(container)
    with open(filename, 'wb') as f:
        f.write(data)
    logger.debug(f'Wrote {len(data)} bytes ({len(container.records)} tensors) '
                 f'to {filename}')
    return len(data)


def load_container(filename):
    """Read a container from ``filename``"""
    with open(filename, 'rb') as f:
        data = f.read()
    return read_container(data)
