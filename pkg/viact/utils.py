# This file is part of ViACT.
# Copyright (c) 2026 ViACT developers
#
# ViACT is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# ViACT is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.
#
# You should have received a copy of the GNU Affero General Public License
# along with ViACT.  If not, see <http://www.gnu.org/licenses/>.

import io
import os
import json
import zlib
import tempfile

import numpy as np
from lxml import etree

from viact.exceptions import DatasetError, UsageError


PGM_MAXVAL = 65535


def debug(obj):
    import pprint

    pp = pprint.PrettyPrinter(indent=4)
    pp.pprint(obj)


def rng_stream(seed, name):
    """
    Returns independent random generator for the named sub-stream of a run seed.

    All randomness in a run flows from one seed. Components ask for their own stream
    ('data', 'mask', 'init', ...) so that changing how much randomness one component
    consumes does not shift any other component.

    :Args:
      - seed: Run seed (int)
      - name: Name of the sub-stream

    :Returns:
      Instance of numpy.random.Generator.
    """
    key = zlib.crc32(name.encode('utf-8'))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


def get_rng_state(rng):
    "Plain dict with the PCG64 state of the generator, ints kept as strings."
    state = rng.bit_generator.state

    return {'state': str(state['state']['state']),
            'inc': str(state['state']['inc']),
            'has_uint32': str(state['has_uint32']),
            'uinteger': str(state['uinteger'])}


def set_rng_state(rng, values):
    rng.bit_generator.state = {
        'bit_generator': 'PCG64',
        'state': {'state': int(values['state']), 'inc': int(values['inc'])},
        'has_uint32': int(values['has_uint32']),
        'uinteger': int(values['uinteger'])
    }


def worker_count(default=None):
    """
    Number of worker threads allowed for this process. VIACT_THREADS caps it.
    """
    cpus = os.cpu_count() or 1
    value = os.environ.get('VIACT_THREADS')

    if value is None or value.strip() == '':
        return default or cpus

    try:
        limit = int(value)
    except ValueError:
        raise UsageError('VIACT_THREADS must be an integer, got "{}".'.format(value))

    if limit < 1:
        raise UsageError('VIACT_THREADS must be at least 1.')

    return min(limit, default or cpus)


def atomic_write(path, content):
    """
    Writes content (bytes or str) next to the destination and renames it into place.
    """
    if isinstance(content, str):
        content = content.encode('utf-8')

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_name = tempfile.mkstemp(prefix='.tmp-', dir=directory)

    try:
        with os.fdopen(fd, 'wb') as fp:
            fp.write(content)
        os.replace(tmp_name, path)
    except:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def parse_string(s):
    parser = etree.XMLParser(resolve_entities=False, remove_blank_text=True)

    if isinstance(s, str):
        s = s.encode('utf-8')

    return etree.parse(io.BytesIO(s), parser=parser)


def xml_bytes(root):
    return etree.tostring(root, pretty_print=True, encoding='utf-8', xml_declaration=True)


def float_attr(value):
    "Shortest text that reads back to the same float."
    return repr(float(value))


# Portable graymap (P5, 16-bit big endian)

def write_pgm(path, frame):
    """
    Stores frame with intensities in [0, 1] as a 16-bit binary PGM file.
    """
    frame = np.asarray(frame, dtype=np.float64)

    if frame.ndim != 2:
        raise UsageError('PGM frames are two dimensional, got shape {}.'.format(frame.shape))

    height, width = frame.shape
    values = np.rint(np.clip(frame, 0.0, 1.0) * PGM_MAXVAL).astype('>u2')
    header = 'P5\n{} {}\n{}\n'.format(width, height, PGM_MAXVAL).encode('ascii')

    atomic_write(path, header + values.tobytes())


def read_pgm(path):
    with open(path, 'rb') as fp:
        content = fp.read()

    tokens = []
    pos = 0

    # magic, width, height, maxval; comments start with '#'
    while len(tokens) < 4:
        while pos < len(content) and content[pos:pos + 1].isspace():
            pos += 1
        if content[pos:pos + 1] == b'#':
            while pos < len(content) and content[pos:pos + 1] != b'\n':
                pos += 1
            continue
        start = pos
        while pos < len(content) and not content[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError('Truncated PGM header in {}.'.format(path))
        tokens.append(content[start:pos])

    if tokens[0] != b'P5':
        raise DatasetError('{} is not a binary PGM file.'.format(path))

    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1

    dtype = '>u2' if maxval > 255 else 'u1'
    data = np.frombuffer(content, dtype=dtype, count=width * height, offset=pos)

    return (data.reshape(height, width).astype(np.float64) / maxval).astype(np.float32)


# Line delimited records

def write_jsonl(path, records):
    lines = [json.dumps(record, sort_keys=True) for record in records]
    atomic_write(path, '\n'.join(lines) + ('\n' if lines else ''))


def read_jsonl(path):
    with open(path, 'r', encoding='utf-8') as fp:
        return [json.loads(line) for line in fp if line.strip()]
