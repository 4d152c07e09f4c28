import csv
import io
import json
import logging
import os
import tempfile

logger = logging.getLogger(__name__)


def atomic_write_bytes(payload, outfile):
    # Write to a sibling temp file, then rename over the target
    folder = os.path.dirname(os.path.abspath(outfile))
    os.makedirs(folder, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', dir=folder)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp_path, outfile)
    except BaseException:
        logger.error('Failed to save: %s', outfile)
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return


def dumps_json(data, sort_keys=True):
    return json.dumps(data, ensure_ascii=False, indent=4, sort_keys=sort_keys) + '\n'


def pretty_write_json(data, outfile, sort_keys=True):
    atomic_write_bytes(dumps_json(data, sort_keys).encode('utf-8'), outfile)
    return


def read_json(infile):
    with open(infile, encoding='utf-8') as f:
        return json.load(f)


def format_float(value):
    # 6 significant digits, locale independent
    return format(float(value), '.6g')


def write_csv(outfile, header, rows, config_hash):
    buffer = io.StringIO()
    buffer.write('# config_hash=%s\n' % config_hash)
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    atomic_write_bytes(buffer.getvalue().encode('utf-8'), outfile)
    return


def read_csv(infile):
    # Returns (config_hash, header, rows) with values as strings
    with open(infile, encoding='utf-8', newline='') as f:
        first = f.readline().strip()
        config_hash = first.split('=', 1)[1] if first.startswith('# config_hash=') else None
        reader = csv.reader(f)
        rows = list(reader)
    return config_hash, rows[0] if rows else [], rows[1:]
