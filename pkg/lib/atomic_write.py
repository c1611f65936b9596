"""Atomic file write utilities.

Result files are never half-written: data goes to a temp file in the target
directory, then os.replace() swaps it in.
"""

import json
import os
import tempfile


def _atomic_write(path, text, suffix):
    dir_path = os.path.dirname(path) or '.'
    os.makedirs(dir_path, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(suffix=suffix, dir=dir_path)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        os.replace(tmp_path, path)
    except Exception:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise


def atomic_text_write(path, text):
    """Write *text* to *path* atomically. The original file survives a failed write."""
    _atomic_write(path, text, '.tmp')


def atomic_json_write(path, data, indent=2):
    """Write JSON atomically with sorted keys and a trailing newline.

    Floats keep full double precision (json uses repr), so equal data always
    produces byte-identical files.
    """
    text = json.dumps(data, indent=indent, sort_keys=True, allow_nan=False) + '\n'
    _atomic_write(path, text, '.json')
