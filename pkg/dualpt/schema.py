"""JSON file helpers: validated reads with JSON-pointer errors and atomic writes."""
import json
import os
import tempfile

import numpy as np

from dualpt.errors import SchemaError


def require(condition: bool, pointer: str, message: str):
    if not condition:
        raise SchemaError(pointer, message)


def read_json(path):
    try:
        with open(path, 'r', encoding='utf-8') as file:
            return json.load(file)
    except json.JSONDecodeError as e:
        raise SchemaError('/', f'{path} is not valid JSON ({e.msg} at line {e.lineno})')


def dumps(doc) -> str:
    return json.dumps(doc, ensure_ascii=False, indent=2, sort_keys=True) + '\n'


def write_json_atomic(path, doc):
    """Write ``doc`` next to ``path`` and rename it into place."""
    write_text_atomic(path, dumps(doc))


def write_text_atomic(path, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix='.json')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as file:
            file.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def float_vector(value, pointer: str) -> np.ndarray:
    require(isinstance(value, list) and value, pointer, 'expected a non-empty list of numbers')
    for i, entry in enumerate(value):
        require(_is_number(entry), f'{pointer}/{i}', 'expected a number')
    vector = np.asarray(value, dtype=np.float64)
    require(bool(np.all(np.isfinite(vector))), pointer, 'entries must be finite')
    return vector


def float_matrix(value, pointer: str) -> np.ndarray:
    require(isinstance(value, list) and value, pointer, 'expected a non-empty list of rows')
    rows = [float_vector(row, f'{pointer}/{i}') for i, row in enumerate(value)]
    for i, row in enumerate(rows):
        require(row.size == rows[0].size, f'{pointer}/{i}',
                f'expected {rows[0].size} columns, got {row.size}')
    return np.stack(rows)


def to_lists(array) -> list:
    return np.asarray(array, dtype=np.float64).tolist()
