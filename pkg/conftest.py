import json
import os
import sys

import pytest

ROOT = os.path.dirname(os.path.abspath(__file__))
GOLDEN_DIR = os.path.join(ROOT, 'tests', 'golden')
sys.path.insert(0, ROOT)


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the full-length training regressions')
    parser.addoption('--update-golden', action='store_true', default=False,
                     help='record tests/golden values instead of comparing against them')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: full-length training run, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


class Golden:
    """Locked regression values under tests/golden, recorded only with --update-golden."""

    def __init__(self, name: str, update: bool = False, directory: str = GOLDEN_DIR):
        self.directory = directory
        self.path = os.path.join(directory, f'{name}.json')
        self.update = update

    def check(self, values: dict, compare):
        if not os.path.exists(self.path) and not self.update:
            pytest.skip(f'no locked values in {os.path.relpath(self.path, ROOT)}, '
                        'record them with --update-golden')
        if self.update:
            os.makedirs(self.directory, exist_ok=True)
            with open(self.path, 'w', encoding='utf-8') as file:
                json.dump(values, file, indent=2, sort_keys=True)
                file.write('\n')
            return values
        with open(self.path, 'r', encoding='utf-8') as file:
            locked = json.load(file)
        compare(locked, values)
        return locked


@pytest.fixture
def golden(request):
    name = request.node.name.replace('[', '_').replace(']', '')
    return Golden(name, update=request.config.getoption('--update-golden'))


@pytest.fixture
def data_dir():
    return os.path.join(ROOT, 'tests', 'data')
