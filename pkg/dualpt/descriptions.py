"""Class descriptions from a chat-completion LLM.

Each class name is turned into one query, the answer is split into short
phrases, phrases are cached on disk as JSON and finally encoded into unit
descriptor rows that the distillation loss pulls the prompts towards.
"""
import datetime
import hashlib
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import requests

from dualpt import numerics, schema
from dualpt.alignment import ClassDescriptors
from dualpt.errors import (FetchError, InvalidClassName, InvalidConfig,
                           InvalidDim, MissingDescriptors, ProtocolError,
                           ShapeMismatch)

logger = logging.getLogger(__name__)

QUERY_TEMPLATE = ('Q: What are the useful features for distinguishing a {CLASS} in a photo? '
                  'Please just give me a list of short phrases. Answer: -')
TOKEN_ENV = 'DUALPT_LLM_TOKEN'
LLM_TEMPERATURE = 0.7
DEFAULT_MODEL = 'gpt-3.5-turbo'
DEFAULT_ENDPOINT = 'https://api.openai.com/v1/chat/completions'

# leading "-", "*", "1.", "2)" and similar list markers
_bullet = re.compile(r'^\s*(?:[-*•–]+|\(?\d+[.)](?=\s|$))\s*')
_quotes = '"\'“”‘’'


def build_query(class_name: str) -> str:
    if not isinstance(class_name, str) or not class_name.strip():
        raise InvalidClassName(f'Class name must be a non-empty string, got {class_name!r}')
    return QUERY_TEMPLATE.replace('{CLASS}', class_name)


@dataclass(frozen=True)
class QueryRecord:
    class_name: str
    query: str

    @staticmethod
    def for_class(class_name: str) -> 'QueryRecord':
        return QueryRecord(class_name, build_query(class_name))

    def to_dict(self) -> dict:
        return {'class_name': self.class_name, 'query': self.query}


def parse_phrases(response_text: str) -> List[str]:
    phrases = []
    for line in (response_text or '').splitlines():
        phrase = _bullet.sub('', line, count=1).strip().strip(_quotes).strip()
        if phrase:
            phrases.append(phrase)
    return phrases


# %% phrase cache

def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds')


@dataclass
class DescriptionCache:
    classes: Dict[str, List[str]] = field(default_factory=dict)
    model: str = DEFAULT_MODEL
    temperature: float = LLM_TEMPERATURE
    created: str = ''

    def missing(self, class_names) -> List[str]:
        missing = []
        for name in class_names:
            if name not in self.classes and name not in missing:
                missing.append(name)
        return missing

    def to_dict(self) -> dict:
        return {
            'meta': {'model': self.model, 'temperature': self.temperature, 'created': self.created},
            'classes': {name: list(self.classes[name]) for name in sorted(self.classes)},
        }

    @staticmethod
    def from_dict(doc) -> 'DescriptionCache':
        schema.require(isinstance(doc, dict), '', 'expected an object')
        meta = doc.get('meta', {})
        schema.require(isinstance(meta, dict), '/meta', 'expected an object')
        schema.require(isinstance(meta.get('model', ''), str), '/meta/model', 'expected a string')
        temperature = meta.get('temperature', LLM_TEMPERATURE)
        schema.require(isinstance(temperature, (int, float)) and not isinstance(temperature, bool),
                       '/meta/temperature', 'expected a number')
        classes = doc.get('classes')
        schema.require(isinstance(classes, dict), '/classes', 'expected an object')
        parsed = {}
        for name, phrases in classes.items():
            pointer = f'/classes/{name}'
            schema.require(isinstance(phrases, list), pointer, 'expected a list of phrases')
            for i, phrase in enumerate(phrases):
                schema.require(isinstance(phrase, str) and phrase and phrase == phrase.strip(),
                               f'{pointer}/{i}', 'phrases must be non-empty trimmed strings')
            parsed[name] = list(phrases)
        return DescriptionCache(parsed, meta.get('model', DEFAULT_MODEL), temperature,
                                str(meta.get('created', '')))

    def save(self, path):
        schema.write_json_atomic(path, self.to_dict())

    @staticmethod
    def load(path) -> 'DescriptionCache':
        return DescriptionCache.from_dict(schema.read_json(path))


# %% chat-completion clients

@dataclass(frozen=True)
class ClientConfig:
    endpoint: str = DEFAULT_ENDPOINT
    model: str = DEFAULT_MODEL
    temperature: float = LLM_TEMPERATURE
    token_env: str = TOKEN_ENV
    timeout: float = 60.0
    retries: int = 1
    max_workers: int = 4

    def __post_init__(self):
        if self.temperature < 0:
            raise InvalidConfig(f'temperature must be nonnegative, got {self.temperature}')
        if self.retries < 0 or self.max_workers < 1:
            raise InvalidConfig('retries must be >= 0 and max_workers >= 1')


def extract_content(response, class_name: str) -> str:
    """Text of the first choice of a chat-completion response."""
    try:
        doc = response.json()
    except ValueError:
        raise ProtocolError(f'Response for {class_name!r} is not JSON')
    try:
        content = doc['choices'][0]['message']['content']
    except (KeyError, IndexError, TypeError):
        raise ProtocolError(f'Response for {class_name!r} has no choices[0].message.content')
    if not isinstance(content, str):
        raise ProtocolError(f'Response content for {class_name!r} is not text')
    return content


class ChatClient:
    def __init__(self, config: ClientConfig, session=None, token: Optional[str] = None):
        self.config = config
        self.session = session if session is not None else requests.Session()
        token = token if token is not None else os.environ.get(config.token_env)
        if not token:
            raise InvalidConfig(f'Set {config.token_env} to the API token (or use --mock)')
        self.headers = {'Authorization': f'Bearer {token}'}

    def request_body(self, class_name: str) -> dict:
        return {
            'model': self.config.model,
            'temperature': self.config.temperature,
            'messages': [{'role': 'user', 'content': build_query(class_name)}],
        }

    def describe(self, class_name: str) -> str:
        body = self.request_body(class_name)
        failure = None
        for attempt in range(self.config.retries + 1):
            try:
                response = self.session.post(self.config.endpoint, json=body,
                                             headers=self.headers, timeout=self.config.timeout)
                response.raise_for_status()
                return extract_content(response, class_name)
            except requests.RequestException as e:
                failure = e
                logger.warning('request for %r failed (attempt %d): %s', class_name, attempt + 1, e)
        raise FetchError([class_name], f'Fetching descriptions for {class_name!r} failed: {failure}')


CANNED_RESPONSES = {
    'panda': ('- Black and white fur pattern\n'
              '- Round face with black eye patches\n'
              '- Round body shape with short legs\n'
              '- Distinctive thumb on front paws\n'
              '- Large, furry ears'),
}

_generic_phrases = (
    'overall silhouette of a {name}',
    'characteristic colors of a {name}',
    'typical texture of a {name}',
    'usual surroundings of a {name}',
)


class CannedClient:
    """Offline client serving fixed answers; counts the requests it receives."""

    def __init__(self, responses: Optional[Dict[str, str]] = None):
        self.responses = dict(CANNED_RESPONSES if responses is None else responses)
        self.calls = 0

    def describe(self, class_name: str) -> str:
        build_query(class_name)
        self.calls += 1
        if class_name in self.responses:
            return self.responses[class_name]
        return '\n'.join('- ' + phrase.format(name=class_name) for phrase in _generic_phrases)


def fetch_descriptions(classes, client_config: ClientConfig, cache_path, client=None) -> DescriptionCache:
    """Fill the cache at ``cache_path`` with phrases for every class not yet cached.

    The cache file is only rewritten after every missing class succeeded.
    """
    classes = list(classes)
    for name in classes:
        build_query(name)
    if os.path.exists(cache_path):
        cache = DescriptionCache.load(cache_path)
    else:
        cache = DescriptionCache(model=client_config.model, temperature=client_config.temperature)
    missing = cache.missing(classes)
    logger.info('%d classes cached, %d to fetch', len(classes) - len(missing), len(missing))
    if not missing:
        return cache
    if client is None:
        client = ChatClient(client_config)

    with ThreadPoolExecutor(max_workers=client_config.max_workers) as pool:
        futures = [(name, pool.submit(client.describe, name)) for name in missing]
    answers, failures = {}, []
    for name, future in futures:
        try:
            text = future.result()
        except FetchError:
            failures.append(name)
            continue
        phrases = parse_phrases(text)
        if not phrases:
            raise ProtocolError(f'Response for {name!r} contains no phrases')
        answers[name] = phrases
    if failures:
        raise FetchError(failures, f'Fetching descriptions failed for: {", ".join(failures)}')

    cache.classes.update(answers)
    cache.model = client_config.model
    cache.temperature = client_config.temperature
    cache.created = _now()
    cache.save(cache_path)
    return cache


# %% descriptor embeddings

def mock_encode(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic stand-in text encoder: hashed seed, Gaussian draw, unit norm."""
    if dim < 2:
        raise InvalidDim(f'Embedding dim must be at least 2, got {dim}')
    digest = hashlib.sha256(f'{seed}\x00{text}'.encode('utf-8')).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], 'little'))
    return numerics.l2_normalize(rng.standard_normal(dim))


@dataclass(frozen=True)
class MockEncoder:
    seed: int = 0

    def __call__(self, text: str, dim: int) -> np.ndarray:
        return mock_encode(text, dim, self.seed)


@dataclass
class ClassEmbedding:
    descriptors: np.ndarray
    anchor: Optional[np.ndarray] = None


@dataclass
class EmbeddingStore:
    dim: int
    classes: Dict[str, ClassEmbedding] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidDim(f'Store dim must be positive, got {self.dim}')
        for name, entry in self.classes.items():
            descriptors = np.asarray(entry.descriptors, dtype=np.float64)
            if descriptors.size == 0:
                descriptors = np.zeros((0, self.dim))
            if descriptors.ndim != 2 or descriptors.shape[1] != self.dim:
                raise ShapeMismatch(f'Descriptors of {name!r} do not have dim {self.dim}')
            if descriptors.shape[0]:
                descriptors = numerics.normalize_rows(descriptors)
            entry.descriptors = descriptors
            if entry.anchor is not None:
                anchor = np.asarray(entry.anchor, dtype=np.float64)
                if anchor.shape != (self.dim,):
                    raise ShapeMismatch(f'Anchor of {name!r} does not have dim {self.dim}')
                entry.anchor = numerics.l2_normalize(anchor)

    @property
    def class_names(self) -> List[str]:
        return sorted(self.classes)

    def _entry(self, name: str) -> ClassEmbedding:
        if name not in self.classes:
            raise MissingDescriptors(f'Store has no class {name!r}')
        return self.classes[name]

    def anchors(self, names) -> np.ndarray:
        rows = []
        for name in names:
            anchor = self._entry(name).anchor
            if anchor is None:
                raise InvalidConfig(f'Store has no anchor for class {name!r}')
            rows.append(anchor)
        return np.stack(rows)

    def descriptors(self, names) -> ClassDescriptors:
        blocks = []
        for name in names:
            block = self._entry(name).descriptors
            if block.shape[0] == 0:
                raise MissingDescriptors(f'Class {name!r} has no descriptors')
            blocks.append(block)
        return ClassDescriptors(tuple(blocks))

    def subset(self, names) -> 'EmbeddingStore':
        entries = {}
        for name in names:
            entry = self._entry(name)
            entries[name] = ClassEmbedding(entry.descriptors, entry.anchor)
        return EmbeddingStore(self.dim, entries)

    def to_dict(self) -> dict:
        classes = {}
        for name in self.class_names:
            entry = self.classes[name]
            record = {'descriptors': schema.to_lists(entry.descriptors)}
            if entry.anchor is not None:
                record['anchor'] = schema.to_lists(entry.anchor)
            classes[name] = record
        return {'dim': self.dim, 'classes': classes}

    @staticmethod
    def from_dict(doc) -> 'EmbeddingStore':
        schema.require(isinstance(doc, dict), '', 'expected an object')
        dim = doc.get('dim')
        schema.require(isinstance(dim, int) and not isinstance(dim, bool) and dim >= 1,
                       '/dim', 'expected a positive integer')
        classes = doc.get('classes')
        schema.require(isinstance(classes, dict), '/classes', 'expected an object')
        entries = {}
        for name, record in classes.items():
            pointer = f'/classes/{name}'
            schema.require(isinstance(record, dict), pointer, 'expected an object')
            descriptors = schema.float_matrix(record.get('descriptors'), f'{pointer}/descriptors')
            schema.require(descriptors.shape[1] == dim, f'{pointer}/descriptors/0',
                           f'expected {dim} columns')
            anchor = None
            if 'anchor' in record:
                anchor = schema.float_vector(record['anchor'], f'{pointer}/anchor')
                schema.require(anchor.size == dim, f'{pointer}/anchor', f'expected {dim} entries')
            entries[name] = ClassEmbedding(descriptors, anchor)
        return EmbeddingStore(dim, entries)

    def save(self, path):
        schema.write_json_atomic(path, self.to_dict())

    @staticmethod
    def load(path) -> 'EmbeddingStore':
        return EmbeddingStore.from_dict(schema.read_json(path))


Encoder = Callable[[str, int], np.ndarray]


def embed_descriptions(cache: DescriptionCache, encoder: Encoder, dim: int) -> EmbeddingStore:
    """Encode each cached phrase into a descriptor row and each class name into its anchor."""
    classes = {}
    for name in sorted(cache.classes):
        phrases = cache.classes[name]
        if not phrases:
            raise MissingDescriptors(f'Class {name!r} has no phrases to embed')
        descriptors = np.stack([encoder(phrase, dim) for phrase in phrases])
        classes[name] = ClassEmbedding(descriptors, encoder(name, dim))
    logger.info('embedded %d phrases for %d classes',
                sum(len(p) for p in cache.classes.values()), len(classes))
    return EmbeddingStore(dim, classes)
