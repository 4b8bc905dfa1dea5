"""Synthetic few-shot benchmark: data generation, prompt training, evaluation and ablations.

Images are replaced by part-structured token blocks: every class owns a few
unit prototype vectors ("parts"), each image's N local tokens are noisy copies
of its class parts mixed with background prototypes shared by all classes,
and the class descriptors are noisy copies of the parts. The class anchor is
the normalized mean of the parts.
"""
import csv
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score
from tabulate import tabulate

from dualpt import alignment, numerics, schema, transport
from dualpt.alignment import (AlignmentMode, Batch, ContextBank, DistillMode,
                              LossBreakdown, ObjectiveConfig)
from dualpt.descriptions import ClassEmbedding, EmbeddingStore
from dualpt.errors import (DegenerateMetric, InvalidConfig, InvalidEpoch,
                           InvalidSplit, NumericalError, SchemaError,
                           ShapeMismatch)

logger = logging.getLogger(__name__)

DEFAULT_LR = 0.002
INIT_STD = 0.02
# maximum epoch per shot count
EPOCH_SCHEDULE = {1: 50, 2: 100, 4: 100, 8: 200, 16: 200}
BASE_TO_NEW_EPOCHS = 10
BASE_TO_NEW_SHOTS = 16
SPLITS = ('train', 'test')
ABLATION_COLUMNS = ('distill', 'align', 'alpha', 'beta', 'M', 'shots', 'seed', 'accuracy')


# %% data

@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 10
    parts_per_class: int = 4
    num_tokens: int = 49
    dim: int = 32
    noise_sigma: float = 0.1
    descriptor_noise: float = 0.1
    shots: Tuple[int, ...] = (1, 2, 4, 8, 16)
    test_per_class: int = 20
    num_background: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'shots', tuple(sorted(set(int(s) for s in self.shots))))
        if min(self.num_classes, self.parts_per_class, self.test_per_class) < 1:
            raise InvalidConfig('Class, part and test counts must be at least 1')
        if self.num_tokens < self.parts_per_class:
            raise InvalidConfig(f'Need at least {self.parts_per_class} tokens per image')
        if self.dim < 2:
            raise InvalidConfig(f'dim must be at least 2, got {self.dim}')
        if self.noise_sigma < 0 or self.descriptor_noise < 0 or self.num_background < 0:
            raise InvalidConfig('Noise levels and background count must be nonnegative')
        if not self.shots or self.shots[0] < 1:
            raise InvalidConfig('Shot counts must be positive')

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc['shots'] = list(self.shots)
        return doc

    @staticmethod
    def from_dict(doc) -> 'SyntheticConfig':
        return SyntheticConfig(**doc)


@dataclass(frozen=True)
class Sample:
    tokens: np.ndarray
    global_feature: np.ndarray
    label: int
    split: str = 'train'

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidSplit(f'Unknown split {self.split!r}')
        if int(self.label) < 0:
            raise InvalidConfig(f'Labels must be nonnegative, got {self.label}')

    def to_dict(self) -> dict:
        return {'label': int(self.label), 'tokens': schema.to_lists(self.tokens),
                'global': schema.to_lists(self.global_feature), 'split': self.split}

    @staticmethod
    def from_dict(doc, pointer: str = '') -> 'Sample':
        schema.require(isinstance(doc, dict), pointer, 'expected an object')
        label = doc.get('label')
        schema.require(isinstance(label, int) and not isinstance(label, bool) and label >= 0,
                       f'{pointer}/label', 'expected a nonnegative integer')
        tokens = schema.float_matrix(doc.get('tokens'), f'{pointer}/tokens')
        global_feature = schema.float_vector(doc.get('global'), f'{pointer}/global')
        schema.require(global_feature.size == tokens.shape[1], f'{pointer}/global',
                       f'expected {tokens.shape[1]} entries')
        schema.require(doc.get('split') in SPLITS, f'{pointer}/split', 'expected "train" or "test"')
        return Sample(tokens, global_feature, label, doc['split'])


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    class_names: List[str]
    train: Dict[int, List[Sample]]
    test: List[Sample]
    store: EmbeddingStore


def class_names_for(num_classes: int) -> List[str]:
    width = max(2, len(str(num_classes - 1)))
    return [f'class_{k:0{width}d}' for k in range(num_classes)]


def generate_synthetic(config: SyntheticConfig) -> SyntheticDataset:
    rng = np.random.default_rng(config.seed)
    K, P, N, d = config.num_classes, config.parts_per_class, config.num_tokens, config.dim
    prototypes = numerics.normalize_rows(rng.standard_normal((K, P, d)))
    background = np.zeros((0, d))
    if config.num_background:
        background = numerics.normalize_rows(rng.standard_normal((config.num_background, d)))
    descriptors = numerics.normalize_rows(
        prototypes + config.descriptor_noise * rng.standard_normal((K, P, d)))
    anchors = numerics.normalize_rows(prototypes.mean(axis=1))

    def draw(label: int, split: str) -> Sample:
        pool = np.concatenate([prototypes[label], background])
        slots = pool[np.arange(N) % len(pool)][rng.permutation(N)]
        tokens = numerics.normalize_rows(slots + config.noise_sigma * rng.standard_normal((N, d)))
        return Sample(tokens, numerics.l2_normalize(tokens.mean(axis=0)), label, split)

    most = max(config.shots)
    pools = [[draw(k, 'train') for _ in range(most)] for k in range(K)]
    # smaller shot splits are prefixes of the larger ones
    train = {s: [sample for k in range(K) for sample in pools[k][:s]] for s in config.shots}
    test = [draw(k, 'test') for k in range(K) for _ in range(config.test_per_class)]
    names = class_names_for(K)
    store = EmbeddingStore(d, {name: ClassEmbedding(descriptors[k], anchors[k])
                               for k, name in enumerate(names)})
    return SyntheticDataset(config, names, train, test, store)


def write_samples(path, samples: Sequence[Sample]):
    lines = [json.dumps(sample.to_dict(), sort_keys=True) for sample in samples]
    schema.write_text_atomic(path, ''.join(line + '\n' for line in lines))


def read_samples(path) -> List[Sample]:
    samples = []
    with open(path, 'r', encoding='utf-8') as file:
        for lineno, line in enumerate(file):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f'/{lineno}', f'invalid JSON ({e.msg})')
            samples.append(Sample.from_dict(doc, f'/{lineno}'))
    return samples


def save_dataset(directory, dataset: SyntheticDataset):
    """Layout: synth.json, embeddings.json, test.jsonl and one train_<shots>.jsonl per shot count."""
    os.makedirs(directory, exist_ok=True)
    schema.write_json_atomic(os.path.join(directory, 'synth.json'),
                             {'config': dataset.config.to_dict(), 'classes': dataset.class_names})
    dataset.store.save(os.path.join(directory, 'embeddings.json'))
    write_samples(os.path.join(directory, 'test.jsonl'), dataset.test)
    for shots, samples in dataset.train.items():
        write_samples(os.path.join(directory, f'train_{shots}.jsonl'), samples)


def load_dataset(directory) -> SyntheticDataset:
    doc = schema.read_json(os.path.join(directory, 'synth.json'))
    schema.require(isinstance(doc, dict) and isinstance(doc.get('config'), dict),
                   '/config', 'expected an object')
    try:
        config = SyntheticConfig.from_dict(doc['config'])
    except TypeError as e:
        raise SchemaError('/config', str(e))
    names = doc.get('classes')
    schema.require(isinstance(names, list) and len(names) == config.num_classes,
                   '/classes', f'expected {config.num_classes} class names')
    store = EmbeddingStore.load(os.path.join(directory, 'embeddings.json'))
    train = {s: read_samples(os.path.join(directory, f'train_{s}.jsonl')) for s in config.shots}
    test = read_samples(os.path.join(directory, 'test.jsonl'))
    return SyntheticDataset(config, names, train, test, store)


def select_classes(samples: Sequence[Sample], class_names: Sequence[str],
                   chosen: Sequence[str]) -> List[Sample]:
    """Keep samples of the chosen classes, relabelled by position in ``chosen``."""
    index = {name: i for i, name in enumerate(class_names)}
    relabel = {index[name]: i for i, name in enumerate(chosen)}
    return [replace(s, label=relabel[s.label]) for s in samples if s.label in relabel]


def infer_shots(samples: Sequence[Sample]) -> int:
    counts = np.bincount([s.label for s in samples])
    return int(counts[counts > 0].min())


# %% training

def cosine_annealing_lr(t: float, T_max: float, lr0: float = DEFAULT_LR) -> float:
    if t < 0 or t > T_max:
        raise InvalidEpoch(f'Epoch {t} outside [0, {T_max}]')
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / T_max))


def epochs_for_shots(shots: int) -> int:
    if shots < 1:
        raise InvalidConfig(f'Shot count must be positive, got {shots}')
    return EPOCH_SCHEDULE[max(s for s in EPOCH_SCHEDULE if s <= shots)]


@dataclass(frozen=True)
class TrainConfig:
    shots: int = 16
    epochs: Optional[int] = None
    lr0: float = DEFAULT_LR
    beta: float = alignment.DEFAULT_BETA
    alpha: float = transport.DEFAULT_ALPHA
    lam: float = transport.DEFAULT_LAMBDA
    num_prompts: int = alignment.DEFAULT_NUM_PROMPTS
    tau: float = alignment.DEFAULT_TAU
    attn_tau: float = alignment.DEFAULT_ATTN_TAU
    distill_mode: DistillMode = DistillMode.COSINE
    align_mode: AlignmentMode = AlignmentMode.GRAPH
    batch_size: int = 32
    seed: int = 0
    inner_max: int = 100
    outer_max: int = 10
    init_std: float = INIT_STD

    def __post_init__(self):
        object.__setattr__(self, 'distill_mode', DistillMode(self.distill_mode))
        object.__setattr__(self, 'align_mode', AlignmentMode(self.align_mode))
        if not self.lr0 > 0:
            raise InvalidConfig(f'lr0 must be positive, got {self.lr0}')
        if self.epochs is not None and self.epochs < 1:
            raise InvalidConfig(f'epochs must be at least 1, got {self.epochs}')
        if self.batch_size < 1 or self.num_prompts < 1 or self.shots < 1:
            raise InvalidConfig('batch_size, num_prompts and shots must be at least 1')
        if self.init_std < 0:
            raise InvalidConfig('init_std must be nonnegative')
        self.objective()

    @property
    def resolved_epochs(self) -> int:
        return self.epochs if self.epochs is not None else epochs_for_shots(self.shots)

    def sinkhorn(self) -> transport.SinkhornConfig:
        return transport.SinkhornConfig(lam=self.lam, inner_max=self.inner_max,
                                        outer_max=self.outer_max, alpha=self.alpha)

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(sinkhorn=self.sinkhorn(), beta=self.beta, tau=self.tau,
                               attn_tau=self.attn_tau, distill_mode=self.distill_mode,
                               align_mode=self.align_mode)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc['distill_mode'] = self.distill_mode.value
        doc['align_mode'] = self.align_mode.value
        doc['epochs'] = self.resolved_epochs
        return doc

    @staticmethod
    def from_dict(doc) -> 'TrainConfig':
        return TrainConfig(**doc)


@dataclass
class TrainResult:
    bank: ContextBank
    history: List[LossBreakdown]
    config: TrainConfig
    class_names: List[str] = field(default_factory=list)


def train(samples: Sequence[Sample], store: EmbeddingStore, config: TrainConfig,
          class_names: Optional[Sequence[str]] = None) -> TrainResult:
    """SGD on the shared context with a cosine-annealed learning rate."""
    samples = list(samples)
    if not samples:
        raise InvalidConfig('No training samples')
    if any(s.split != 'train' for s in samples):
        raise InvalidSplit('Training samples must come from the train split')
    names = list(class_names) if class_names is not None else store.class_names
    descriptors = None
    if config.distill_mode is not DistillMode.NONE:
        descriptors = store.descriptors(names)

    rng = np.random.default_rng(config.seed)
    context = rng.normal(0.0, config.init_std, (config.num_prompts, store.dim))
    bank = ContextBank(context, store.anchors(names))
    batch = Batch.of(samples)
    objective = config.objective()
    epochs = config.resolved_epochs
    history = []
    for epoch in range(epochs):
        lr = cosine_annealing_lr(epoch, epochs, config.lr0)
        order = rng.permutation(len(batch))
        sums = np.zeros(2)
        for start in range(0, len(batch), config.batch_size):
            minibatch = batch.subset(order[start:start + config.batch_size])
            breakdown, grad = alignment.loss_and_gradient(minibatch, bank, descriptors, objective)
            if not (math.isfinite(breakdown.total) and np.all(np.isfinite(grad))):
                raise NumericalError(f'Non-finite loss at epoch {epoch}')
            sums += len(minibatch) * np.array([breakdown.l_llm, breakdown.l_img])
            context = context - lr * grad
            bank = bank.with_context(context)
        record = LossBreakdown.combine(sums[0] / len(batch), sums[1] / len(batch), config.beta)
        history.append(record)
        logger.info('epoch %d/%d lr %.5f loss %.5f (llm %.5f, img %.5f)',
                    epoch + 1, epochs, lr, record.total, record.l_llm, record.l_img)
    return TrainResult(bank, history, config, names)


def save_bank(path, bank: ContextBank, class_names: Sequence[str], config: Optional[TrainConfig] = None):
    doc = {'classes': list(class_names), 'context': schema.to_lists(bank.context),
           'anchors': schema.to_lists(bank.anchors)}
    if config is not None:
        doc['config'] = config.to_dict()
    schema.write_json_atomic(path, doc)


def load_bank(path):
    """Returns (bank, class names, train config or None)."""
    doc = schema.read_json(path)
    schema.require(isinstance(doc, dict), '', 'expected an object')
    names = doc.get('classes')
    schema.require(isinstance(names, list) and all(isinstance(n, str) for n in names),
                   '/classes', 'expected a list of class names')
    context = schema.float_matrix(doc.get('context'), '/context')
    anchors = schema.float_matrix(doc.get('anchors'), '/anchors')
    schema.require(anchors.shape[0] == len(names), '/anchors', f'expected {len(names)} rows')
    schema.require(anchors.shape[1] == context.shape[1], '/anchors/0',
                   f'expected {context.shape[1]} columns')
    config = None
    if 'config' in doc:
        schema.require(isinstance(doc['config'], dict), '/config', 'expected an object')
        try:
            config = TrainConfig.from_dict(doc['config'])
        except TypeError as e:
            raise SchemaError('/config', str(e))
    return ContextBank(context, anchors), names, config


# %% evaluation

@dataclass
class EvalReport:
    protocol: str
    config: dict
    seed: int
    num_test: int
    accuracy: Optional[float] = None
    base_accuracy: Optional[float] = None
    new_accuracy: Optional[float] = None
    harmonic: Optional[float] = None
    wall_time: float = 0.0

    def to_dict(self, include_wall_time: bool = True) -> dict:
        doc = asdict(self)
        if not include_wall_time:
            del doc['wall_time']
        return doc

    def save(self, path):
        schema.write_json_atomic(path, self.to_dict())

    def table(self) -> str:
        rows = [(key, value) for key, value in self.to_dict().items() if key != 'config']
        return tabulate(rows, tablefmt='plain', floatfmt='.2f')


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    # argmax picks the lowest class index on ties
    return 100.0 * float(accuracy_score(labels, np.argmax(probs, axis=1)))


def _check_test_labels(batch: Batch, num_classes: int):
    if np.any(batch.labels >= num_classes):
        raise ShapeMismatch(f'Test labels exceed the {num_classes} classes of the bank')


def evaluate_fewshot(bank: ContextBank, test: Sequence[Sample], config: TrainConfig) -> EvalReport:
    start = time.perf_counter()
    batch = Batch.of(test)
    _check_test_labels(batch, bank.num_classes)
    probs = alignment.predict_batch(batch.tokens, bank, config.sinkhorn(), config.align_mode,
                                    config.tau, config.attn_tau)
    return EvalReport('fewshot', config.to_dict(), config.seed, len(batch),
                      accuracy=_accuracy(probs, batch.labels),
                      wall_time=time.perf_counter() - start)


def evaluate_zeroshot(anchors, test: Sequence[Sample], tau: float = alignment.DEFAULT_TAU) -> EvalReport:
    """Anchor-only prediction from the global feature, no learned context."""
    start = time.perf_counter()
    batch = Batch.of(test)
    anchors = numerics.normalize_rows(numerics.as_matrix(anchors))
    _check_test_labels(batch, anchors.shape[0])
    probs = numerics.softmax_rows(batch.global_features @ anchors.T, tau)
    return EvalReport('zeroshot', {'tau': tau}, 0, len(batch),
                      accuracy=_accuracy(probs, batch.labels),
                      wall_time=time.perf_counter() - start)


def harmonic_mean(base: float, new: float) -> float:
    if base < 0 or new < 0:
        raise DegenerateMetric(f'Accuracies must be nonnegative, got {base}, {new}')
    if base + new == 0:
        raise DegenerateMetric('Harmonic mean of two zero accuracies is undefined')
    return 2.0 * base * new / (base + new)


def base_to_new_split(class_names: Sequence[str]):
    names = sorted(class_names)
    if len(names) < 2:
        raise InvalidConfig('Base-to-new needs at least 2 classes')
    cut = math.ceil(len(names) / 2)
    return names[:cut], names[cut:]


def evaluate_base_to_new(context, base_anchors, new_anchors, base_test: Sequence[Sample],
                         new_test: Sequence[Sample], config: TrainConfig) -> EvalReport:
    """New-class prompts reuse the learned context with the new anchors only."""
    start = time.perf_counter()
    base = evaluate_fewshot(ContextBank(context, base_anchors), base_test, config)
    new = evaluate_fewshot(ContextBank(context, new_anchors), new_test, config)
    return EvalReport('base_to_new', config.to_dict(), config.seed, base.num_test + new.num_test,
                      base_accuracy=base.accuracy, new_accuracy=new.accuracy,
                      harmonic=harmonic_mean(base.accuracy, new.accuracy),
                      wall_time=time.perf_counter() - start)


def run_fewshot(dataset: SyntheticDataset, config: TrainConfig):
    if config.shots not in dataset.train:
        raise InvalidConfig(f'Dataset has no {config.shots}-shot split')
    result = train(dataset.train[config.shots], dataset.store, config, dataset.class_names)
    return result, evaluate_fewshot(result.bank, dataset.test, config)


def run_base_to_new(dataset: SyntheticDataset, config: TrainConfig):
    if config.epochs is None:
        config = replace(config, epochs=BASE_TO_NEW_EPOCHS)
    if config.shots not in dataset.train:
        raise InvalidConfig(f'Dataset has no {config.shots}-shot split')
    base, new = base_to_new_split(dataset.class_names)
    names = dataset.class_names
    result = train(select_classes(dataset.train[config.shots], names, base),
                   dataset.store, config, base)
    report = evaluate_base_to_new(
        result.bank.context, dataset.store.anchors(base), dataset.store.anchors(new),
        select_classes(dataset.test, names, base), select_classes(dataset.test, names, new), config)
    return result, report


# %% ablations

@dataclass(frozen=True)
class AblationGrid:
    distill_modes: Tuple[DistillMode, ...] = (DistillMode.COSINE,)
    align_modes: Tuple[AlignmentMode, ...] = (AlignmentMode.GRAPH,)
    alphas: Tuple[float, ...] = (transport.DEFAULT_ALPHA,)
    betas: Tuple[float, ...] = (alignment.DEFAULT_BETA,)
    num_prompts: Tuple[int, ...] = (alignment.DEFAULT_NUM_PROMPTS,)
    shots: Tuple[int, ...] = (1,)
    seeds: Tuple[int, ...] = (0,)

    def __post_init__(self):
        object.__setattr__(self, 'distill_modes', tuple(DistillMode(m) for m in self.distill_modes))
        object.__setattr__(self, 'align_modes', tuple(AlignmentMode(m) for m in self.align_modes))
        for name in ('distill_modes', 'align_modes', 'alphas', 'betas', 'num_prompts', 'shots', 'seeds'):
            if not getattr(self, name):
                raise InvalidConfig(f'Ablation axis {name} is empty')

    def cells(self):
        return itertools.product(self.distill_modes, self.align_modes, self.alphas,
                                 self.betas, self.num_prompts, self.shots, self.seeds)

    @property
    def size(self) -> int:
        return math.prod(len(getattr(self, name)) for name in
                         ('distill_modes', 'align_modes', 'alphas', 'betas',
                          'num_prompts', 'shots', 'seeds'))


def ablate(grid: AblationGrid, base_config: TrainConfig, dataset: SyntheticDataset,
           workers: int = 1) -> List[dict]:
    """Train and evaluate every grid cell; rows come back in grid order."""
    missing = sorted(set(grid.shots) - set(dataset.train))
    if missing:
        raise InvalidConfig(f'Dataset has no split for shots {missing}')

    def run(cell) -> dict:
        distill, align, alpha, beta, M, shots, seed = cell
        config = replace(base_config, distill_mode=distill, align_mode=align, alpha=alpha,
                         beta=beta, num_prompts=M, shots=shots, seed=seed)
        _, report = run_fewshot(dataset, config)
        logger.info('ablation cell %s/%s alpha=%g beta=%g M=%d shots=%d seed=%d: %.2f',
                    distill.value, align.value, alpha, beta, M, shots, seed, report.accuracy)
        effective = alignment.sinkhorn_for_mode(config.sinkhorn(), align).alpha
        return {'distill': distill.value, 'align': align.value, 'alpha': effective, 'beta': beta,
                'M': M, 'shots': shots, 'seed': seed, 'accuracy': report.accuracy}

    cells = list(grid.cells())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, cells))
    return [run(cell) for cell in cells]


def write_ablation_csv(path, rows: Sequence[dict]):
    with open(path, 'w', newline='', encoding='utf-8') as file:
        writer = csv.DictWriter(file, fieldnames=ABLATION_COLUMNS, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, 'accuracy': f'{row["accuracy"]:.4f}'})


def ablation_table(rows: Sequence[dict]) -> str:
    return tabulate(rows, headers='keys', floatfmt='.2f')
