"""Command line front door.

    python -m dualpt.cli synth --out data
    python -m dualpt.cli train --train data/train_16.jsonl --embeddings data/embeddings.json --out run/bank.json
    python -m dualpt.cli eval --bank run/bank.json --test data/test.jsonl --out run/report.json

Every command that writes files first writes a manifest next to its outputs;
``rerun <manifest>`` replays it. Exit codes: 0 success, 2 usage or schema
error, 3 external service error, 4 numerical failure.
"""
import argparse
import contextlib
import datetime
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import List, Optional

from dualpt import descriptions, harness, schema, transport
from dualpt.alignment import AlignmentMode, DistillMode
from dualpt.errors import DualPTError, InvalidConfig, OutputLocked

logger = logging.getLogger(__name__)

TOOL_VERSION = '0.1.0'
LOCK_NAME = '.dualpt.lock'


# %% manifests and locks

@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: dict
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    seed: Optional[int] = None
    tool_version: str = TOOL_VERSION
    created: str = ''
    cwd: str = ''

    def save(self, path):
        schema.write_json_atomic(path, asdict(self))

    @staticmethod
    def load(path) -> 'RunManifest':
        doc = schema.read_json(path)
        schema.require(isinstance(doc, dict), '', 'expected an object')
        argv = doc.get('argv')
        schema.require(isinstance(argv, list) and argv and all(isinstance(a, str) for a in argv),
                       '/argv', 'expected a non-empty list of strings')
        schema.require(isinstance(doc.get('command'), str), '/command', 'expected a string')
        return RunManifest(doc['command'], argv, doc.get('config') or {},
                           list(doc.get('inputs', [])), list(doc.get('outputs', [])),
                           doc.get('seed'), doc.get('tool_version', TOOL_VERSION),
                           doc.get('created', ''), doc.get('cwd', ''))


def manifest_path(output: str) -> str:
    if os.path.isdir(output):
        return os.path.join(output, 'manifest.json')
    return output + '.manifest.json'


@contextlib.contextmanager
def output_lock(directory: str):
    os.makedirs(directory, exist_ok=True)
    lock = os.path.join(directory, LOCK_NAME)
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLocked(f'{directory} is used by another run (remove {lock} if it is stale)')
    try:
        os.write(fd, str(os.getpid()).encode('ascii'))
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds')


def _start(args, config: dict, inputs, output: str, seed=None):
    """Write the manifest for ``output`` before the command starts computing."""
    manifest = RunManifest(args.command, list(args.argv), config,
                           [os.path.abspath(p) for p in inputs], [os.path.abspath(output)],
                           seed, created=_now(), cwd=os.getcwd())
    manifest.save(manifest_path(output))


def _directory_of(output: str) -> str:
    return os.path.dirname(os.path.abspath(output))


# %% input helpers

def read_class_list(path) -> List[str]:
    try:
        with open(path, 'r', encoding='utf-8') as file:
            names = [line.strip() for line in file]
    except OSError as e:
        raise InvalidConfig(f'Cannot read class list {path}: {e.strerror}')
    names = [name for name in names if name]
    if not names:
        raise InvalidConfig(f'{path}: no classes')
    return names


def _require_file(path):
    if not os.path.isfile(path):
        raise InvalidConfig(f'No such file: {path}')
    return path


def _train_config(args, shots: int, **grid_values) -> harness.TrainConfig:
    """Scalar training config; ``grid_values`` replaces flags that take a list under ablate."""
    fields = dict(beta=args.beta, alpha=args.alpha, num_prompts=args.m, distill_mode=args.distill,
                  align_mode=args.align, seed=args.seed)
    fields.update(grid_values)
    return harness.TrainConfig(
        shots=shots, epochs=args.epochs, lr0=args.lr, lam=args.lam, tau=args.tau,
        attn_tau=args.attn_tau, batch_size=args.batch_size, inner_max=args.inner_max,
        outer_max=args.outer_max, **fields)


# %% commands

def cmd_gen_queries(args) -> int:
    names = read_class_list(args.classes)
    records = [descriptions.QueryRecord.for_class(name).to_dict() for name in names]
    with output_lock(_directory_of(args.out)):
        _start(args, {'template': descriptions.QUERY_TEMPLATE}, [args.classes], args.out)
        schema.write_json_atomic(args.out, records)
    print(f'{len(records)} queries written to {args.out}')
    return 0


def cmd_fetch(args) -> int:
    names = read_class_list(args.classes)
    config = descriptions.ClientConfig(endpoint=args.endpoint, model=args.model,
                                       temperature=args.temperature, retries=args.retries,
                                       max_workers=args.workers)
    with output_lock(_directory_of(args.cache)):
        _start(args, {**asdict(config), 'mock': args.mock}, [args.classes], args.cache)
        cached = []
        if os.path.exists(args.cache):
            cached = descriptions.DescriptionCache.load(args.cache).classes
        missing = [name for name in dict.fromkeys(names) if name not in cached]
        client = descriptions.CannedClient() if args.mock else None
        descriptions.fetch_descriptions(names, config, args.cache, client=client)
    print(f'{len(missing)} fetched, {len(set(names)) - len(missing)} cached')
    return 0


def cmd_embed(args) -> int:
    cache = descriptions.DescriptionCache.load(_require_file(args.cache))
    with output_lock(_directory_of(args.out)):
        _start(args, {'dim': args.dim, 'encoder': 'mock', 'seed': args.seed},
               [args.cache], args.out, args.seed)
        store = descriptions.embed_descriptions(cache, descriptions.MockEncoder(args.seed), args.dim)
        store.save(args.out)
    print(f'{len(store.classes)} classes embedded to {args.out}')
    return 0


def cmd_synth(args) -> int:
    config = harness.SyntheticConfig(
        num_classes=args.classes, parts_per_class=args.parts, num_tokens=args.tokens,
        dim=args.dim, noise_sigma=args.noise, descriptor_noise=args.descriptor_noise,
        shots=tuple(args.shots), test_per_class=args.test_per_class,
        num_background=args.background, seed=args.seed)
    with output_lock(os.path.abspath(args.out)):
        _start(args, config.to_dict(), [], args.out, args.seed)
        harness.save_dataset(args.out, harness.generate_synthetic(config))
    print(f'synthetic dataset with {config.num_classes} classes written to {args.out}')
    return 0


def cmd_train(args) -> int:
    samples = harness.read_samples(_require_file(args.train))
    store = descriptions.EmbeddingStore.load(_require_file(args.embeddings))
    names = store.class_names
    if args.subset == 'base':
        base, _ = harness.base_to_new_split(names)
        samples = harness.select_classes(samples, names, base)
        names = base
    shots = args.shots if args.shots is not None else harness.infer_shots(samples)
    config = _train_config(args, shots)
    with output_lock(_directory_of(args.out)):
        _start(args, config.to_dict(), [args.train, args.embeddings], args.out, args.seed)
        result = harness.train(samples, store, config, names)
        harness.save_bank(args.out, result.bank, names, config)
    last = result.history[-1]
    print(f'trained {len(result.history)} epochs on {len(samples)} samples: '
          f'loss {last.total:.5f} (llm {last.l_llm:.5f}, img {last.l_img:.5f})')
    return 0


def cmd_eval(args) -> int:
    bank, names, config = harness.load_bank(_require_file(args.bank))
    config = config or harness.TrainConfig()
    test = harness.read_samples(_require_file(args.test))
    inputs = [args.bank, args.test]
    if args.protocol == 'base-to-new':
        if args.embeddings is None:
            raise InvalidConfig('--embeddings is required for the base-to-new protocol')
        inputs.append(args.embeddings)
    with output_lock(_directory_of(args.out)):
        _start(args, config.to_dict(), inputs, args.out, config.seed)
        if args.protocol == 'fewshot':
            report = harness.evaluate_fewshot(bank, test, config)
        elif args.protocol == 'zeroshot':
            report = harness.evaluate_zeroshot(bank.anchors, test, config.tau)
        else:
            store = descriptions.EmbeddingStore.load(_require_file(args.embeddings))
            all_names = store.class_names
            base, new = harness.base_to_new_split(all_names)
            report = harness.evaluate_base_to_new(
                bank.context, store.anchors(base), store.anchors(new),
                harness.select_classes(test, all_names, base),
                harness.select_classes(test, all_names, new), config)
        report.save(args.out)
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    dataset = harness.load_dataset(args.data)
    aligns = [AlignmentMode(a) for a in args.align]
    if args.alpha is not None:
        for mode in aligns:
            if mode in (AlignmentMode.NODE, AlignmentMode.EDGE):
                logger.warning('%s mode ignores alpha', mode.value)
    grid = harness.AblationGrid(
        distill_modes=tuple(args.distill), align_modes=tuple(aligns),
        alphas=tuple(args.alpha or [transport.DEFAULT_ALPHA]), betas=tuple(args.beta),
        num_prompts=tuple(args.m), shots=tuple(args.shots), seeds=tuple(args.seeds))
    base = _train_config(args, grid.shots[0], beta=grid.betas[0], alpha=grid.alphas[0],
                         num_prompts=grid.num_prompts[0], distill_mode=grid.distill_modes[0],
                         align_mode=grid.align_modes[0], seed=grid.seeds[0])
    with output_lock(_directory_of(args.out)):
        _start(args, {'base': base.to_dict(), 'cells': grid.size}, [args.data], args.out, args.seed)
        rows = harness.ablate(grid, base, dataset, workers=args.workers)
        harness.write_ablation_csv(args.out, rows)
    print(harness.ablation_table(rows))
    return 0


def cmd_solve_ot(args) -> int:
    doc = schema.read_json(_require_file(args.input))
    schema.require(isinstance(doc, dict), '', 'expected an object')
    cfg = transport.SinkhornConfig(lam=args.lam, inner_max=args.inner_max,
                                   outer_max=args.outer_max, alpha=args.alpha)
    if 'cost' in doc:
        C = schema.float_matrix(doc['cost'], '/cost')
        p = schema.float_vector(doc['p'], '/p') if 'p' in doc else None
        q = schema.float_vector(doc['q'], '/q') if 'q' in doc else None
        plan = transport.sinkhorn(C, p, q, cfg)
    else:
        schema.require('Z' in doc and 'W' in doc, '', 'expected "cost" or both "Z" and "W"')
        Z = schema.float_matrix(doc['Z'], '/Z')
        W = schema.float_matrix(doc['W'], '/W')
        schema.require(Z.shape[1] == W.shape[1], '/W/0', f'expected {Z.shape[1]} columns')
        C = transport.wd_cost(Z, W)
        plan = transport.solve_assignment(Z, W, cfg)
    print(transport.transport_summary(plan, C))
    if args.out:
        with output_lock(_directory_of(args.out)):
            _start(args, cfg.to_dict(), [args.input], args.out)
            schema.write_json_atomic(args.out, {
                'plan': schema.to_lists(plan.T), 'objective': plan.objective(C),
                'row_residual': plan.row_residual, 'column_residual': plan.column_residual,
                'inner_iterations': plan.inner_iterations,
                'outer_iterations': plan.outer_iterations, 'converged': plan.converged})
    return 0


def cmd_rerun(args) -> int:
    manifest = RunManifest.load(_require_file(args.manifest))
    if manifest.argv[0] == 'rerun':
        raise InvalidConfig('A rerun manifest cannot replay another rerun')
    logger.info('replaying %s from %s', manifest.command, args.manifest)
    if not manifest.cwd:
        return main(manifest.argv)
    if not os.path.isdir(manifest.cwd):
        raise InvalidConfig(f'Recorded working directory {manifest.cwd} does not exist')
    previous = os.getcwd()
    os.chdir(manifest.cwd)
    try:
        return main(manifest.argv)
    finally:
        os.chdir(previous)


# %% argument parsing

def _add_model_flags(parser, grid: bool = False):
    many = {'nargs': '+'} if grid else {}
    parser.add_argument('--m', type=int, default=[4] if grid else 4, help='Prompts per class', **many)
    if grid:
        parser.add_argument('--alpha', type=float, nargs='+', default=None,
                            help='GWD weight in graph matching (0.2 when omitted)')
    else:
        parser.add_argument('--alpha', type=float, default=transport.DEFAULT_ALPHA,
                            help='GWD weight in graph matching')
    parser.add_argument('--beta', type=float, default=[0.2] if grid else 0.2,
                        help='Weight of the LLM distillation loss', **many)
    parser.add_argument('--lr', type=float, default=harness.DEFAULT_LR, help='Initial learning rate')
    parser.add_argument('--tau', type=float, default=0.01, help='Logit temperature')
    parser.add_argument('--attn-tau', type=float, default=0.1, help='Attention alignment temperature')
    parser.add_argument('--lambda', dest='lam', type=float, default=transport.DEFAULT_LAMBDA,
                        help='Entropic regularization')
    distills = [m.value for m in DistillMode]
    aligns = [m.value for m in AlignmentMode]
    parser.add_argument('--distill', choices=distills, default=['cosine'] if grid else 'cosine',
                        help='Distillation loss', **many)
    parser.add_argument('--align', choices=aligns, default=['graph'] if grid else 'graph',
                        help='Local feature alignment', **many)
    parser.add_argument('--epochs', type=int, default=None, help='Epochs (per-shot schedule when omitted)')
    parser.add_argument('--batch-size', type=int, default=32)
    parser.add_argument('--inner-max', type=int, default=100, help='Sinkhorn iterations')
    parser.add_argument('--outer-max', type=int, default=10, help='Graph matching iterations')
    parser.add_argument('--seed', type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog='dualpt', description='Dual-aligned prompt tuning toolkit',
                                     formatter_class=fmt)
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('gen-queries', help='Write one LLM query per class', formatter_class=fmt)
    p.add_argument('classes', help='Class list, one name per line')
    p.add_argument('--out', required=True, help='Query JSON file')
    p.set_defaults(func=cmd_gen_queries)

    p = commands.add_parser('fetch', help='Fetch class descriptions into the cache', formatter_class=fmt)
    p.add_argument('classes', help='Class list, one name per line')
    p.add_argument('--cache', required=True, help='Description cache JSON file')
    p.add_argument('--endpoint', default=descriptions.DEFAULT_ENDPOINT, help='Chat-completion URL')
    p.add_argument('--model', default=descriptions.DEFAULT_MODEL)
    p.add_argument('--temperature', type=float, default=descriptions.LLM_TEMPERATURE)
    p.add_argument('--retries', type=int, default=1)
    p.add_argument('--workers', type=int, default=4, help='Concurrent requests')
    p.add_argument('--mock', action='store_true', help='Serve canned answers, no network')
    p.set_defaults(func=cmd_fetch)

    p = commands.add_parser('embed', help='Encode cached phrases into descriptor rows', formatter_class=fmt)
    p.add_argument('--cache', required=True, help='Description cache JSON file')
    p.add_argument('--dim', type=int, default=32)
    p.add_argument('--seed', type=int, default=0, help='Mock encoder seed')
    p.add_argument('--out', required=True, help='Embedding store JSON file')
    p.set_defaults(func=cmd_embed)

    p = commands.add_parser('synth', help='Generate the synthetic benchmark', formatter_class=fmt)
    p.add_argument('--out', required=True, help='Output directory')
    p.add_argument('--classes', type=int, default=10)
    p.add_argument('--parts', type=int, default=4, help='Prototypes per class')
    p.add_argument('--tokens', type=int, default=49, help='Local tokens per image')
    p.add_argument('--dim', type=int, default=32)
    p.add_argument('--noise', type=float, default=0.1, help='Token noise sigma')
    p.add_argument('--descriptor-noise', type=float, default=0.1)
    p.add_argument('--shots', type=int, nargs='+', default=[1, 2, 4, 8, 16])
    p.add_argument('--test-per-class', type=int, default=20)
    p.add_argument('--background', type=int, default=2, help='Shared background prototypes')
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser('train', help='Learn the shared prompt context', formatter_class=fmt)
    p.add_argument('--train', required=True, help='Training samples (JSON lines)')
    p.add_argument('--embeddings', required=True, help='Embedding store JSON file')
    p.add_argument('--out', required=True, help='Context bank JSON file')
    p.add_argument('--subset', choices=['all', 'base'], default='all',
                   help='Train on all classes or on the base half only')
    p.add_argument('--shots', type=int, default=None, help='Shots per class (inferred when omitted)')
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser('eval', help='Evaluate a trained context bank', formatter_class=fmt)
    p.add_argument('--bank', required=True, help='Context bank JSON file')
    p.add_argument('--test', required=True, help='Test samples (JSON lines)')
    p.add_argument('--out', required=True, help='Report JSON file')
    p.add_argument('--protocol', choices=['fewshot', 'base-to-new', 'zeroshot'], default='fewshot')
    p.add_argument('--embeddings', default=None, help='Embedding store, for base-to-new')
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser('ablate', help='Train and evaluate a grid of variants', formatter_class=fmt)
    p.add_argument('--data', required=True, help='Directory written by synth')
    p.add_argument('--out', required=True, help='CSV report')
    p.add_argument('--shots', type=int, nargs='+', default=[1])
    p.add_argument('--seeds', type=int, nargs='+', default=[0])
    p.add_argument('--workers', type=int, default=1, help='Grid cells run in parallel')
    _add_model_flags(p, grid=True)
    p.set_defaults(func=cmd_ablate)

    p = commands.add_parser('solve-ot', help='Solve one transport problem and print the plan',
                            formatter_class=fmt)
    p.add_argument('input', help='JSON with "cost" (and optional "p", "q") or "Z" and "W"')
    p.add_argument('--lambda', dest='lam', type=float, default=transport.DEFAULT_LAMBDA)
    p.add_argument('--alpha', type=float, default=transport.DEFAULT_ALPHA)
    p.add_argument('--inner-max', type=int, default=100)
    p.add_argument('--outer-max', type=int, default=10)
    p.add_argument('--out', default=None, help='Optional plan JSON file')
    p.set_defaults(func=cmd_solve_ot)

    p = commands.add_parser('rerun', help='Replay the command recorded in a manifest', formatter_class=fmt)
    p.add_argument('manifest')
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = [a for a in argv if a not in ('-v', '--verbose')]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        return args.func(args)
    except DualPTError as e:
        print(f'error: {e}', file=sys.stderr)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
