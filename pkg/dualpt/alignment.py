"""Dual alignment objective for learnable class prompts.

Prompts are composed from a shared trainable context ``S`` (M x d) and frozen
per-class anchors: ``w_k[m] = normalize(S[m] + anchor_k)``. They are pulled
towards LLM descriptor embeddings (the distillation branch) and matched to the
local tokens of each image with a transport plan whose weights ensemble the
token/prompt similarities into class logits (the image branch).

Transport plans are treated as constants when differentiating. ``solve_plans``
returns them frozen so the same loss can be re-evaluated, e.g. by a finite
difference check, without re-solving.
"""
import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from dualpt import numerics, transport
from dualpt.errors import (InvalidClass, InvalidLabel, InvalidTemperature,
                           InvalidWeight, MissingDescriptors, ShapeMismatch)

logger = logging.getLogger(__name__)

DEFAULT_NUM_PROMPTS = 4
DEFAULT_BETA = 0.2
DEFAULT_TAU = 0.01
DEFAULT_ATTN_TAU = 0.1


class AlignmentMode(enum.Enum):
    GRAPH = 'graph'
    NODE = 'node'
    EDGE = 'edge'
    ATTENTION = 'attention'


class DistillMode(enum.Enum):
    COSINE = 'cosine'
    WD = 'wd'
    CE = 'ce'
    NONE = 'none'


# node and edge matching are the endpoints of the fused cost
fixed_alpha = {
    AlignmentMode.NODE: 0.0,
    AlignmentMode.EDGE: 1.0,
}


def sinkhorn_for_mode(cfg: transport.SinkhornConfig, mode) -> transport.SinkhornConfig:
    alpha = fixed_alpha.get(AlignmentMode(mode))
    if alpha is None:
        return cfg
    return replace(cfg, alpha=alpha)


def _check_temperature(tau: float, name: str = 'tau'):
    if not tau > 0:
        raise InvalidTemperature(f'{name} must be positive, got {tau}')


# %% domain types

@dataclass(frozen=True)
class ContextBank:
    context: np.ndarray
    anchors: np.ndarray

    def __post_init__(self):
        context = numerics.as_matrix(self.context)
        anchors = numerics.as_matrix(self.anchors)
        if context.shape[1] != anchors.shape[1]:
            raise ShapeMismatch(
                f'Context dim {context.shape[1]} does not match anchor dim {anchors.shape[1]}')
        object.__setattr__(self, 'context', context)
        object.__setattr__(self, 'anchors', anchors)

    @property
    def num_prompts(self) -> int:
        return self.context.shape[0]

    @property
    def num_classes(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.context.shape[1]

    def with_context(self, context) -> 'ContextBank':
        return ContextBank(context, self.anchors)

    def raw_prompts(self) -> np.ndarray:
        """Un-normalized prompts S[m] + anchor_k, shape K x M x d."""
        return self.context[None, :, :] + self.anchors[:, None, :]

    def prompts(self) -> np.ndarray:
        return numerics.normalize_rows(self.raw_prompts())


@dataclass(frozen=True)
class ClassDescriptors:
    """Per-class descriptor blocks h_i (e_i x d), rows unit-normalized."""
    blocks: Tuple[np.ndarray, ...]

    def __post_init__(self):
        blocks = []
        for i, block in enumerate(self.blocks):
            block = np.asarray(block, dtype=np.float64)
            if block.ndim != 2 or block.shape[0] == 0:
                raise MissingDescriptors(f'Class {i} has no descriptors')
            block = numerics.normalize_rows(block)
            block.flags.writeable = False
            blocks.append(block)
        if not blocks:
            raise MissingDescriptors('No descriptor blocks given')
        if len({block.shape[1] for block in blocks}) != 1:
            raise ShapeMismatch('Descriptor blocks have different dimensions')
        object.__setattr__(self, 'blocks', tuple(blocks))

    @property
    def num_classes(self) -> int:
        return len(self.blocks)

    @property
    def dim(self) -> int:
        return self.blocks[0].shape[1]

    def centroids(self) -> np.ndarray:
        return numerics.normalize_rows(np.stack([block.mean(axis=0) for block in self.blocks]))


@dataclass(frozen=True)
class LossBreakdown:
    l_llm: float
    l_img: float
    total: float
    beta: float

    @staticmethod
    def combine(l_llm: float, l_img: float, beta: float) -> 'LossBreakdown':
        return LossBreakdown(float(l_llm), float(l_img),
                             float(beta * l_llm + (1.0 - beta) * l_img), float(beta))

    def to_dict(self) -> dict:
        return {'l_llm': self.l_llm, 'l_img': self.l_img, 'total': self.total, 'beta': self.beta}


@dataclass(frozen=True)
class Batch:
    """Stacked samples: tokens B x N x d, global features B x d, labels B."""
    tokens: np.ndarray
    global_features: np.ndarray
    labels: np.ndarray

    @staticmethod
    def of(samples) -> 'Batch':
        samples = list(samples)
        if not samples:
            raise ShapeMismatch('Empty batch')
        tokens = np.stack([numerics.normalize_rows(s.tokens) for s in samples])
        global_features = np.stack([numerics.l2_normalize(s.global_feature) for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return Batch(tokens, global_features, labels)

    def __len__(self):
        return self.labels.size

    def subset(self, index) -> 'Batch':
        return Batch(self.tokens[index], self.global_features[index], self.labels[index])


@dataclass(frozen=True)
class ObjectiveConfig:
    sinkhorn: transport.SinkhornConfig = field(default_factory=transport.SinkhornConfig)
    beta: float = DEFAULT_BETA
    tau: float = DEFAULT_TAU
    attn_tau: float = DEFAULT_ATTN_TAU
    distill_mode: DistillMode = DistillMode.COSINE
    align_mode: AlignmentMode = AlignmentMode.GRAPH

    def __post_init__(self):
        object.__setattr__(self, 'distill_mode', DistillMode(self.distill_mode))
        object.__setattr__(self, 'align_mode', AlignmentMode(self.align_mode))
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidWeight(f'beta must lie in [0, 1], got {self.beta}')
        _check_temperature(self.tau)
        _check_temperature(self.attn_tau, 'attn_tau')

    def plan_config(self) -> transport.SinkhornConfig:
        return sinkhorn_for_mode(self.sinkhorn, self.align_mode)


@dataclass(frozen=True)
class FrozenPlans:
    image: np.ndarray
    distill: Optional[Tuple[np.ndarray, ...]] = None


# %% prompts and plans

def class_prompts(bank: ContextBank, k: int) -> numerics.EmbeddingMatrix:
    if not (isinstance(k, (int, np.integer)) and 0 <= k < bank.num_classes):
        raise InvalidClass(f'Class index {k} outside [0, {bank.num_classes})')
    return numerics.EmbeddingMatrix(numerics.normalize_rows(bank.context + bank.anchors[k]))


def _attention(sims: np.ndarray, attn_tau: float) -> np.ndarray:
    return numerics.softmax_rows(sims, attn_tau, axis=-1) / sims.shape[-2]


def attention_plan(Z, W, attn_tau: float = DEFAULT_ATTN_TAU) -> transport.TransportPlan:
    _check_temperature(attn_tau, 'attn_tau')
    T = _attention(numerics.cosine_matrix(Z, W), attn_tau)
    N = T.shape[0]
    return transport.TransportPlan(T=T, p=np.full(N, 1.0 / N), q=T.sum(axis=0),
                                   inner_iterations=0, outer_iterations=0,
                                   converged=True, column_constrained=False)


def _similarities(tokens: np.ndarray, prompts: np.ndarray) -> np.ndarray:
    return np.einsum('bnd,kmd->bknm', tokens, prompts)


def _class_plans(tokens, prompts, cfg: transport.SinkhornConfig, mode: AlignmentMode,
                 attn_tau: float) -> np.ndarray:
    """One plan per (image, class): tokens B x N x d against prompts K x M x d."""
    sims = np.clip(_similarities(tokens, prompts), -1.0, 1.0)
    if mode is AlignmentMode.ATTENTION:
        return _attention(sims, attn_tau)
    cfg = sinkhorn_for_mode(cfg, mode)
    B, K, N, M = sims.shape
    C_z = np.clip(tokens @ tokens.transpose(0, 2, 1), -1.0, 1.0)
    C_w = np.clip(prompts @ prompts.transpose(0, 2, 1), -1.0, 1.0)
    result = transport.graph_match_batch(
        (1.0 - sims).reshape(B * K, N, M),
        np.repeat(C_z, K, axis=0),
        np.tile(C_w, (B, 1, 1)),
        None, None, cfg)
    if result.unconverged:
        logger.debug('%d of %d plans stopped before reaching marginal tolerance',
                     result.unconverged, B * K)
    return result.plans.reshape(B, K, N, M)


def _distill_plans(prompts, descriptors: ClassDescriptors, cfg: transport.SinkhornConfig):
    plans = []
    for k, block in enumerate(descriptors.blocks):
        cost = np.clip(1.0 - prompts[k] @ block.T, 0.0, 2.0)
        plans.append(transport.sinkhorn_batch(cost[None], None, None, cfg).plans[0])
    return tuple(plans)


def _check_descriptors(bank: ContextBank, descriptors: Optional[ClassDescriptors]) -> ClassDescriptors:
    if descriptors is None:
        raise MissingDescriptors('Distillation needs class descriptors')
    if descriptors.num_classes != bank.num_classes or descriptors.dim != bank.dim:
        raise ShapeMismatch(
            f'Descriptors cover {descriptors.num_classes} classes of dim {descriptors.dim}, '
            f'bank has {bank.num_classes} of dim {bank.dim}')
    return descriptors


def _check_tokens(tokens: np.ndarray, bank: ContextBank):
    if tokens.shape[-1] != bank.dim:
        raise ShapeMismatch(f'Token dim {tokens.shape[-1]} does not match bank dim {bank.dim}')


def solve_plans(batch: Batch, bank: ContextBank, descriptors: Optional[ClassDescriptors],
                config: ObjectiveConfig) -> FrozenPlans:
    _check_tokens(batch.tokens, bank)
    prompts = bank.prompts()
    image = _class_plans(batch.tokens, prompts, config.sinkhorn, config.align_mode, config.attn_tau)
    distill = None
    if config.distill_mode is DistillMode.WD:
        distill = _distill_plans(prompts, _check_descriptors(bank, descriptors), config.sinkhorn)
    return FrozenPlans(image, distill)


# %% predictions

def _ot_logits(plans, sims, tau: float) -> np.ndarray:
    return np.einsum('bknm,bknm->bk', plans, sims) / tau


def predict_batch(tokens, bank: ContextBank, cfg: transport.SinkhornConfig = transport.SinkhornConfig(),
                  mode=AlignmentMode.GRAPH, tau: float = DEFAULT_TAU,
                  attn_tau: float = DEFAULT_ATTN_TAU, chunk: int = 64) -> np.ndarray:
    """Class probabilities (B x K) for a stack of token blocks."""
    _check_temperature(tau)
    _check_temperature(attn_tau, 'attn_tau')
    mode = AlignmentMode(mode)
    tokens = numerics.normalize_rows(tokens)
    _check_tokens(tokens, bank)
    prompts = bank.prompts()
    probs = []
    for start in range(0, tokens.shape[0], chunk):
        block = tokens[start:start + chunk]
        plans = _class_plans(block, prompts, cfg, mode, attn_tau)
        logits = _ot_logits(plans, _similarities(block, prompts), tau)
        probs.append(numerics.softmax_rows(logits))
    return np.concatenate(probs)


def ot_predict(tokens, bank: ContextBank, cfg: transport.SinkhornConfig = transport.SinkhornConfig(),
               mode=AlignmentMode.GRAPH, tau: float = DEFAULT_TAU,
               attn_tau: float = DEFAULT_ATTN_TAU) -> numerics.ProbVector:
    Z = numerics.as_matrix(tokens)
    return numerics.ProbVector(predict_batch(Z[None], bank, cfg, mode, tau, attn_tau)[0])


def _global_targets(bank: ContextBank, use_context: bool) -> np.ndarray:
    if use_context:
        return bank.prompts().mean(axis=1)
    return bank.anchors


def global_predict(z_global, bank: ContextBank, tau: float = DEFAULT_TAU,
                   use_context: bool = True) -> numerics.ProbVector:
    """Global-feature prediction: anchors alone, or the mean composed prompt per class."""
    _check_temperature(tau)
    z = numerics.l2_normalize(z_global)
    if z.shape != (bank.dim,):
        raise ShapeMismatch(f'Global feature of shape {z.shape} does not match dim {bank.dim}')
    targets = numerics.normalize_rows(_global_targets(bank, use_context))
    return numerics.softmax(targets @ z, tau)


# %% loss terms, each returning (value, gradient w.r.t. the unit prompts K x M x d)

def _check_labels(batch: Batch, bank: ContextBank):
    if np.any(batch.labels < 0) or np.any(batch.labels >= bank.num_classes):
        raise InvalidLabel(f'Labels must lie in [0, {bank.num_classes})')


def _image_terms(batch: Batch, bank: ContextBank, prompts, plans, config: ObjectiveConfig):
    _check_labels(batch, bank)
    if plans is None:
        plans = _class_plans(batch.tokens, prompts, config.sinkhorn, config.align_mode, config.attn_tau)
    B = len(batch)
    logits = _ot_logits(plans, _similarities(batch.tokens, prompts), config.tau)
    log_probs = numerics.log_softmax_rows(logits)
    rows = np.arange(B)
    loss = -np.mean(log_probs[rows, batch.labels])
    d_logits = np.exp(log_probs)
    d_logits[rows, batch.labels] -= 1.0
    d_logits /= B
    grad = np.einsum('bk,bknm,bnd->kmd', d_logits, plans, batch.tokens) / config.tau
    return float(loss), grad


def _distill_cosine_terms(prompts, descriptors: ClassDescriptors):
    K, M, _ = prompts.shape
    loss = 0.0
    grad = np.zeros_like(prompts)
    for k, block in enumerate(descriptors.blocks):
        # mean over all M x e prompt/descriptor pairs
        loss += np.mean(1.0 - prompts[k] @ block.T)
        grad[k] = -block.mean(axis=0) / (K * M)
    return loss / K, grad


def _distill_wd_terms(prompts, descriptors: ClassDescriptors, plans):
    K = prompts.shape[0]
    loss = 0.0
    grad = np.zeros_like(prompts)
    for k, (block, plan) in enumerate(zip(descriptors.blocks, plans)):
        cost = np.clip(1.0 - prompts[k] @ block.T, 0.0, 2.0)
        loss += np.sum(plan * cost)
        grad[k] = -(plan @ block) / K
    return loss / K, grad


def _distill_ce_terms(batch: Batch, prompts, descriptors: ClassDescriptors, tau: float):
    _check_temperature(tau)
    B = len(batch)
    M = prompts.shape[1]
    z = batch.global_features
    target = numerics.softmax_rows(z @ descriptors.centroids().T, tau)
    mean_prompts = prompts.mean(axis=1)
    norms = np.linalg.norm(mean_prompts, axis=1)
    directions = numerics.normalize_rows(mean_prompts)
    log_student = numerics.log_softmax_rows(z @ directions.T / tau)
    loss = -np.mean(np.sum(target * log_student, axis=1))
    g = (np.exp(log_student) - target) / B
    # d cos(z, m) / d m = (z - n (n.z)) / |m|, with n = m / |m|
    along = z @ directions.T
    d_mean = (np.einsum('bk,bd->kd', g, z) - np.sum(g * along, axis=0)[:, None] * directions)
    d_mean /= norms[:, None] * tau
    grad = np.repeat(d_mean[:, None, :] / M, M, axis=1)
    return float(loss), grad


def _to_context(bank: ContextBank, grad_prompts: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. the unit prompts through normalize(S[m] + anchor_k)."""
    raw = bank.raw_prompts()
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    unit = raw / norms
    tangent = grad_prompts - np.sum(grad_prompts * unit, axis=-1, keepdims=True) * unit
    return np.sum(tangent / norms, axis=0)


def _objective(batch: Batch, bank: ContextBank, descriptors: Optional[ClassDescriptors],
               config: ObjectiveConfig, plans: Optional[FrozenPlans]):
    _check_tokens(batch.tokens, bank)
    prompts = bank.prompts()
    mode = config.distill_mode
    if mode is DistillMode.NONE:
        l_llm, g_llm = 0.0, np.zeros_like(prompts)
    elif mode is DistillMode.COSINE:
        l_llm, g_llm = _distill_cosine_terms(prompts, _check_descriptors(bank, descriptors))
    elif mode is DistillMode.WD:
        descriptors = _check_descriptors(bank, descriptors)
        if plans is not None and plans.distill is not None:
            distill_plans = plans.distill
        else:
            distill_plans = _distill_plans(prompts, descriptors, config.sinkhorn)
        l_llm, g_llm = _distill_wd_terms(prompts, descriptors, distill_plans)
    else:
        l_llm, g_llm = _distill_ce_terms(batch, prompts, _check_descriptors(bank, descriptors), config.tau)
    image_plans = plans.image if plans is not None else None
    l_img, g_img = _image_terms(batch, bank, prompts, image_plans, config)
    breakdown = LossBreakdown.combine(l_llm, l_img, config.beta)
    grad = config.beta * g_llm + (1.0 - config.beta) * g_img
    return breakdown, _to_context(bank, grad)


# %% public losses

def distill_loss_cosine(bank: ContextBank, descriptors: ClassDescriptors) -> float:
    loss, _ = _distill_cosine_terms(bank.prompts(), _check_descriptors(bank, descriptors))
    return float(loss)


def distill_loss_wd(bank: ContextBank, descriptors: ClassDescriptors,
                    cfg: transport.SinkhornConfig = transport.SinkhornConfig(),
                    plans=None) -> float:
    descriptors = _check_descriptors(bank, descriptors)
    prompts = bank.prompts()
    if plans is None:
        plans = _distill_plans(prompts, descriptors, cfg)
    loss, _ = _distill_wd_terms(prompts, descriptors, plans)
    return float(loss)


def distill_loss_ce(batch: Batch, bank: ContextBank, descriptors: ClassDescriptors,
                    tau: float = DEFAULT_TAU) -> float:
    loss, _ = _distill_ce_terms(batch, bank.prompts(), _check_descriptors(bank, descriptors), tau)
    return loss


def image_loss(batch: Batch, bank: ContextBank,
               cfg: transport.SinkhornConfig = transport.SinkhornConfig(),
               mode=AlignmentMode.GRAPH, tau: float = DEFAULT_TAU,
               attn_tau: float = DEFAULT_ATTN_TAU, plans: Optional[FrozenPlans] = None) -> float:
    config = ObjectiveConfig(sinkhorn=cfg, tau=tau, attn_tau=attn_tau, align_mode=mode)
    _check_tokens(batch.tokens, bank)
    image_plans = plans.image if plans is not None else None
    loss, _ = _image_terms(batch, bank, bank.prompts(), image_plans, config)
    return loss


def total_loss(batch: Batch, bank: ContextBank, descriptors: Optional[ClassDescriptors],
               config: ObjectiveConfig, plans: Optional[FrozenPlans] = None) -> LossBreakdown:
    breakdown, _ = _objective(batch, bank, descriptors, config, plans)
    return breakdown


def loss_gradient(batch: Batch, bank: ContextBank, descriptors: Optional[ClassDescriptors],
                  config: ObjectiveConfig, plans: Optional[FrozenPlans] = None) -> np.ndarray:
    """d total / d S with every transport plan held constant."""
    _, grad = _objective(batch, bank, descriptors, config, plans)
    return grad


def loss_and_gradient(batch: Batch, bank: ContextBank, descriptors: Optional[ClassDescriptors],
                      config: ObjectiveConfig, plans: Optional[FrozenPlans] = None):
    return _objective(batch, bank, descriptors, config, plans)
