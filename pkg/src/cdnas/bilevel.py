"""Alternating bi-level training with implicit hypergradients.

Inner variable theta: supernet embeddings, op parameters, architecture logits
and CTR head, trained on the importance-weighted loss. Outer variable phi: the
behavior-importance perceptron, trained on a target-only dev loss through

    d L_dev / d phi = - grad_theta(L_dev)^T  H^{-1}  d^2 L_main / (d theta d phi),

with H^{-1} replaced by a step-scaled, K-truncated Neumann series.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.func import functional_call

from .autodiff import GradientError, ParamVector, SecondOrder, gradient, resolve_dtype
from .graph import (DomainSpec, InteractionGraph, Variant, apply_ablation_filter,
                    negative_sample, sample_disjoint_batches)
from .importance import Perceptron, bce_terms, weighted_main_loss
from .metrics import auc, logloss
from .supernet import ALL_OPS, OpKind, PropGraph, Supernet, discretize_arch

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class BilevelConfig:
    K: int = 5
    alpha: float | None = None  # Neumann step scale; None means lr_inner
    T_inner: int = 5
    warmup_epochs: int = 10
    max_epochs: int = 100
    patience: int = 10
    lr_inner: float = 1e-3
    lr_outer: float = 1e-2
    batch_size: int = 256
    seed: int = 0
    neg_ratio: float = 1.0
    precision: str = "single"

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.T_inner < 1:
            raise ValueError("T_inner must be >= 1")
        if not 0 <= self.warmup_epochs <= self.max_epochs:
            raise ValueError("need 0 <= warmup_epochs <= max_epochs")
        if self.patience < 1 or self.batch_size < 1:
            raise ValueError("patience and batch_size must be >= 1")
        if self.lr_inner < 0 or self.lr_outer < 0:
            raise ValueError("learning rates must be non-negative")
        resolve_dtype(self.precision)

    @property
    def step_scale(self) -> float:
        return self.alpha if self.alpha is not None else self.lr_inner


@dataclass
class ModelConfig:
    dim: int = 64
    head_widths: tuple[int, ...] = (128, 64)
    perceptron_dim: int = 32
    perceptron_hidden: int = 32
    ops: tuple[str, ...] = tuple(o.value for o in ALL_OPS)
    manual_op: str = "LIGHTGCN"
    init_std: float = 0.1

    def __post_init__(self):
        self.head_widths = tuple(self.head_widths)
        self.ops = tuple(OpKind(o).value for o in self.ops)
        OpKind(self.manual_op)


@dataclass
class TrainState:
    theta: ParamVector
    phi: ParamVector
    epoch: int = 0
    best_valid_auc: float = 0.0
    epochs_since_best: int = 0


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, state: TrainState, cfg_hash: str = "") -> None:
    payload = {
        "theta": state.theta.values.detach().clone(), "theta_layout": state.theta.layout,
        "phi": state.phi.values.detach().clone(), "phi_layout": state.phi.layout,
        "epoch": state.epoch, "best_valid_auc": state.best_valid_auc,
        "epochs_since_best": state.epochs_since_best, "config_hash": cfg_hash,
    }
    try:
        torch.save(payload, path)
    except (OSError, RuntimeError) as exc:
        raise TrainingError(f"could not write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> tuple[TrainState, str]:
    p = torch.load(path, weights_only=False)
    state = TrainState(ParamVector(p["theta"], p["theta_layout"]), ParamVector(p["phi"], p["phi_layout"]),
                       p["epoch"], p["best_valid_auc"], p["epochs_since_best"])
    return state, p["config_hash"]


def module_vector(module: torch.nn.Module, trainable_only: bool = True) -> ParamVector:
    return ParamVector.from_tensors({n: p for n, p in module.named_parameters()
                                     if p.requires_grad or not trainable_only})


# ---------------------------------------------------------------------------
# single steps


def inner_step(loss_fn: Callable[[], torch.Tensor], optimizer: torch.optim.Optimizer) -> float:
    """One optimizer step on the inner loss; the outer parameters are not touched."""
    optimizer.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite inner loss {loss.item()}")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def neumann_inverse_hvp(v: ParamVector, hvp_fn: Callable[[ParamVector], ParamVector],
                        K: int, alpha: float) -> ParamVector:
    """alpha * sum_{n=0..K} (I - alpha H)^n v using K Hessian-vector products."""
    if K < 0:
        raise ValueError("K must be >= 0")
    p = v.values.clone()
    acc = v.values.clone()
    for _ in range(K):
        p = p - alpha * hvp_fn(v.like(p)).values
        acc = acc + p
        if not torch.isfinite(acc).all():
            raise GradientError("non-finite value in Neumann series")
    return v.like(alpha * acc)


def hypergradient(main_loss: Callable[[ParamVector, ParamVector], torch.Tensor],
                  dev_loss: Callable[[ParamVector], torch.Tensor],
                  theta: ParamVector, phi: ParamVector, K: int, alpha: float) -> ParamVector:
    """Implicit gradient of ``dev_loss(theta*(phi))`` with respect to phi."""
    g = gradient(dev_loss, theta)
    lin = SecondOrder(main_loss, theta, phi)
    u = neumann_inverse_hvp(g, lin.hvp, K, alpha)
    out = lin.mixed_vjp(u)
    return out.like(-out.values)


def outer_step(params: Sequence[torch.Tensor] | ParamVector | torch.nn.Module, hypergrad: ParamVector,
               optimizer: torch.optim.Optimizer) -> bool:
    """Apply a hypergradient as the gradient of the outer parameters and step.

    ``params`` lists the tensors in the hypergradient's layout order. Returns False
    (and leaves phi unchanged) if the hypergradient is not finite.
    """
    if not torch.isfinite(hypergrad.values).all():
        logger.warning("skipping outer step: non-finite hypergradient")
        return False
    if isinstance(params, torch.nn.Module):
        named = dict(params.named_parameters())
        tensors = [named[n] for n in hypergrad.layout]
    else:
        tensors = list(params)
    grads = hypergrad.unflatten()
    optimizer.zero_grad(set_to_none=True)
    for t, g in zip(tensors, grads.values()):
        t.grad = g.detach().to(t.dtype).clone()
    optimizer.step()
    return True


# ---------------------------------------------------------------------------
# full training loop


@dataclass
class Pool:
    users: np.ndarray
    items: np.ndarray
    domains: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> Pool:
        return Pool(self.users[idx], self.items[idx], self.domains[idx], self.labels[idx])

    @classmethod
    def concat(cls, pools: Sequence[Pool]) -> Pool:
        return cls(*(np.concatenate([getattr(p, f) for p in pools])
                     for f in ("users", "items", "domains", "labels")))


def _pool_from_edges(graph: InteractionGraph, idx: np.ndarray) -> Pool:
    return Pool(graph.edge_user[idx].copy(), graph.edge_item[idx].copy(),
                graph.edge_domain[idx].copy(), graph.edge_label[idx].copy())


def _pool_from_interactions(graph: InteractionGraph, inters) -> Pool:
    if not inters:
        return Pool(*(np.zeros(0, dtype=np.int64) for _ in range(4)))
    return Pool(np.array([graph.user_index[e.user] for e in inters]),
                np.array([graph.item_index[(e.domain, e.item)] for e in inters]),
                np.array([graph.domain_id(e.domain) for e in inters]),
                np.array([e.label for e in inters]))


@dataclass
class RunResult:
    auc: float
    logloss: float
    valid_auc: float
    best_epoch: int
    epochs_run: int
    gamma_domains: dict[str, float]
    arch_mixtures: dict
    n_source_edges: int
    epoch_log: list[dict] = field(default_factory=list)
    outer_log: list[dict] = field(default_factory=list)
    warmup_phi_unchanged: list[bool] = field(default_factory=list)

    def record(self) -> dict:
        return {"auc": self.auc, "logloss": self.logloss, "valid_auc": self.valid_auc,
                "best_epoch": self.best_epoch, "epochs_run": self.epochs_run,
                "gamma_domains": self.gamma_domains, "arch_mixtures": self.arch_mixtures,
                "n_source_edges": self.n_source_edges}


def _phi_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for _, p in sorted(module.state_dict().items()):
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class BilevelTrainer:
    """Owns theta (supernet) and phi (perceptron) for one seeded run."""

    def __init__(self, graph: InteractionGraph, config: BilevelConfig,
                 model_config: ModelConfig | None = None, variant: Variant | str = Variant.FULL):
        self.config = config
        self.model_config = mc = model_config or ModelConfig()
        self.variant = Variant(variant)
        self.dtype = resolve_dtype(config.precision)
        self.graph = apply_ablation_filter(graph, self.variant)
        self.n_sources = len(self.graph.domain_spec.sources)
        self.use_perceptron = (self.variant not in (Variant.NO_SOURCE, Variant.NO_IMPO)
                               and self.n_sources > 0)
        self.rng = np.random.default_rng(config.seed)
        torch.manual_seed(config.seed)

        g = self.graph
        self.pg = PropGraph.from_graph(g, self.dtype)
        self.supernet = Supernet(g.n_users, g.n_items, len(g.domain_set), mc.dim, mc.head_widths,
                                 mc.ops, mc.init_std).to(self.dtype)
        self.perceptron = Perceptron(g.n_nodes, self.n_sources, mc.dim, mc.perceptron_dim,
                                     mc.perceptron_hidden, mc.init_std).to(self.dtype)
        ops = self.supernet.ops
        shape = self.supernet.arch_logits.shape
        if self.variant is Variant.MANUAL:
            manual = OpKind(mc.manual_op)
            if manual not in ops:
                raise ValueError(f"manual op {manual.value} is not in the candidate set")
            probs = torch.zeros(shape, dtype=self.dtype)
            probs[..., ops.index(manual)] = 1.0
            self.supernet.fix_arch(probs)
        elif self.variant is Variant.MIX:
            self.supernet.fix_arch(torch.full(shape, 1.0 / len(ops), dtype=self.dtype))

        self.opt_inner = torch.optim.Adam(self.supernet.parameters(), lr=config.lr_inner)
        self.opt_outer = torch.optim.Adam(self.perceptron.parameters(), lr=config.lr_outer)

        train_idx = g.select(split="train")
        self.base_pool = _pool_from_edges(g, train_idx)
        self.sample_train_negatives = config.neg_ratio > 0 and not bool((self.base_pool.labels == 0).any())
        self.valid = self._eval_pool("valid")
        self.test = self._eval_pool("test")
        self.n_source_edges = int((g.edge_domain > 0).sum())

        self.state = TrainState(module_vector(self.supernet), module_vector(self.perceptron))
        self.outer_log: list[dict] = []
        self.epoch_log: list[dict] = []
        self.warmup_phi_unchanged: list[bool] = []

    # -- data ---------------------------------------------------------------

    def _eval_pool(self, split: str) -> Pool:
        g = self.graph
        pool = _pool_from_edges(g, g.select(split=split, domain=0))
        if len(pool) and not bool((pool.labels == 0).any()) and self.config.neg_ratio > 0:
            # evaluation negatives are fixed once per run
            rng = np.random.default_rng(self.config.seed + 7919 * (1 + ("valid", "test").index(split)))
            negs = [e for e in negative_sample(g, 1.0, rng, split=split) if e.domain == g.domain_spec.target]
            pool = Pool.concat([pool, _pool_from_interactions(g, negs)])
        return pool

    def epoch_pool(self) -> Pool:
        if not self.sample_train_negatives:
            return self.base_pool
        negs = negative_sample(self.graph, self.config.neg_ratio, self.rng, split="train")
        return Pool.concat([self.base_pool, _pool_from_interactions(self.graph, negs)])

    # -- losses -------------------------------------------------------------

    def _weights(self, stack, batch: Pool, perceptron_call=None):
        if perceptron_call is None:
            return torch.ones(len(batch), dtype=self.dtype)
        item_h2 = stack[-1][torch.as_tensor(batch.items) + self.pg.n_users]
        return perceptron_call(self.pg, item_h2, batch.users, batch.items, batch.domains)

    def main_loss_fn(self, batch: Pool):
        """Weighted training loss on ``batch`` as a function of (theta, phi) vectors."""
        labels = torch.as_tensor(batch.labels)
        src = torch.as_tensor(batch.domains > 0)

        def loss(theta: ParamVector, phi: ParamVector) -> torch.Tensor:
            logits, stack = functional_call(self.supernet, theta.unflatten(), (self.pg, batch.users, batch.items),
                                            {"return_stack": True})
            w = self._weights(stack, batch, lambda *a: functional_call(self.perceptron, phi.unflatten(), a))
            return weighted_main_loss(logits, labels, w, src, from_logits=True)

        return loss

    def dev_loss_fn(self, batch: Pool):
        labels = torch.as_tensor(batch.labels)

        def loss(theta: ParamVector) -> torch.Tensor:
            logits = functional_call(self.supernet, theta.unflatten(), (self.pg, batch.users, batch.items))
            return bce_terms(logits, labels, from_logits=True).mean()

        return loss

    def _inner_loss(self, batch: Pool, weighted: bool) -> torch.Tensor:
        stack = self.supernet.embeddings(self.pg)
        logits = self.supernet.score(stack, batch.users, batch.items)
        if weighted:
            with torch.no_grad():
                w = self._weights(stack.detach(), batch, self.perceptron.batch_weights)
        else:
            w = torch.ones(len(batch), dtype=self.dtype)
        return weighted_main_loss(logits, torch.as_tensor(batch.labels), w,
                                  torch.as_tensor(batch.domains > 0), from_logits=True)

    # -- steps ----------------------------------------------------------------

    def outer_update(self, pool: Pool, epoch: int, step: int) -> None:
        bs = min(self.config.batch_size, len(pool) // 2)
        inner_idx, dev_idx = sample_disjoint_batches(pool.labels, bs, self.rng, pool.domains == 0)
        disjoint = len(np.intersect1d(inner_idx, dev_idx)) == 0
        theta = module_vector(self.supernet)
        phi = module_vector(self.perceptron)
        try:
            hg = hypergradient(self.main_loss_fn(pool.take(inner_idx)), self.dev_loss_fn(pool.take(dev_idx)),
                               theta, phi, self.config.K, self.config.step_scale)
        except GradientError as exc:
            logger.warning("skipping outer step at epoch %d: %s", epoch, exc)
            applied = False
        else:
            applied = outer_step(self.perceptron, hg, self.opt_outer)
        with torch.no_grad():
            self.perceptron.gamma_domain.clamp_(min=0.0)
        self.outer_log.append({"epoch": epoch, "step": step, "disjoint": disjoint, "applied": applied,
                               "gamma_domains": self.gamma_domains()})

    @torch.no_grad()
    def load_state(self, state: TrainState) -> None:
        """Copy checkpointed theta/phi values into the live modules."""
        for module, vector in ((self.supernet, state.theta), (self.perceptron, state.phi)):
            named = dict(module.named_parameters())
            for name, value in vector.unflatten().items():
                if name == "fixed_probs" and module is self.supernet:
                    self.supernet.fix_arch(value)
                    continue
                if name not in named or named[name].shape != value.shape:
                    raise TrainingError(f"checkpoint entry {name!r} does not fit the model")
                named[name].copy_(value)
        self.state = state

    @torch.no_grad()
    def evaluate(self, pool: Pool) -> tuple[float, float]:
        stack = self.supernet.embeddings(self.pg)
        probs = torch.sigmoid(self.supernet.score(stack, pool.users, pool.items)).double().numpy()
        return auc(probs, pool.labels), logloss(probs, pool.labels)

    def gamma_domains(self) -> dict[str, float]:
        srcs = self.graph.domain_spec.sources
        return {d: float(self.perceptron.gamma_domain[k].detach()) for k, d in enumerate(srcs)}

    def arch_mixtures(self) -> dict:
        return self.supernet.arch_report(domain_names=self.graph.domain_set)

    def run(self, out_dir: str | Path | None = None, log_fn: Callable[[dict], None] | None = None) -> RunResult:
        cfg = self.config
        best = None
        best_epoch = -1
        st = self.state
        chash = config_hash(cfg, self.model_config)
        epochs_run = 0
        for epoch in range(cfg.max_epochs):
            t0 = time.perf_counter()
            bilevel = self.use_perceptron and epoch >= cfg.warmup_epochs
            if self.variant is Variant.DISCRETE and epoch == cfg.warmup_epochs:
                self.supernet.fix_arch(discretize_arch(self.supernet.mixture().detach()))
                # only the discretized network is eligible for selection
                st.best_valid_auc, st.epochs_since_best, best, best_epoch = 0.0, 0, None, -1
            phi_before = _phi_digest(self.perceptron) if epoch < cfg.warmup_epochs else None

            pool = self.epoch_pool()
            order = self.rng.permutation(len(pool))
            losses = []
            for step, start in enumerate(range(0, len(pool), cfg.batch_size)):
                batch = pool.take(order[start:start + cfg.batch_size])
                losses.append(inner_step(lambda: self._inner_loss(batch, bilevel), self.opt_inner))
                if bilevel and (step + 1) % cfg.T_inner == 0:
                    self.outer_update(pool, epoch, step)

            if phi_before is not None:
                self.warmup_phi_unchanged.append(phi_before == _phi_digest(self.perceptron))
            v_auc, v_ll = self.evaluate(self.valid)
            epochs_run = epoch + 1
            st.epoch = epochs_run
            if v_auc > st.best_valid_auc:
                st.best_valid_auc, st.epochs_since_best = v_auc, 0
                best = (copy.deepcopy(self.supernet.state_dict()), copy.deepcopy(self.perceptron.state_dict()))
                best_epoch = epoch
            else:
                st.epochs_since_best += 1
            rec = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else math.nan,
                   "valid_auc": v_auc, "valid_logloss": v_ll, "gamma_domains": self.gamma_domains(),
                   "arch_mixtures": self.arch_mixtures(), "seconds": time.perf_counter() - t0}
            self.epoch_log.append(rec)
            if log_fn:
                log_fn(rec)
            if st.epochs_since_best >= cfg.patience:
                break

        if best is not None:
            self.supernet.load_state_dict(best[0])
            self.perceptron.load_state_dict(best[1])
        tensors = dict(self.supernet.named_parameters())
        if self.supernet.fixed_probs is not None:
            tensors["fixed_probs"] = self.supernet.fixed_probs
        st.theta = ParamVector.from_tensors(tensors)
        st.phi = module_vector(self.perceptron, trainable_only=False)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "checkpoint.pt", st, chash)
        t_auc, t_ll = self.evaluate(self.test)
        return RunResult(t_auc, t_ll, st.best_valid_auc, best_epoch, epochs_run, self.gamma_domains(),
                         self.arch_mixtures(), self.n_source_edges, self.epoch_log, self.outer_log,
                         self.warmup_phi_unchanged)


def train(graph: InteractionGraph, domain_spec: DomainSpec | None, config: BilevelConfig,
          variant: Variant | str = Variant.FULL, model_config: ModelConfig | None = None,
          out_dir: str | Path | None = None, log_fn=None) -> tuple[TrainState, RunResult]:
    if domain_spec is not None and domain_spec != graph.domain_spec:
        raise ValueError("domain spec does not match the graph's")
    trainer = BilevelTrainer(graph, config, model_config, variant)
    result = trainer.run(out_dir, log_fn)
    return trainer.state, result
