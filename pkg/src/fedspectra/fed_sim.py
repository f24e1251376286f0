"""Federated round engine.

Each round broadcasts the global parameters, optionally computes a
cross-client single-sample reference gradient, runs one local pass of
mini-batch descent per client under the curriculum objective

    L = L_non_aug + 1[t > t_aug] * L_aug + 1[t > t_w] * lambda * R_align,

and aggregates the local parameters by sample-count-weighted averaging.
Every random draw comes from a (seed, path)-keyed stream, so parallel and
sequential client schedules produce bitwise-identical results.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .arrays import ParamVector, SpecGrid, axpy
from .augment import GinConfig, gain_intervene, gin_augment, sample_kernels, spec_mask
from .errors import (
    ConfigError,
    DataError,
    EmptyClient,
    EmptyUpdateSet,
    IncompatibleRegistry,
)
from .model import FlatModel
from .rng import RngStream
from .text_meta import MetaPrompt, TextAugConfig, neutralize


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 30
    local_epochs: int = 1
    lr: float = 5e-5
    align_weight: float = 1e-3
    t_aug: float = 5
    t_w: float = 5
    batch_size: int = 16
    participation: float = 1.0
    hvp_delta: float = 1e-4
    eval_every: int = 0  # 0 = evaluate only after the final round
    parallel_clients: bool = False

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds, local_epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.align_weight < 0:
            raise ConfigError("lambda must be >= 0")
        if self.t_aug < 0 or self.t_w < 0:
            raise ConfigError("t_aug and t_w must be >= 0")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must be in (0, 1]")


@dataclass(frozen=True)
class AugmentPlan:
    """Which augmented view (if any) feeds the second loss term."""

    mode: str = "none"  # none | gain | specmask | mixup | gin
    neutralize_text: bool = False
    mask_max_f: int = 8
    mask_max_t: int = 16
    mixup_alpha: float = 0.2

    def __post_init__(self):
        if self.mode not in ("none", "gain", "specmask", "mixup", "gin"):
            raise ConfigError(f"unknown augmentation mode {self.mode!r}")


class ClientShard:
    """One client's training data plus an access counter used to prove that
    held-out shards are never read during training."""

    def __init__(self, client_id, device_id, grids, prompts, labels):
        grids = np.asarray(grids)
        if grids.ndim != 3 or grids.shape[0] < 1:
            raise EmptyClient(f"client {client_id} has no samples")
        if len(prompts) != grids.shape[0] or len(labels) != grids.shape[0]:
            raise DataError("grids, prompts and labels must have equal length")
        for p in prompts:
            if p.device != device_id:
                raise DataError(
                    f"client {client_id} uses device {device_id} but a sample "
                    f"carries {p.device}"
                )
        self.client_id = client_id
        self.device_id = device_id
        self._grids = grids
        self._prompts = tuple(prompts)
        self._labels = np.asarray(labels, dtype=np.intp)
        self._ids_vocab = None
        self._ids = None
        self._access_count = 0
        self._lock = threading.Lock()

    @classmethod
    def from_samples(cls, client_id, device_id, samples):
        """samples: list of (SpecGrid, MetaPrompt, label_index)."""
        if not samples:
            raise EmptyClient(f"client {client_id} has no samples")
        grids = np.stack([s[0].values for s in samples])
        prompts = [s[1] for s in samples]
        labels = [int(s[2]) for s in samples]
        return cls(client_id, device_id, grids, prompts, labels)

    @property
    def n_k(self) -> int:
        return self._grids.shape[0]

    @property
    def access_count(self) -> int:
        return self._access_count

    def _count(self, n: int):
        with self._lock:
            self._access_count += n

    def _token_ids(self, vocab: tuple) -> np.ndarray:
        if self._ids_vocab != vocab:
            index = {tok: i for i, tok in enumerate(vocab)}
            ids = np.empty((self.n_k, 4), dtype=np.intp)
            for i, p in enumerate(self._prompts):
                ids[i] = [index[tok] for tok in p.tokens()]
            self._ids = ids
            self._ids_vocab = vocab
        return self._ids

    def take(self, indices, vocab: tuple):
        """Gather a mini-batch; counts every sample read."""
        indices = np.asarray(indices, dtype=np.intp)
        self._count(len(indices))
        grids = np.ascontiguousarray(self._grids[indices], dtype=np.float64)
        grids.setflags(write=False)
        ids = self._token_ids(vocab)[indices]
        labels = self._labels[indices]
        prompts = [self._prompts[i] for i in indices]
        return grids, ids, labels, prompts

    def sample(self, i: int):
        """One (SpecGrid, MetaPrompt, label) sample; counted."""
        self._count(1)
        return SpecGrid(self._grids[i]), self._prompts[i], int(self._labels[i])


@dataclass
class ClientRecord:
    client_id: str
    device_id: str
    n_k: int
    loss_non_aug: float
    loss_aug: float | None
    r_align: float | None


@dataclass
class RoundReport:
    round: int
    clients: list
    comm: dict
    metrics: dict | None = None


@dataclass
class FedState:
    model: FlatModel
    shards: tuple
    seed: int
    round: int = 0
    reports: list = field(default_factory=list)


def fedavg_aggregate(updates) -> ParamVector:
    """Sample-count-weighted mean of client parameter vectors."""
    updates = list(updates)
    if not updates:
        raise EmptyUpdateSet("no client updates to aggregate")
    first = updates[0][0]
    total = float(sum(n for _, n in updates))
    acc = np.zeros(first.size)
    for params, n in updates:
        if not first.compatible(params):
            raise IncompatibleRegistry("client update registries differ")
        acc += (n / total) * params.values
    return ParamVector(acc, first.registry)


def reference_gradient(global_model: FlatModel, clients, stream: RngStream) -> ParamVector:
    """Each client contributes the gradient of one uniformly drawn raw sample
    at the current global parameters; returns the plain client mean."""
    clients = list(clients)
    if not clients:
        raise EmptyClient("reference gradient needs at least one client")
    vocab = global_model.spec.vocab
    acc = np.zeros(global_model.params.size)
    for shard in clients:
        if shard.n_k < 1:
            raise EmptyClient(f"client {shard.client_id} has no samples")
        idx = int(stream.child(shard.client_id).integer(shard.n_k))
        grids, ids, labels, _ = shard.take([idx], vocab)
        _, grad = global_model.loss_and_grad_ids(grids, ids, labels)
        acc += grad.values
    return ParamVector(acc / len(clients), global_model.params.registry)


def align_penalty(g_k: ParamVector, g_bar: ParamVector) -> float:
    """Mean squared component difference, (1/P) * ||g_k - g_bar||^2."""
    g_k._check(g_bar)
    diff = g_k.values - g_bar.values
    return float(np.mean(diff * diff))


def _augmented_view(grids, ids, labels, prompts, plan, gin_cfg, txt_cfg, vocab, stream, trace):
    """Build the augmented mini-batch view for the active mode."""
    b = grids.shape[0]
    aug_grids = np.empty_like(grids)
    aug_ids = ids
    aug_labels = labels
    if plan.mode == "gin":
        kernels = sample_kernels(stream.child("kernels"), gin_cfg)
        if trace is not None:
            trace({"event": "kernels", "fingerprint": kernels.fingerprint()})
        index = {tok: i for i, tok in enumerate(vocab)}
        aug_ids = ids.copy()
        for i in range(b):
            grid = gin_augment(SpecGrid(grids[i]), stream.child("sample", i), kernels, gin_cfg)
            aug_grids[i] = grid.values
            if plan.neutralize_text:
                neutered = neutralize(prompts[i], stream.child("text", i), txt_cfg)
                aug_ids[i] = [index[tok] for tok in neutered.tokens()]
    elif plan.mode == "gain":
        for i in range(b):
            grid, _ = gain_intervene(SpecGrid(grids[i]), stream.child("sample", i), gin_cfg)
            aug_grids[i] = grid.values
    elif plan.mode == "specmask":
        for i in range(b):
            grid = spec_mask(
                SpecGrid(grids[i]), stream.child("sample", i), plan.mask_max_f, plan.mask_max_t
            )
            aug_grids[i] = grid.values
    elif plan.mode == "mixup":
        lam = float(stream.child("lam").generator.beta(plan.mixup_alpha, plan.mixup_alpha))
        perm = stream.child("perm").permutation(b)
        aug_grids = lam * grids + (1.0 - lam) * grids[perm]
        onehot = np.zeros((b, 4))
        onehot[np.arange(b), labels] = 1.0
        aug_labels = lam * onehot + (1.0 - lam) * onehot[perm]
    else:  # pragma: no cover - guarded by AugmentPlan
        raise ConfigError(f"no augmented view for mode {plan.mode!r}")
    return aug_grids, aug_ids, aug_labels


def local_update(
    client: ClientShard,
    global_model: FlatModel,
    g_bar: ParamVector | None,
    t: int,
    cfg: FedConfig,
    gin_cfg: GinConfig,
    txt_cfg: TextAugConfig,
    stream: RngStream,
    plan: AugmentPlan = AugmentPlan(),
    trace=None,
):
    """One client's local pass; returns (updated params, per-batch records)."""
    if t < 1:
        raise ConfigError("round index starts at 1")
    if client.n_k < 1:
        raise EmptyClient(f"client {client.client_id} has no samples")
    vocab = global_model.spec.vocab
    aug_active = plan.mode != "none" and t > cfg.t_aug
    align_active = t > cfg.t_w
    if align_active and g_bar is None:
        raise DataError("alignment round requires the reference gradient")
    theta = global_model.params
    p_count = theta.size
    records = []
    for epoch in range(cfg.local_epochs):
        order = stream.child("shuffle", epoch).permutation(client.n_k)
        for b_idx in range(0, client.n_k, cfg.batch_size):
            batch = order[b_idx : b_idx + cfg.batch_size]
            grids, ids, labels, prompts = client.take(batch, vocab)
            model = global_model.with_params(theta)
            loss_na, grad = model.loss_and_grad_ids(grids, ids, labels)
            total = grad
            loss_aug = None
            r_align = None
            if aug_active:
                aug_stream = stream.child("aug", epoch, b_idx)
                if trace is not None:
                    wrapped = lambda ev: trace({**ev, "epoch": epoch, "batch": b_idx})
                else:
                    wrapped = None
                aug_grids, aug_ids, aug_labels = _augmented_view(
                    grids, ids, labels, prompts, plan, gin_cfg, txt_cfg, vocab,
                    aug_stream, wrapped,
                )
                loss_aug, grad_aug = model.loss_and_grad_ids(aug_grids, aug_ids, aug_labels)
                total = total + grad_aug
            if align_active:
                pos = int(stream.child("align", epoch, b_idx).integer(len(batch)))
                single = (grids[pos : pos + 1], ids[pos : pos + 1], labels[pos : pos + 1])
                _, g_k = model.loss_and_grad_ids(*single)
                r_align = align_penalty(g_k, g_bar)
                if cfg.align_weight > 0:
                    hv = model.hvp(
                        (SpecGrid(grids[pos]), prompts[pos], int(labels[pos])),
                        g_k - g_bar,
                        cfg.hvp_delta,
                    )
                    total = axpy(cfg.align_weight * 2.0 / p_count, hv, total)
            theta = axpy(-cfg.lr, total, theta)
            records.append((loss_na, loss_aug, r_align))
    return theta, records


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def run_round(
    state: FedState,
    t: int,
    cfg: FedConfig,
    gin_cfg: GinConfig,
    txt_cfg: TextAugConfig,
    plan: AugmentPlan = AugmentPlan(),
    eval_fn=None,
    trace=None,
) -> RoundReport:
    """One communication round: broadcast, optional reference gradient,
    local updates (parallel or sequential), weighted aggregation."""
    shards = state.shards
    if cfg.participation < 1.0:
        k = max(1, math.ceil(cfg.participation * len(shards)))
        pick = RngStream(state.seed, ("participants", t)).generator.choice(
            len(shards), size=k, replace=False
        )
        shards = tuple(shards[i] for i in sorted(pick))
    p_size = state.model.params.size
    comm = {
        "params_down": len(shards) * p_size,
        "params_up": len(shards) * p_size,
        "ref_grads_up": 0,
        "ref_grad_down": 0,
    }
    g_bar = None
    if t > cfg.t_w:
        g_bar = reference_gradient(
            state.model, shards, RngStream(state.seed, ("refgrad", t))
        )
        comm["ref_grads_up"] = len(shards) * p_size
        comm["ref_grad_down"] = len(shards) * p_size
    comm["bytes_total"] = 8 * sum(
        v for k, v in comm.items() if k != "bytes_total"
    )

    def client_pass(shard):
        stream = RngStream(state.seed, ("round", t, "client", shard.client_id))
        client_trace = None
        if trace is not None:
            client_trace = lambda ev, cid=shard.client_id: trace(
                {**ev, "round": t, "client": cid}
            )
        params, recs = local_update(
            shard, state.model, g_bar, t, cfg, gin_cfg, txt_cfg, stream, plan,
            trace=client_trace,
        )
        return params, recs

    if cfg.parallel_clients and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            results = list(pool.map(client_pass, shards))
    else:
        results = [client_pass(s) for s in shards]

    client_records = []
    updates = []
    for shard, (params, recs) in zip(shards, results):
        updates.append((params, shard.n_k))
        client_records.append(
            ClientRecord(
                client_id=shard.client_id,
                device_id=shard.device_id,
                n_k=shard.n_k,
                loss_non_aug=_mean([r[0] for r in recs]),
                loss_aug=_mean([r[1] for r in recs]),
                r_align=_mean([r[2] for r in recs]),
            )
        )
    state.model = state.model.with_params(fedavg_aggregate(updates))
    state.round = t

    metrics = None
    want_eval = (cfg.eval_every and t % cfg.eval_every == 0) or t == cfg.rounds
    if eval_fn is not None and want_eval:
        metrics = eval_fn(state.model, t)
    report = RoundReport(round=t, clients=client_records, comm=comm, metrics=metrics)
    state.reports.append(report)
    return report


def run_training(
    state: FedState,
    cfg: FedConfig,
    gin_cfg: GinConfig,
    txt_cfg: TextAugConfig,
    plan: AugmentPlan = AugmentPlan(),
    eval_fn=None,
    report_sink=None,
    trace=None,
) -> FedState:
    """Run all configured rounds, streaming each report to report_sink."""
    for t in range(1, cfg.rounds + 1):
        report = run_round(state, t, cfg, gin_cfg, txt_cfg, plan, eval_fn, trace)
        if report_sink is not None:
            report_sink(report)
    return state
