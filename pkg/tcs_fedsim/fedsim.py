"""
Federated training loops: FedAvg, time-correlated sparsification with error
feedback, and TCS with global momentum.

All three share one round loop. Every client keeps its own copy of the model,
residual and (for momentum runs) momentum vector; the parameter server averages the
uplink updates in ascending client order and every client applies the same
broadcast, so client copies stay bit-identical.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .codec import decode_payload, encode_payload, quantize_values
from .compressors import (
    ErrorState,
    SparseUpdate,
    layer_floors,
    randk_compress,
    randk_mask,
    tcs_compress,
    tcs_global_mask,
    topk_compress,
)
from .config import CompressorConfig, ExperimentConfig, QuantizerSpec, RuntimeConfig
from .exceptions import ConfigurationError, ContractViolationError, DivergedError, NonFiniteValueError
from .metrics import MetricsLog, MetricsRecord
from .models import (
    BatchSampler,
    Dataset,
    Model,
    accuracy,
    gradient,
    init_model,
    load_dataset_csv,
    loss,
    partition_iid,
    synth_dataset,
    train_test_split,
)
from .tensor import Mask, ParamVector, mask_union
from .workers import WorkerPool

logger = logging.getLogger(__name__)

DENSE_VALUE_BITS = 32

RoundCallback = Callable[["RoundTrace"], None]


@dataclass
class Experiment:
    """Everything a run needs besides its config: data splits and the initial model"""
    cfg: ExperimentConfig
    train: Dataset
    test: Dataset
    shards: List[Dataset]
    model: Model


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    """
    Materialize the dataset, client shards and initial model of a config.

    Raises:
        ConfigurationError: If the data cannot support the requested clients or
            dimensions
        DatasetFormatError: If a CSV dataset cannot be read
    """
    if cfg.dataset == "synthetic":
        ds = synth_dataset(cfg.num_classes, cfg.num_features, cfg.num_samples, cfg.cluster_spread, cfg.seed)
    else:
        ds = load_dataset_csv(cfg.dataset_path, cfg.num_classes)
        if ds.n_features != cfg.num_features:
            raise ConfigurationError(
                f"dataset has {ds.n_features} features, config says {cfg.num_features}", fields=["num_features"]
            )
    train, test = train_test_split(ds, cfg.test_fraction, cfg.seed)
    if cfg.num_clients > train.n_samples:
        raise ConfigurationError(
            f"{cfg.num_clients} clients but only {train.n_samples} training samples", fields=["num_clients"]
        )
    shards = partition_iid(train, cfg.num_clients, cfg.seed)
    model = init_model(cfg.model, cfg.num_classes, cfg.num_features, cfg.hidden_units or 0, cfg.seed)
    logger.info(
        f"Built experiment: {train.n_samples} train / {test.n_samples} test samples, "
        f"{cfg.num_clients} clients, {cfg.model} with d={model.layout.d}"
    )
    return Experiment(cfg, train, test, shards, model)


@dataclass(frozen=True)
class RoundSchedule:
    """Rounds per epoch and in total"""
    steps_per_epoch: int
    rounds_per_epoch: int
    total_rounds: int

    @classmethod
    def for_experiment(cls, shards: Sequence[Dataset], batch_size: int, local_steps: int, epochs: int):
        smallest = min(s.n_samples for s in shards)
        steps = -(-smallest // batch_size)
        rounds = -(-steps // local_steps)
        return cls(steps, rounds, rounds * epochs)

    def epoch_of(self, round: int) -> float:
        return round / self.rounds_per_epoch


def lr_schedule(epoch: float, cfg: ExperimentConfig) -> float:
    """
    Learning rate at fractional ``epoch``.

    The target rate scales linearly with the global batch,
    base_lr * N * batch_size / reference_batch. During warmup the rate ramps linearly
    from base_lr to the target; afterwards every milestone already reached multiplies
    it by its factor.
    """
    if epoch < 0:
        raise ContractViolationError("epoch must be non-negative")
    target = cfg.base_lr * cfg.num_clients * cfg.batch_size / cfg.reference_batch
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr + (target - cfg.base_lr) * epoch / cfg.warmup_epochs
    lr = target
    for milestone, factor in cfg.milestone_list():
        if epoch >= milestone:
            lr *= factor
    return lr


def client_local_update(
    model: Model, shard: Dataset, local_steps: int, lr: float, weight_decay: float, sampler: BatchSampler
) -> ParamVector:
    """
    Run ``local_steps`` SGD steps from ``model`` and return the model difference.

    The difference is accumulated as the sum of -lr*g over the steps, so one step
    returns exactly -lr times the gradient. ``model`` itself is never modified.
    """
    if local_steps < 1:
        raise ContractViolationError("local_steps must be at least 1")
    if shard.n_samples == 0:
        raise ContractViolationError("cannot train on an empty shard")
    start = model.params
    delta = ParamVector.zeros(start.layout)
    current = model
    for _ in range(local_steps):
        batch = shard.subset(sampler.next_batch())
        delta = delta + gradient(current, batch, weight_decay) * (-lr)
        current = model.with_params(start + delta)
    return delta


def aggregate(updates: Sequence[Union[SparseUpdate, ParamVector]]) -> ParamVector:
    """
    Elementwise mean of client updates.

    Summation runs in list order (ascending client id), then the sum is divided by N.

    Raises:
        ContractViolationError: If ``updates`` is empty
        LayoutMismatchError: If the updates use different layouts
    """
    if not updates:
        raise ContractViolationError("nothing to aggregate")
    dense = [u.to_dense() if isinstance(u, SparseUpdate) else u for u in updates]
    total = ParamVector.zeros(dense[0].layout)
    for u in dense:
        total = total + u
    return total.with_values(total.values / len(dense))


@dataclass
class RoundState:
    """State carried between rounds; every list is indexed by client id"""
    round: int
    params: ParamVector
    last_broadcast: ParamVector
    client_params: List[ParamVector]
    errors: List[ErrorState]
    momenta: Optional[List[ParamVector]] = None

    @classmethod
    def initial(cls, params: ParamVector, num_clients: int, with_momentum: bool) -> "RoundState":
        zeros = ParamVector.zeros(params.layout)
        return cls(
            round=0,
            params=params,
            last_broadcast=zeros,
            client_params=[params] * num_clients,
            errors=[ErrorState.zeros(params.layout)] * num_clients,
            momenta=[zeros] * num_clients if with_momentum else None,
        )

    def check_client_consistency(self) -> None:
        for client_id, theta in enumerate(self.client_params):
            if not np.array_equal(theta.values, self.params.values):
                raise ContractViolationError(f"client {client_id} model differs from the global model")


@dataclass
class RoundTrace:
    """Observer view of one completed round"""
    round: int
    epoch: float
    lr: float
    compressed: bool
    global_mask: Optional[Mask]
    client_params: List[ParamVector]
    updates: List[ParamVector]
    sent: List[Optional[SparseUpdate]]
    old_errors: List[ErrorState]
    new_errors: List[ErrorState]
    uplink_bits: List[int]
    broadcast: ParamVector
    params: ParamVector
    momenta: Optional[List[ParamVector]] = None
    downlink_support_size: int = 0


@dataclass
class _ClientResult:
    update: ParamVector
    received: Union[SparseUpdate, ParamVector]
    sent: Optional[SparseUpdate]
    error: ErrorState
    bits: int


def _fold_quantization_error(err: ErrorState, su: SparseUpdate, dequantized: np.ndarray) -> ErrorState:
    residual = err.residual.values.copy()
    positions = np.concatenate([su.global_positions, su.local_positions])
    residual[positions] = su.wire_values() - dequantized
    return ErrorState(err.residual.with_values(residual))


@dataclass
class _Loop:
    """One configured training run"""
    exp: Experiment
    runtime: RuntimeConfig
    momentum_mode: bool
    on_round: Optional[RoundCallback] = None
    comp: Optional[CompressorConfig] = field(init=False)
    quant: QuantizerSpec = field(init=False)
    schedule: RoundSchedule = field(init=False)
    samplers: List[BatchSampler] = field(init=False)

    def __post_init__(self):
        cfg = self.exp.cfg
        self.comp = cfg.compressor_config()
        self.quant = cfg.quantizer_spec()
        self.schedule = RoundSchedule.for_experiment(self.exp.shards, cfg.batch_size, cfg.local_steps, cfg.epochs)
        self.samplers = [
            BatchSampler(shard.n_samples, cfg.batch_size, cfg.seed, client_id)
            for client_id, shard in enumerate(self.exp.shards)
        ]
        self._check_feasible()

    @property
    def cfg(self) -> ExperimentConfig:
        return self.exp.cfg

    @property
    def block_phi(self) -> float:
        if self.comp is None or self.comp.scheme == "randk":
            return 0.0
        return self.comp.phi_local if self.comp.scheme == "tcs" else self.comp.phi_global

    def _check_feasible(self) -> None:
        if self.comp is None:
            return
        layout = self.exp.model.layout
        d = layout.d
        k_global, k_local = self.comp.k_global(d), self.comp.k_local(d)
        if k_global + k_local > d:
            raise ConfigurationError(f"K_global + K_local = {k_global + k_local} exceeds d = {d}", ["phi_local"])
        if self.comp.global_floors_enabled:
            floors = layer_floors(layout, self.comp.phi_min_global)
            if sum(floors) > k_global:
                raise ConfigurationError(
                    f"global layer floors {floors} exceed K_global = {k_global}", ["phi_min_global"]
                )
        if self.comp.local_floors_enabled:
            floors = layer_floors(layout, self.comp.phi_min_local)
            if sum(floors) > k_local:
                raise ConfigurationError(f"local layer floors {floors} exceed K_local = {k_local}", ["phi_min_local"])

    def _global_mask(self, state: RoundState) -> Optional[Mask]:
        comp = self.comp
        layout = state.params.layout
        if comp.scheme == "tcs":
            fairness = comp.fairness if comp.global_floors_enabled else "none"
            return tcs_global_mask(state.last_broadcast, comp.k_global(layout.d), fairness, comp.phi_min_global)
        if comp.scheme == "randk":
            return randk_mask(layout, comp.k_global(layout.d), state.round, self.cfg.seed)
        return None

    def _raw_update(self, client_id: int, theta: ParamVector, lr: float) -> ParamVector:
        model = self.exp.model.with_params(theta)
        shard = self.exp.shards[client_id]
        if self.momentum_mode:
            batch = shard.subset(self.samplers[client_id].next_batch())
            return gradient(model, batch, self.cfg.weight_decay)
        return client_local_update(
            model, shard, self.cfg.local_steps, lr, self.cfg.weight_decay, self.samplers[client_id]
        )

    def _compress(self, update: ParamVector, err: ErrorState, m_global: Optional[Mask], round: int):
        comp = self.comp
        d = update.d
        if comp.scheme == "tcs":
            su, new_err = tcs_compress(update, m_global, comp, err)
        elif comp.scheme == "topk":
            su, new_err = topk_compress(update, comp.k_global(d), err)
        else:
            su, new_err = randk_compress(update, m_global, err)

        qv = quantize_values(su.wire_values(), self.quant) if self.quant.kind != "none" else None
        payload = encode_payload(su, self.quant, self.block_phi, round=round, quantized=qv)
        if qv is None:
            return su, su, new_err, payload.bit_length
        receiver_mask = m_global if m_global is not None else Mask.empty(update.layout)
        received = decode_payload(payload.to_bytes(), receiver_mask)
        return su, received, _fold_quantization_error(new_err, su, qv.dequantized), payload.bit_length

    def _client_round(
        self, client_id: int, state: RoundState, lr: float, compressing: bool, m_global: Optional[Mask]
    ) -> _ClientResult:
        update = self._raw_update(client_id, state.client_params[client_id], lr)
        err = state.errors[client_id]
        if not compressing:
            return _ClientResult(update, update, None, err, DENSE_VALUE_BITS * update.d)
        sent, received, new_err, bits = self._compress(update, err, m_global, state.round)
        return _ClientResult(update, received, sent, new_err, bits)

    def run(self) -> MetricsLog:
        cfg = self.cfg
        n = cfg.num_clients
        d = self.exp.model.layout.d
        state = RoundState.initial(self.exp.model.params, n, self.momentum_mode)
        log = MetricsLog()
        logger.info(
            f"Starting {cfg.scheme} run: {self.schedule.total_rounds} rounds "
            f"({self.schedule.rounds_per_epoch} per epoch), d={d}, momentum={cfg.momentum}"
        )

        with WorkerPool(self.runtime.threads) as pool:
            was_compressing = False
            for t in range(self.schedule.total_rounds):
                started = time.perf_counter()
                state.round = t
                epoch = self.schedule.epoch_of(t)
                lr = lr_schedule(epoch, cfg)
                compressing = self.comp is not None and epoch >= cfg.warmup_epochs
                if compressing and not was_compressing:
                    logger.info(f"Round {t}: compression starts (epoch {epoch:.3f})")
                was_compressing = compressing

                state.check_client_consistency()
                m_global = self._global_mask(state) if compressing else None
                try:
                    results = pool.map_clients(
                        lambda c: self._client_round(c, state, lr, compressing, m_global), range(n)
                    )
                    broadcast = aggregate([r.received for r in results])
                    trace_params = list(state.client_params)
                    old_errors = list(state.errors)
                    self._apply_broadcast(state, broadcast, lr)
                    train_loss = loss(self.exp.model.with_params(state.params), self.exp.train, cfg.weight_decay)
                except NonFiniteValueError as e:
                    logger.error(f"Round {t} produced non-finite values: {e}")
                    raise DivergedError(f"diverged at round {t}: {e}", round=t) from e
                if not math.isfinite(train_loss):
                    logger.error(f"Round {t} produced a non-finite loss")
                    raise DivergedError(f"diverged at round {t}: loss is {train_loss}", round=t)
                state.errors = [r.error for r in results]

                bits = [r.bits for r in results]
                support = d
                if compressing:
                    union = results[0].sent.mask
                    for r in results[1:]:
                        union = mask_union(union, r.sent.mask)
                    support = union.popcount
                record = MetricsRecord(
                    round=t,
                    epoch=self.schedule.epoch_of(t + 1),
                    lr=lr,
                    train_loss=train_loss,
                    test_accuracy=accuracy(self.exp.model.with_params(state.params), self.exp.test),
                    uplink_bits_total=sum(bits),
                    uplink_bits_per_param_per_iter=sum(bits) / (n * d * cfg.local_steps),
                    downlink_support_size=support,
                    wall_ms=(time.perf_counter() - started) * 1000.0 if self.runtime.record_wall_time else 0.0,
                )
                log.append(record)
                logger.debug(
                    f"Round {t}: lr={lr:.5g} loss={train_loss:.5f} acc={record.test_accuracy:.4f} "
                    f"bits={record.uplink_bits_total} support={support}"
                )
                if self.on_round is not None:
                    self.on_round(
                        RoundTrace(
                            round=t,
                            epoch=epoch,
                            lr=lr,
                            compressed=compressing,
                            global_mask=m_global,
                            client_params=trace_params,
                            updates=[r.update for r in results],
                            sent=[r.sent for r in results],
                            old_errors=old_errors,
                            new_errors=list(state.errors),
                            uplink_bits=bits,
                            broadcast=broadcast,
                            params=state.params,
                            momenta=list(state.momenta) if state.momenta is not None else None,
                            downlink_support_size=support,
                        )
                    )

        log.final_params = state.params
        logger.info(
            f"Finished {cfg.scheme} run: loss={log.last.train_loss:.5f} accuracy={log.last.test_accuracy:.4f}"
        )
        return log

    def _apply_broadcast(self, state: RoundState, broadcast: ParamVector, lr: float) -> None:
        """Every client (and the PS copy) applies the same broadcast"""
        state.last_broadcast = broadcast
        if not self.momentum_mode:
            state.params = state.params + broadcast
            state.client_params = [theta + broadcast for theta in state.client_params]
            return
        beta = self.cfg.momentum
        state.momenta = [w * beta + broadcast for w in state.momenta]
        state.client_params = [theta - w * lr for theta, w in zip(state.client_params, state.momenta)]
        state.params = state.params - state.momenta[0] * lr


def _run(
    cfg: ExperimentConfig,
    momentum_mode: bool,
    runtime: Optional[RuntimeConfig],
    on_round: Optional[RoundCallback],
    experiment: Optional[Experiment],
) -> MetricsLog:
    exp = experiment if experiment is not None else build_experiment(cfg)
    if exp.cfg is not cfg:
        exp = Experiment(cfg, exp.train, exp.test, exp.shards, exp.model)
    if len(exp.shards) != cfg.num_clients:
        raise ConfigurationError(f"{len(exp.shards)} shards for {cfg.num_clients} clients", ["num_clients"])
    return _Loop(exp, runtime or RuntimeConfig(), momentum_mode, on_round).run()


def run_fedavg(
    cfg: ExperimentConfig,
    runtime: Optional[RuntimeConfig] = None,
    on_round: Optional[RoundCallback] = None,
    experiment: Optional[Experiment] = None,
) -> MetricsLog:
    """
    Dense federated averaging: every round each client runs H local steps and the
    PS adds the mean model difference to the global model.

    Raises:
        ConfigurationError: If the config is not a dense run without momentum
    """
    if cfg.scheme != "dense" or cfg.momentum > 0:
        raise ConfigurationError("run_fedavg needs scheme=dense and momentum=0", ["scheme"])
    return _run(cfg, False, runtime, on_round, experiment)


def run_tcs(
    cfg: ExperimentConfig,
    runtime: Optional[RuntimeConfig] = None,
    on_round: Optional[RoundCallback] = None,
    experiment: Optional[Experiment] = None,
) -> MetricsLog:
    """
    Sparsified training with error feedback (tcs, or the topk / randk baselines).

    Each round every client derives the global mask from the last broadcast, runs H
    local steps, adds its residual, keeps the masked entries for the uplink and
    carries the rest to the next round. Rounds inside the warmup window are dense.

    Raises:
        ConfigurationError: On a dense scheme, momentum, or infeasible K / floors
        DivergedError: If the loss or the model becomes non-finite
    """
    if cfg.scheme == "dense" or cfg.momentum > 0:
        raise ConfigurationError("run_tcs needs a compressed scheme and momentum=0", ["scheme"])
    return _run(cfg, False, runtime, on_round, experiment)


def run_tcs_momentum(
    cfg: ExperimentConfig,
    runtime: Optional[RuntimeConfig] = None,
    on_round: Optional[RoundCallback] = None,
    experiment: Optional[Experiment] = None,
) -> MetricsLog:
    """
    FedSGD with global momentum.

    Clients exchange (compressed) gradients. Every client applies the aggregate
    ``g`` as ``w <- beta*w + g`` then ``theta <- theta - lr*w``, so momentum
    vectors stay identical across clients. The global mask comes from the previous
    aggregate gradient. With scheme=dense this is the uncompressed momentum
    baseline.

    Raises:
        ConfigurationError: If local_steps != 1
    """
    if cfg.local_steps != 1:
        raise ConfigurationError("global momentum requires local_steps=1", ["local_steps"])
    return _run(cfg, True, runtime, on_round, experiment)


def run_experiment(
    cfg: ExperimentConfig,
    runtime: Optional[RuntimeConfig] = None,
    on_round: Optional[RoundCallback] = None,
    experiment: Optional[Experiment] = None,
) -> MetricsLog:
    """Dispatch to the loop the config describes"""
    if cfg.momentum > 0:
        return run_tcs_momentum(cfg, runtime, on_round, experiment)
    if cfg.scheme == "dense":
        return run_fedavg(cfg, runtime, on_round, experiment)
    return run_tcs(cfg, runtime, on_round, experiment)
