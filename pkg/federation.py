"""
Federated sCT Simulator - Federation

Synchronous cross-silo rounds with full participation:

    broadcast -> local training on every client -> server aggregation -> evaluation

Server rules: FedAvg (sample-weighted average), FedAvgM (server momentum on the
averaged client delta) and FedYogi (adaptive server step). FedProx adds
``(mu / 2) * ||w - w_t||^2`` to each client's objective; FedBN keeps
batch-norm entries out of the broadcast while the server still aggregates them.

Clients train concurrently in a thread pool. Every random stream is derived from
``(seed, client_id, round)``, and aggregation runs in ascending client order, so
results do not depend on which client finishes first.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import autograd as ag
import config
import metrics
import utils
from metrics import PatientMetrics
from phantom import generate_centre
from preprocess import PreparedPatient, preprocess_pair
from schemas import (
    ExperimentConfig,
    FederationConfig,
    ParadigmConfig,
    StrategyConfig,
    TrainingConfig,
    UNetConfig,
    paradigm_presets,
    strategy_label,
    strategy_presets,
)
from slicing import PLANES, SliceRecord, extract_slices, make_epoch_batches, predict_volume, single_model_map
from unet import NamedParameterSet, UNet, build_unet
from volume import Plane

logger = utils.logger

__all__ = [
    "FederationError",
    "ClientData",
    "FederatedDataset",
    "ClientUpdate",
    "ServerState",
    "RoundRecord",
    "ExperimentResult",
    "build_federated_dataset",
    "prepare_cohort",
    "broadcast",
    "local_train",
    "aggregate_fedavg",
    "aggregate_fedavgm",
    "aggregate_fedyogi",
    "aggregate",
    "evaluate_patients",
    "run_experiment",
    "compare_strategies",
    "compare_paradigms",
    "track_names",
    "track_model_config",
    "client_training_config",
]

MAIN_TRACK = "main"


class FederationError(RuntimeError):
    """A client failed; carries the round and client that failed."""

    def __init__(self, message: str, round_index: int, client_id: int):
        super().__init__(f"round {round_index}, client {client_id}: {message}")
        self.round_index = round_index
        self.client_id = client_id


# ============================================================================
# Data
# ============================================================================


@dataclass
class ClientData:
    client_id: int
    centre_id: str
    train_records: List[SliceRecord]
    val_patients: List[PreparedPatient]
    test_patients: List[PreparedPatient]


@dataclass
class FederatedDataset:
    clients: List[ClientData]
    unseen_centre_id: str
    unseen_patients: List[PreparedPatient]


def prepare_cohort(spec, cfg: ExperimentConfig) -> Tuple[List[PreparedPatient], List[int], List[int], List[int]]:
    """Generate and preprocess one centre; returns patients and the train/val/test index lists."""
    cohort = generate_centre(spec, cfg.seed)
    prepared = [
        preprocess_pair(pair.mri, pair.ct, pair.mask, cfg.preprocess, patient_id=pair.patient_id)
        for pair in cohort.pairs
    ]
    return prepared, cohort.train, cohort.val, cohort.test


def _client_data(
    client_id: int,
    centre_id: str,
    patients: Sequence[PreparedPatient],
    train: Sequence[int],
    val: Sequence[int],
    test: Sequence[int],
    training: TrainingConfig,
) -> ClientData:
    records: List[SliceRecord] = []
    for index in train:
        for plane in PLANES:
            records.extend(extract_slices(patients[index], plane, stride=training.slice_stride))
    return ClientData(
        client_id=client_id,
        centre_id=centre_id,
        train_records=records,
        val_patients=[patients[i] for i in val],
        test_patients=[patients[i] for i in test],
    )


def build_federated_dataset(
    cfg: ExperimentConfig,
    cohorts: Optional[Dict[str, Tuple[List[PreparedPatient], List[int], List[int], List[int]]]] = None,
) -> FederatedDataset:
    """
    Build client datasets and the unseen evaluation set.

    Args:
        cfg: Experiment configuration
        cohorts: Already preprocessed cohorts keyed by centre id; generated from
            ``cfg`` when omitted
    """
    cohorts = dict(cohorts or {})
    for spec in list(cfg.centres) + [cfg.unseen]:
        if spec.centre_id not in cohorts:
            cohorts[spec.centre_id] = prepare_cohort(spec, cfg)

    clients = []
    for client_id, spec in enumerate(cfg.centres):
        patients, train, val, test = cohorts[spec.centre_id]
        clients.append(_client_data(client_id, spec.centre_id, patients, train, val, test, cfg.training))
        logger.info(
            "Client %d (centre %s): %d training slices, %d validation and %d test patients",
            client_id,
            spec.centre_id,
            len(clients[-1].train_records),
            len(val),
            len(test),
        )
    unseen_patients = cohorts[cfg.unseen.centre_id][0]
    return FederatedDataset(clients=clients, unseen_centre_id=cfg.unseen.centre_id, unseen_patients=unseen_patients)


# ============================================================================
# Messages and Server State
# ============================================================================


@dataclass
class ClientUpdate:
    client_id: int
    params: NamedParameterSet
    n_k: int
    num_steps: int = 0
    loss: float = math.nan
    prox_loss: float = 0.0

    def __post_init__(self) -> None:
        if self.n_k <= 0:
            raise ValueError(f"client {self.client_id} reported n_k = {self.n_k}")


@dataclass
class ServerState:
    """Global parameters plus the server optimizer's auxiliary state (trainable entries only)."""

    global_params: NamedParameterSet
    momentum: Optional[NamedParameterSet] = None
    yogi_m: Optional[NamedParameterSet] = None
    yogi_v: Optional[NamedParameterSet] = None
    round_index: int = 0

    @classmethod
    def initial(cls, params: NamedParameterSet, strategy: StrategyConfig) -> "ServerState":
        trainable = params.filter(lambda _name, tag: tag.trainable)
        zeros = NamedParameterSet((n, np.zeros(v.shape, dtype=np.float64), t) for n, v, t in trainable)
        state = cls(global_params=params)
        if strategy.base == "fedavgm":
            state.momentum = zeros
        elif strategy.base == "fedyogi":
            tau_sq = strategy.fedyogi.tau**2
            state.yogi_m = zeros
            state.yogi_v = NamedParameterSet(
                (n, np.full(v.shape, tau_sq, dtype=np.float64), t) for n, v, t in trainable
            )
        return state


def broadcast(server: ServerState, fedbn: bool) -> NamedParameterSet:
    """Parameters sent to clients; batch-norm entries are withheld under FedBN."""
    if fedbn:
        return server.global_params.without_batchnorm()
    return server.global_params


# ============================================================================
# Local Training
# ============================================================================


def local_train(
    client_id: int,
    model: UNet,
    received: NamedParameterSet,
    records: Sequence[SliceRecord],
    paradigm: ParadigmConfig,
    training: TrainingConfig,
    epochs: int,
    prox_mu: float,
    seed: int,
) -> ClientUpdate:
    """
    Load the broadcast into ``model`` and train it locally.

    Entries missing from ``received`` (batch norm under FedBN) keep the
    client's own values. The loaded state is the proximal anchor ``w_t``. Each
    epoch runs Adam on the L1 loss, plus the proximal gradient when
    ``prox_mu > 0``.

    Returns:
        ClientUpdate with the full parameter set (running statistics included)
        and ``n_k`` = samples per epoch

    Raises:
        FloatingPointError: on a non-finite loss or gradient
    """
    if not records:
        raise ValueError(f"client {client_id} has no training records")
    model.unflatten(received, partial=True)
    anchor = model.flatten()
    optimizer = ag.Adam(
        model.named_parameters(), lr=training.lr, beta1=training.beta1, beta2=training.beta2, eps=training.eps
    )

    steps = 0
    loss_total = 0.0
    prox_total = 0.0
    n_k = 0
    for epoch in range(epochs):
        batches = make_epoch_batches(
            records,
            paradigm,
            training.batch_size,
            seed=utils.derive_seed(seed, "epoch", epoch),
            augmentation=training.augmentation,
            rotation_degrees=training.rotation_degrees,
            translation_fraction=training.translation_fraction,
        )
        if epoch == 0:
            n_k = sum(len(b) for b in batches)
        for batch in batches:
            optimizer.zero_grad()
            pred = model.forward(batch.mri, train=True)
            loss, grad = ag.l1_loss(pred, batch.ct.astype(pred.dtype, copy=False))
            model.backward(grad)
            prox = 0.0
            if prox_mu > 0:
                for name, param in optimizer.params.items():
                    value, prox_grad = ag.prox_penalty(param.value, anchor[name], prox_mu)
                    param.accumulate(prox_grad.astype(param.value.dtype, copy=False))
                    prox += value
            if not math.isfinite(loss + prox):
                raise FloatingPointError(f"non-finite loss {loss + prox} at step {steps}")
            optimizer.step()
            steps += 1
            loss_total += loss
            prox_total += prox

    update = ClientUpdate(
        client_id=client_id,
        params=model.flatten(),
        n_k=n_k,
        num_steps=steps,
        loss=loss_total / steps,
        prox_loss=prox_total / steps,
    )
    logger.debug(
        "Client %d: %d steps, mean L1 %.5f, mean prox %.5f, n_k %d",
        client_id,
        steps,
        update.loss,
        update.prox_loss,
        n_k,
    )
    return update


# ============================================================================
# Aggregation
# ============================================================================


def aggregate_fedavg(updates: Sequence[ClientUpdate]) -> NamedParameterSet:
    """
    Sample-weighted average ``sum_k (n_k / n) * w_k`` in ascending client order.

    Accumulates in float64 and casts back to each entry's dtype.

    Raises:
        ValueError: on no updates or mismatched parameter schemas
    """
    if not updates:
        raise ValueError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    reference = ordered[0].params
    for update in ordered[1:]:
        update.params.check_same_schema(reference)
    n = sum(u.n_k for u in ordered)

    averaged = []
    for name, value, tag in reference:
        acc = np.zeros(value.shape, dtype=np.float64)
        for update in ordered:
            acc += (update.n_k / n) * update.params[name].astype(np.float64)
        averaged.append((name, acc.astype(value.dtype), tag))
    return NamedParameterSet(averaged)


def aggregate_fedavgm(updates: Sequence[ClientUpdate], state: ServerState, beta: float, eta_s: float) -> ServerState:
    """
    Server momentum on the client delta ``d = w_t - avg``.

    ``v' = beta * v + d`` and ``w' = w_t - eta_s * v'``, evaluated as
    ``avg - eta_s * beta * v + (1 - eta_s) * d`` so that ``beta = 0, eta_s = 1``
    returns the FedAvg result bit for bit. Running statistics take the average.
    """
    avg = aggregate_fedavg(updates)
    if state.momentum is None:
        raise ValueError("FedAvgM state has no momentum buffer")
    new_values: Dict[str, np.ndarray] = {}
    new_momentum = []
    for name, momentum, tag in state.momentum:
        w_t = state.global_params[name].astype(np.float64)
        mean = avg[name].astype(np.float64)
        delta = w_t - mean
        new_momentum.append((name, beta * momentum + delta, tag))
        new_values[name] = (mean - eta_s * beta * momentum + (1.0 - eta_s) * delta).astype(avg[name].dtype)
    return ServerState(
        global_params=avg.with_values(new_values),
        momentum=NamedParameterSet(new_momentum),
        round_index=state.round_index + 1,
    )


def aggregate_fedyogi(
    updates: Sequence[ClientUpdate], state: ServerState, eta: float, beta1: float, beta2: float, tau: float
) -> ServerState:
    """
    Yogi server step on ``d = avg - w_t``.

    ``m' = beta1 * m + (1 - beta1) * d``;
    ``v' = v - (1 - beta2) * d^2 * sign(v - d^2)``;
    ``w' = w_t + eta * m' / (sqrt(v') + tau)``. Running statistics take the average.
    """
    avg = aggregate_fedavg(updates)
    if state.yogi_m is None or state.yogi_v is None:
        raise ValueError("FedYogi state is not initialized")
    new_values: Dict[str, np.ndarray] = {}
    new_m = []
    new_v = []
    for name, m, tag in state.yogi_m:
        v = state.yogi_v[name]
        w_t = state.global_params[name].astype(np.float64)
        delta = avg[name].astype(np.float64) - w_t
        delta_sq = delta * delta
        m_next = beta1 * m + (1.0 - beta1) * delta
        v_next = v - (1.0 - beta2) * delta_sq * np.sign(v - delta_sq)
        new_m.append((name, m_next, tag))
        new_v.append((name, v_next, tag))
        new_values[name] = (w_t + eta * m_next / (np.sqrt(v_next) + tau)).astype(avg[name].dtype)
    return ServerState(
        global_params=avg.with_values(new_values),
        yogi_m=NamedParameterSet(new_m),
        yogi_v=NamedParameterSet(new_v),
        round_index=state.round_index + 1,
    )


def aggregate(updates: Sequence[ClientUpdate], state: ServerState, strategy: StrategyConfig) -> ServerState:
    """Apply the strategy's server rule and advance the round counter."""
    if strategy.base == "fedavgm":
        return aggregate_fedavgm(updates, state, strategy.fedavgm.beta, strategy.fedavgm.eta_s)
    if strategy.base == "fedyogi":
        p = strategy.fedyogi
        return aggregate_fedyogi(updates, state, p.eta, p.beta1, p.beta2, p.tau)
    return ServerState(global_params=aggregate_fedavg(updates), round_index=state.round_index + 1)


# ============================================================================
# Records
# ============================================================================


@dataclass
class RoundRecord:
    """Global-model metrics after one round (round 0 = initialized model)."""

    round_index: int
    strategy: str
    client_loss: Dict[str, float]
    validation: Dict[str, List[PatientMetrics]]
    unseen_centre_id: str
    unseen: List[PatientMetrics]

    def unseen_median_mae(self) -> float:
        return metrics.summarize(self.unseen)["mae"].median

    def rows(self) -> List[Dict[str, object]]:
        """One row per centre: median metrics and that centre's mean training loss."""
        out = []
        cohorts = list(self.validation.items()) + [(self.unseen_centre_id, self.unseen)]
        for centre_id, cohort in cohorts:
            summary = metrics.summarize(cohort)
            out.append(
                {
                    "round_index": self.round_index,
                    "centre_id": centre_id,
                    "mae": summary["mae"].median,
                    "ssim": summary["ssim"].median,
                    "psnr": summary["psnr"].median,
                    "loss": self.client_loss.get(centre_id),
                }
            )
        return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: List[RoundRecord]
    states: Dict[str, ServerState]
    final_test: Dict[str, List[PatientMetrics]] = field(default_factory=dict)

    @property
    def best_round(self) -> int:
        """Round with the lowest unseen-centre median MAE (earliest on ties)."""
        maes = [r.unseen_median_mae() for r in self.records]
        return self.records[int(np.argmin(maes))].round_index

    @property
    def best_mae(self) -> float:
        return min(r.unseen_median_mae() for r in self.records)

    def global_parameters(self) -> NamedParameterSet:
        """All tracks' global parameters; plane tracks are prefixed ``<plane>/``."""
        if list(self.states) == [MAIN_TRACK]:
            return self.states[MAIN_TRACK].global_params
        return NamedParameterSet(
            (f"{track}/{name}", value, tag)
            for track, state in self.states.items()
            for name, value, tag in state.global_params
        )


# ============================================================================
# Experiment
# ============================================================================


def track_names(paradigm: ParadigmConfig) -> List[str]:
    """One track per plane for 2D+, a single track otherwise."""
    if paradigm.kind == "two_d_plus":
        return [plane.value for plane in PLANES]
    return [MAIN_TRACK]


def track_model_config(cfg: ExperimentConfig) -> UNetConfig:
    """Network shape used by every track (patch-sized input for 2D patches)."""
    if cfg.paradigm.kind == "patches_2d":
        return cfg.model.model_copy(update={"input_size": cfg.paradigm.patch_size})
    return cfg.model


def _track_paradigm(paradigm: ParadigmConfig, track: str) -> ParadigmConfig:
    if track == MAIN_TRACK:
        return paradigm
    return paradigm.model_copy(update={"plane": Plane(track)})


def split_tracks(params: NamedParameterSet, tracks: Sequence[str]) -> Dict[str, NamedParameterSet]:
    """Inverse of :meth:`ExperimentResult.global_parameters`."""
    if list(tracks) == [MAIN_TRACK]:
        return {MAIN_TRACK: params}
    out = {}
    for track in tracks:
        prefix = f"{track}/"
        out[track] = NamedParameterSet((n[len(prefix) :], v, t) for n, v, t in params if n.startswith(prefix))
    return out


def models_for_evaluation(
    cfg: ExperimentConfig, params_by_track: Dict[str, NamedParameterSet]
) -> Dict[Plane, UNet]:
    """Load track parameters into fresh networks keyed by the plane each predicts."""
    model_cfg = track_model_config(cfg)
    models: Dict[str, UNet] = {}
    for track, params in params_by_track.items():
        model = build_unet(model_cfg, seed=0, bn_momentum=cfg.training.bn_momentum, bn_eps=cfg.training.bn_eps)
        models[track] = model.unflatten(params)
    if MAIN_TRACK in models:
        return single_model_map(models[MAIN_TRACK])
    return {Plane(track): model for track, model in models.items()}


def evaluate_patients(
    models: Dict[Plane, UNet], patients: Sequence[PreparedPatient], cfg: ExperimentConfig
) -> List[PatientMetrics]:
    """Predict each patient's CT and score it against the ground truth in HU."""
    results = []
    for patient in patients:
        sct = predict_volume(models, patient.mri.data, cfg.paradigm)
        results.append(metrics.evaluate_patient(patient.patient_id, patient.ct.data, sct, patient.mask, cfg.metrics))
    return results


def _evaluate_round(
    round_index: int,
    cfg: ExperimentConfig,
    dataset: FederatedDataset,
    states: Dict[str, ServerState],
    client_loss: Dict[str, float],
) -> RoundRecord:
    models = models_for_evaluation(cfg, {track: s.global_params for track, s in states.items()})
    validation = {c.centre_id: evaluate_patients(models, c.val_patients, cfg) for c in dataset.clients}
    unseen = evaluate_patients(models, dataset.unseen_patients, cfg)
    record = RoundRecord(
        round_index=round_index,
        strategy=strategy_label(cfg.federation.strategy),
        client_loss=client_loss,
        validation=validation,
        unseen_centre_id=dataset.unseen_centre_id,
        unseen=unseen,
    )
    logger.info(
        "Round %d/%d: unseen centre %s median MAE %.1f HU",
        round_index,
        cfg.federation.rounds,
        dataset.unseen_centre_id,
        record.unseen_median_mae(),
    )
    return record


def client_training_config(cfg: ExperimentConfig) -> TrainingConfig:
    """Client optimizer settings; FedYogi's ``eta_l`` overrides the learning rate when set."""
    strategy = cfg.federation.strategy
    if strategy.base == "fedyogi" and strategy.fedyogi.eta_l is not None:
        return cfg.training.model_copy(update={"lr": strategy.fedyogi.eta_l})
    return cfg.training


def _client_round(
    client: ClientData,
    local_models: Dict[str, UNet],
    payloads: Dict[str, NamedParameterSet],
    cfg: ExperimentConfig,
    round_index: int,
) -> Dict[str, ClientUpdate]:
    fed = cfg.federation
    updates = {}
    for track, model in local_models.items():
        parts: Tuple[object, ...] = (fed.seed, client.client_id, round_index)
        if track != MAIN_TRACK:
            parts += (track,)
        updates[track] = local_train(
            client.client_id,
            model,
            payloads[track],
            client.train_records,
            _track_paradigm(cfg.paradigm, track),
            client_training_config(cfg),
            fed.local_epochs,
            fed.strategy.prox_mu,
            seed=utils.derive_seed(*parts),
        )
    return updates


def run_experiment(
    cfg: ExperimentConfig,
    dataset: Optional[FederatedDataset] = None,
    on_round: Optional[Callable[[RoundRecord], None]] = None,
) -> ExperimentResult:
    """
    Run all federation rounds and evaluate the global model after each.

    Args:
        cfg: Experiment configuration
        dataset: Prebuilt client data; built from ``cfg`` when omitted
        on_round: Called with each RoundRecord as it completes

    Raises:
        FederationError: when a client fails, naming the round and client
    """
    dataset = dataset or build_federated_dataset(cfg)
    fed: FederationConfig = cfg.federation
    strategy = fed.strategy
    tracks = track_names(cfg.paradigm)
    model_cfg = track_model_config(cfg)

    def fresh_model(track: str) -> UNet:
        return build_unet(
            model_cfg,
            seed=utils.derive_seed(fed.seed, "init", track),
            bn_momentum=cfg.training.bn_momentum,
            bn_eps=cfg.training.bn_eps,
        )

    states = {track: ServerState.initial(fresh_model(track).flatten(), strategy) for track in tracks}
    local_models = {c.client_id: {track: fresh_model(track) for track in tracks} for c in dataset.clients}
    label = strategy_label(strategy)
    logger.info(
        "Federation: %d clients, %d rounds, %s, paradigm %s", fed.num_clients, fed.rounds, label, cfg.paradigm.kind
    )

    records = [_evaluate_round(0, cfg, dataset, states, {})]
    if on_round:
        on_round(records[-1])

    workers = min(config.MAX_CLIENT_WORKERS, len(dataset.clients))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for round_index in range(1, fed.rounds + 1):
            payloads = {track: broadcast(states[track], strategy.fedbn) for track in tracks}
            futures = {
                c.client_id: pool.submit(_client_round, c, local_models[c.client_id], payloads, cfg, round_index)
                for c in dataset.clients
            }
            results: Dict[int, Dict[str, ClientUpdate]] = {}
            for client_id in sorted(futures):
                try:
                    results[client_id] = futures[client_id].result()
                except Exception as e:
                    for other in futures.values():
                        other.cancel()
                    raise FederationError(str(e), round_index, client_id) from e

            for track in tracks:
                states[track] = aggregate([results[cid][track] for cid in sorted(results)], states[track], strategy)
            client_loss = {
                c.centre_id: float(np.mean([u.loss for u in results[c.client_id].values()])) for c in dataset.clients
            }
            records.append(_evaluate_round(round_index, cfg, dataset, states, client_loss))
            if on_round:
                on_round(records[-1])

    result = ExperimentResult(config=cfg, records=records, states=states)
    models = models_for_evaluation(cfg, {track: s.global_params for track, s in states.items()})
    result.final_test = {c.centre_id: evaluate_patients(models, c.test_patients, cfg) for c in dataset.clients}
    logger.info("Best round %d: unseen median MAE %.1f HU", result.best_round, result.best_mae)
    return result


# ============================================================================
# Comparisons
# ============================================================================


def _repeat_config(cfg: ExperimentConfig, repeat: int, **federation_updates) -> ExperimentConfig:
    fed = cfg.federation.model_copy(
        update={"seed": utils.derive_seed(cfg.federation.seed, "repeat", repeat), **federation_updates}
    )
    return cfg.model_copy(update={"federation": fed})


def compare_strategies(
    cfg: ExperimentConfig,
    repeats: int = 5,
    strategies: Optional[Sequence[StrategyConfig]] = None,
    local_epochs: Optional[int] = None,
    dataset: Optional[FederatedDataset] = None,
) -> List[Dict[str, object]]:
    """
    Run each strategy ``repeats`` times on the same cohorts with derived seeds.

    Returns:
        One row per strategy: label, per-repeat best rounds and best MAEs, and
        their mean and population standard deviation
    """
    dataset = dataset or build_federated_dataset(cfg)
    strategies = list(strategies or strategy_presets(prox_mu=cfg.federation.strategy.prox_mu or 3.0))
    updates = {} if local_epochs is None else {"local_epochs": local_epochs}
    rows = []
    for strategy in strategies:
        rounds: List[int] = []
        maes: List[float] = []
        for repeat in range(repeats):
            run_cfg = _repeat_config(cfg, repeat, strategy=strategy, **updates)
            result = run_experiment(run_cfg, dataset)
            rounds.append(result.best_round)
            maes.append(result.best_mae)
        rows.append(
            {
                "strategy": strategy_label(strategy),
                "best_rounds": rounds,
                "best_maes": maes,
                "round_mean": float(np.mean(rounds)),
                "round_std": float(np.std(rounds)),
                "mae_mean": float(np.mean(maes)),
                "mae_std": float(np.std(maes)),
            }
        )
        logger.info(
            "%s: round %.1f +/- %.1f, MAE %.1f +/- %.1f HU",
            rows[-1]["strategy"],
            rows[-1]["round_mean"],
            rows[-1]["round_std"],
            rows[-1]["mae_mean"],
            rows[-1]["mae_std"],
        )
    return rows


def compare_paradigms(
    cfg: ExperimentConfig,
    repeats: int = 5,
    paradigms: Optional[Sequence[ParadigmConfig]] = None,
    dataset: Optional[FederatedDataset] = None,
) -> Tuple[List[Dict[str, object]], int]:
    """
    Train each paradigm under the same budget and compare unseen-centre metrics.

    Returns:
        ``(rows, wins)``: one row per paradigm with the unseen-centre median
        MAE/SSIM/PSNR at the best round averaged over repeats, and the number of
        repeats in which Random Multi-2D reached an MAE no worse than Multi-2D

    Raises:
        ValidationError: if a paradigm does not fit the configured network
    """
    dataset = dataset or build_federated_dataset(cfg)
    paradigms = list(paradigms or paradigm_presets(cfg.paradigm.patch_size))
    best: Dict[str, List[Dict[str, float]]] = {}
    for paradigm in paradigms:
        paradigm_cfg = ExperimentConfig.model_validate({**cfg.model_dump(), "paradigm": paradigm.model_dump()})
        runs = []
        for repeat in range(repeats):
            run_cfg = _repeat_config(paradigm_cfg, repeat)
            result = run_experiment(run_cfg, dataset)
            record = next(r for r in result.records if r.round_index == result.best_round)
            summary = metrics.summarize(record.unseen)
            runs.append({name: summary[name].median for name in ("mae", "ssim", "psnr")})
        best[paradigm.kind] = runs

    rows = []
    for kind, runs in best.items():
        rows.append(
            {
                "paradigm": kind,
                "mae": float(np.mean([r["mae"] for r in runs])),
                "ssim": float(np.mean([r["ssim"] for r in runs])),
                "psnr": float(np.mean([r["psnr"] for r in runs])),
                "best_maes": [r["mae"] for r in runs],
            }
        )
    wins = 0
    if "random_multi_2d" in best and "multi_2d" in best:
        wins = sum(
            1 for a, b in zip(best["random_multi_2d"], best["multi_2d"]) if a["mae"] <= b["mae"]
        )
    return rows, wins
