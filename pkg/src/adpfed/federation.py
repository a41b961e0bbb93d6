"""Round orchestration: broadcast, local training, sanitization, weighted
aggregation, validation-based model selection and full experiment runs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as datamod
from . import metrics, model, params, privacy
from . import rng as rngs

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e6
STATIC_WARMUP_ROUNDS = 5


@dataclass
class GlobalModelState:
    w_current: np.ndarray
    round: int = 0
    w_best: np.ndarray | None = None
    best_val_dice: float = -math.inf
    best_round: int = -1

    @classmethod
    def initial(cls, w0) -> "GlobalModelState":
        w0 = params.as_params(w0)
        return cls(w_current=w0, round=0, w_best=w0)


@dataclass
class ClientUpdate:
    site_id: int
    delta: np.ndarray
    n_samples: int
    trace: privacy.SanitizationTrace

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"client {self.site_id} reports n_k={self.n_samples}")


@dataclass
class ClientRecord:
    site_id: int
    local_loss: float
    gamma: float
    pre_clip_norm: float
    post_clip_norm: float
    clip_factor: float
    noise_scale_b: float
    degenerate: bool
    val_dice: float


@dataclass
class RoundRecord:
    round: int
    lr: float
    val_dice: float
    best_val_dice: float
    clients: list[ClientRecord] = field(default_factory=list)


@dataclass
class Client:
    """A site plus its precomputed features and persistent optimizer state."""

    site_id: int
    n_samples: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    opt_state: model.OptimizerState

    @classmethod
    def from_site(cls, site: datamod.ClientSite, d: int) -> "Client":
        if site.n_train < 1:
            raise ValueError(f"site {site.site_id} has an empty training shard")
        return cls(
            site_id=site.site_id,
            n_samples=site.n_train,
            train_x=_feats(site.train),
            train_y=_targets(site.train),
            val_x=_feats(site.val),
            val_y=_targets(site.val),
            opt_state=model.OptimizerState.zeros(d),
        )


def _feats(samples) -> np.ndarray:
    if not samples:
        return np.zeros((0, 0, model.N_FEATURES))
    return model.batch_features([s.image for s in samples])


def _targets(samples) -> np.ndarray:
    if not samples:
        return np.zeros((0, 0))
    return np.stack([s.mask.ravel().astype(np.float64) for s in samples])


def compute_update(w_local, w_global) -> np.ndarray:
    return params.subtract(w_local, w_global)


def aggregate(updates: list[ClientUpdate], w_global) -> np.ndarray:
    """w + sum_k (n_k / N) * delta_k with exact (fsum) accumulation.

    Clients are visited in site-id order and each coordinate is summed with
    ``math.fsum``, so the result does not depend on list order.
    """
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    w_global = np.asarray(w_global, dtype=np.float64)
    ordered = sorted(updates, key=lambda u: u.site_id)
    for u in ordered:
        params.check_same_length(w_global, u.delta)
    total = sum(u.n_samples for u in ordered)
    weighted = np.stack([(u.n_samples / total) * np.asarray(u.delta) for u in ordered])
    step = np.array([math.fsum(col) for col in weighted.T])
    return params.add(w_global, step)


def dice_scores(w, feats, targets, hidden: int, threshold: float = 0.5) -> list[float]:
    if feats.shape[0] == 0:
        return []
    prob = model.predict_features(w, feats, hidden)
    pred = prob > threshold
    return [metrics.dice_coefficient(p, t) for p, t in zip(pred, targets)]


def validation_dice(w, clients: list[Client], hidden: int) -> tuple[float, dict[int, float]]:
    """Unweighted mean over sites of each site's mean validation Dice.

    Sites without validation samples are skipped; if no site has any, the
    training shards stand in so model selection still has a signal.
    """
    per_site = {}
    for c in clients:
        scores = dice_scores(w, c.val_x, c.val_y, hidden)
        if scores:
            per_site[c.site_id] = float(np.mean(scores))
    if not per_site:
        for c in clients:
            per_site[c.site_id] = float(np.mean(dice_scores(w, c.train_x, c.train_y, hidden)))
    return float(np.mean(list(per_site.values()))), per_site


@dataclass
class TrainSettings:
    total_rounds: int
    local: model.LocalTrainConfig = field(default_factory=model.LocalTrainConfig)
    reset_optimizer: bool = False


def run_round(
    state: GlobalModelState,
    clients: list[Client],
    priv: privacy.PrivacyConfig,
    train: TrainSettings,
    seed: int,
) -> tuple[GlobalModelState, RoundRecord]:
    """One communication round. Client optimizer states are advanced in place."""
    if not clients:
        raise ValueError("a round needs at least one client")
    t = state.round
    lr = model.cosine_lr(t, train.total_rounds, train.local.adam.lr)
    w_t = state.w_current
    d = w_t.shape[0]

    updates, partial = [], []
    for c in sorted(clients, key=lambda c: c.site_id):
        opt = model.OptimizerState.zeros(d) if train.reset_optimizer else c.opt_state
        w_k, c.opt_state, loss = model.local_train(
            w_t, c.train_x, c.train_y, train.local, opt, lr,
            rngs.stream(seed, rngs.SHUFFLE, t, c.site_id),
        )
        delta = compute_update(w_k, w_t)
        noisy, trace = privacy.sanitize(delta, priv, rngs.stream(seed, rngs.NOISE, t, c.site_id))
        if trace.degenerate:
            log.warning("round %d client %d: degenerate all-zero update", t, c.site_id)
        updates.append(ClientUpdate(c.site_id, noisy, c.n_samples, trace))
        partial.append((c.site_id, loss, trace))

    w_next = aggregate(updates, w_t)
    val, per_site = validation_dice(w_next, clients, train.local.hidden)

    new_state = replace(state, w_current=w_next, round=t + 1)
    if val > state.best_val_dice:
        new_state.w_best = w_next
        new_state.best_val_dice = val
        new_state.best_round = t + 1

    record = RoundRecord(round=t + 1, lr=lr, val_dice=val, best_val_dice=new_state.best_val_dice)
    for site_id, loss, tr in partial:
        record.clients.append(
            ClientRecord(
                site_id=site_id, local_loss=loss, gamma=tr.gamma,
                pre_clip_norm=tr.pre_clip_norm, post_clip_norm=tr.post_clip_norm,
                clip_factor=tr.clip_factor, noise_scale_b=tr.noise_scale_b,
                degenerate=tr.degenerate, val_dice=per_site.get(site_id, float("nan")),
            )
        )
    return new_state, record


@dataclass
class TestReport:
    best: metrics.DiceReport
    latest: metrics.DiceReport
    headline: str = "best"

    @property
    def headline_dice(self) -> float:
        return (self.best if self.headline == "best" else self.latest).mean_across_samples


@dataclass
class ExperimentResult:
    state: GlobalModelState
    records: list[RoundRecord]
    test: TestReport
    status: str
    init_checksum: str
    static_threshold: float | None = None


def build_clients(fed: datamod.Federation, d: int) -> list[Client]:
    return [Client.from_site(s, d) for s in fed.sites]


def calibrate_static_threshold(
    w0, fed: datamod.Federation, train: TrainSettings, seed: int,
    warmup_rounds: int = STATIC_WARMUP_ROUNDS,
) -> float:
    """Median per-client update norm over non-private warm-up rounds.

    The warm-up runs on throwaway clients and its model is discarded, so the
    static run still starts from the shared initial weights.
    """
    d = np.asarray(w0).shape[0]
    clients = build_clients(fed, d)
    warm = replace(train, total_rounds=max(train.total_rounds, warmup_rounds))
    state = GlobalModelState.initial(w0)
    norms = []
    nonprivate = privacy.PrivacyConfig(mode="none")
    for _ in range(warmup_rounds):
        state, rec = run_round(state, clients, nonprivate, warm, seed)
        norms.extend(c.pre_clip_norm for c in rec.clients)
    positive = [n for n in norms if n > 0.0]
    if not positive:
        raise privacy.DegenerateUpdateError("warm-up rounds produced only zero updates")
    return float(np.median(positive))


def run_experiment(
    fed: datamod.Federation,
    w0,
    priv: privacy.PrivacyConfig,
    train: TrainSettings,
    seed: int,
    warmup_rounds: int = STATIC_WARMUP_ROUNDS,
    sample_std: bool = False,
    on_round=None,
) -> ExperimentResult:
    """Run ``train.total_rounds`` rounds and score both saved models on the test set."""
    w0 = params.as_params(w0)
    d = w0.shape[0]
    static_c = None
    if priv.mode == "static" and priv.fixed_threshold is None:
        static_c = calibrate_static_threshold(w0, fed, train, seed, warmup_rounds)
        priv = replace(priv, fixed_threshold=static_c)
    elif priv.mode == "static":
        static_c = priv.fixed_threshold

    clients = build_clients(fed, d)
    state = GlobalModelState.initial(w0)
    records: list[RoundRecord] = []
    status = "ok"
    for _ in range(train.total_rounds):
        state, rec = run_round(state, clients, priv, train, seed)
        records.append(rec)
        if on_round is not None:
            on_round(rec)
        if math.isnan(rec.val_dice) or params.l2_norm(state.w_current) > DIVERGENCE_NORM:
            log.warning("run diverged at round %d", rec.round)
            status = "diverged"
            break

    hidden = train.local.hidden
    test_x = _feats(fed.test)
    test_y = _targets(fed.test)
    best_w = state.w_best if state.w_best is not None else state.w_current
    report = TestReport(
        best=metrics.DiceReport.from_scores(dice_scores(best_w, test_x, test_y, hidden), sample_std),
        latest=metrics.DiceReport.from_scores(
            dice_scores(state.w_current, test_x, test_y, hidden), sample_std
        ),
    )
    return ExperimentResult(state, records, report, status, params.checksum(w0), static_c)
