"""Federated training loop: style-augmented local SGD, FedAvg, traffic ledger."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._rng import make_rng
from .errors import ConfigError
from .metrics import MetricTable, evaluate_model
from .phantom import LabeledVolume
from .segmodel import SegModel, loss_and_grad, model_size_bytes, sgd_step
from .spectral import DEFAULT_BETA, Beta, apply_style
from .stylebank import DEFAULT_CROPS_PER_VOLUME, DEFAULT_Z_BIN, StyleBank, bank_size_bytes, retrieve_style
from .volume import SubVolume, Volume, crop_sub_volume, random_origin, resample_array

log = logging.getLogger(__name__)


class Augmentation(str, Enum):
    NONE = "none"
    A3DFDG = "a3dfdg"
    NO_SLICE_MATCHING = "a3dfdg_no_slice_matching"
    NO_CONTOUR_PRESERVATION = "a3dfdg_no_contour_preservation"


LONG_HORIZON_LR = 0.01
FEW_ROUNDS_LR = 0.001
FEW_ROUNDS = 5


@dataclass
class FederationConfig:
    rounds: int = 5
    local_iters: int = 20
    lr: Optional[float] = None
    batch_size: int = 4
    alpha_range: Tuple[float, float] = (0.0, 1.0)
    beta: Beta = DEFAULT_BETA
    z_bin: float = DEFAULT_Z_BIN
    tau_air: float = -200.0
    augmentation: Augmentation = Augmentation.A3DFDG
    seed: int = 0
    crop_size: Tuple[int, int, int] = (32, 32, 32)
    target_spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    crops_per_volume: int = DEFAULT_CROPS_PER_VOLUME
    eval_every: int = 1
    threads: int = 1

    def __post_init__(self):
        self.augmentation = Augmentation(self.augmentation)
        self.alpha_range = tuple(float(a) for a in self.alpha_range)
        self.beta = tuple(float(b) for b in self.beta)
        self.crop_size = tuple(int(c) for c in self.crop_size)
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.validate()

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_iters < 0:
            raise ConfigError(f"local_iters must be >= 0, got {self.local_iters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        lo, hi = self.alpha_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"alpha_range must be a sub-interval of [0, 1], got {self.alpha_range}")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.eval_every < 1 or self.threads < 1:
            raise ConfigError("eval_every and threads must be >= 1")

    @property
    def effective_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return FEW_ROUNDS_LR if self.rounds <= FEW_ROUNDS else LONG_HORIZON_LR


@dataclass
class ClientData:
    client_id: int
    train: List[LabeledVolume]
    test: List[LabeledVolume] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.train)


def prepare_volume(item: LabeledVolume, provider, target_spacing) -> LabeledVolume:
    """Attach slice-score extent and resample image + labels to the common grid."""
    v = item.volume
    v = replace(v, z_extent=provider.score_extent(v)) if provider is not None else v
    data = resample_array(v.data, v.spacing, target_spacing, order=1)
    labels = resample_array(item.labels, v.spacing, target_spacing, order=0)
    return LabeledVolume(replace(v, data=data, spacing=tuple(target_spacing)), labels)


def prepare_client(client_id, train, test, provider, target_spacing=(1.0, 1.0, 1.0)) -> ClientData:
    return ClientData(
        client_id,
        [prepare_volume(it, provider, target_spacing) for it in train],
        [prepare_volume(it, provider, target_spacing) for it in test],
    )


def sample_crop(client: ClientData, crop_size, rng: np.random.Generator) -> Tuple[SubVolume, np.ndarray]:
    """One random crop and its label block."""
    item = client.train[int(rng.integers(len(client.train)))]
    origin = random_origin(item.volume.shape, crop_size, rng)
    sv = crop_sub_volume(item.volume, origin, crop_size)
    (h0, w0, d0), (H, W, D) = origin, crop_size
    return sv, item.labels[h0:h0 + H, w0:w0 + W, d0:d0 + D]


def augment(sv: SubVolume, client_id: int, bank: StyleBank, cfg: FederationConfig, rng: np.random.Generator) -> SubVolume:
    """Style-mix one crop according to the configured ablation arm."""
    arm = cfg.augmentation
    if arm is Augmentation.NONE:
        return sv
    alpha = float(rng.uniform(*cfg.alpha_range))
    score = None if arm is Augmentation.NO_SLICE_MATCHING else sv.slice_score
    target = retrieve_style(bank, client_id, score, rng)
    tau = None if arm is Augmentation.NO_CONTOUR_PRESERVATION else cfg.tau_air
    return apply_style(sv, target, alpha, cfg.beta, tau)


def check_bank(cfg: FederationConfig, bank: Optional[StyleBank]) -> None:
    """Configuration errors that would otherwise surface mid-training."""
    if cfg.augmentation is Augmentation.NONE:
        return
    if bank is None or len(bank) == 0:
        raise ConfigError(f"arm {cfg.augmentation.value} needs a non-empty style bank")
    if tuple(bank.crop_size) != tuple(cfg.crop_size):
        raise ConfigError(f"bank crop size {bank.crop_size} != configured crop size {cfg.crop_size}")
    if not all(math.isclose(a, b, rel_tol=1e-6) for a, b in zip(bank.beta, cfg.beta)):
        raise ConfigError(f"bank beta {bank.beta} != configured beta {cfg.beta}")


def local_train(
    m: SegModel,
    client: ClientData,
    bank: Optional[StyleBank],
    cfg: FederationConfig,
    round_index: int = 0,
) -> Tuple[SegModel, float]:
    """Run ``cfg.local_iters`` SGD steps on one client; returns model and mean loss.

    Crops and augmentation draw from separate streams keyed by
    ``(seed, round, client)``, so every arm sees the same crops.
    """
    if not client.train:
        raise ConfigError(f"client {client.client_id} has no training volumes")
    check_bank(cfg, bank)
    crop_rng = make_rng(cfg.seed, "crop", round_index, client.client_id)
    aug_rng = make_rng(cfg.seed, "aug", round_index, client.client_id)
    lr = cfg.effective_lr
    losses = []
    for _ in range(cfg.local_iters):
        xs, ys = [], []
        for _ in range(cfg.batch_size):
            sv, labels = sample_crop(client, cfg.crop_size, crop_rng)
            sv = augment(sv, client.client_id, bank, cfg, aug_rng)
            xs.append(sv.data)
            ys.append(labels)
        loss, grad = loss_and_grad(m, np.stack(xs), np.stack(ys))
        m = sgd_step(m, grad, lr)
        losses.append(loss.total)
    return m, float(np.mean(losses)) if losses else float("nan")


def fedavg_weights(data_sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(data_sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ValueError("no client sizes given")
    if np.any(sizes <= 0):
        raise ValueError(f"client dataset sizes must be positive, got {list(data_sizes)}")
    return sizes / sizes.sum()


def fedavg(models: Sequence[SegModel], data_sizes: Sequence[int]) -> SegModel:
    """Dataset-size weighted mean of client parameter vectors."""
    if not models:
        raise ValueError("fedavg needs at least one model")
    if len(models) != len(data_sizes):
        raise ValueError(f"{len(models)} models but {len(data_sizes)} sizes")
    n = models[0].params.size
    if any(m.params.size != n or m.n_classes != models[0].n_classes for m in models):
        raise ValueError("all models must share the same architecture")
    weights = fedavg_weights(data_sizes)
    acc = np.zeros(n, dtype=np.float64)
    for w, m in zip(weights, models):
        acc += w * m.params.astype(np.float64)
    return SegModel(acc.astype(models[0].params.dtype), models[0].n_classes)


@dataclass(frozen=True)
class TrafficLedger:
    model_bytes: int
    rounds: int
    style_bytes: int
    total_bytes: int


def traffic_report(rounds, model_bytes: int, style_bytes: int) -> TrafficLedger:
    """Bytes shared over a run: one model per round plus the style bank once.

    ``rounds`` may be a :class:`FederationConfig` or an integer.
    """
    r = rounds.rounds if isinstance(rounds, FederationConfig) else int(rounds)
    model_bytes, style_bytes = int(model_bytes), int(style_bytes)
    return TrafficLedger(model_bytes, r, style_bytes, model_bytes * r + style_bytes)


def format_bytes(n: int) -> str:
    """Decimal-unit rendering with one decimal, e.g. ``2.5T`` or ``31.5G``."""
    units = ["B", "K", "M", "G", "T", "P"]
    value = float(n)
    for unit in units:
        if abs(value) < 1000 or unit == units[-1]:
            return f"{int(value)}B" if unit == "B" else f"{value:.1f}{unit}"
        value /= 1000.0


@dataclass
class RoundReport:
    round: int
    client_losses: Dict[int, float]
    in_fed: Optional[MetricTable]
    out_fed: Optional[MetricTable]
    cumulative_bytes: int


def style_traffic(cfg: FederationConfig, bank: Optional[StyleBank]) -> int:
    if cfg.augmentation is Augmentation.NONE or bank is None:
        return 0
    return bank_size_bytes(bank)


def run_federation(
    cfg: FederationConfig,
    clients: Sequence[ClientData],
    bank: Optional[StyleBank],
    init: SegModel,
    out_of_federation: Sequence[LabeledVolume] = (),
    start_round: int = 0,
    on_round: Optional[Callable[[RoundReport, SegModel], None]] = None,
) -> Tuple[SegModel, List[RoundReport]]:
    """Synchronous FedAvg over all clients for rounds ``start_round+1 .. cfg.rounds``.

    ``init`` is the global model entering round ``start_round + 1``; resuming
    from a saved global model reproduces the uninterrupted run exactly because
    every random stream is keyed by round and client.
    """
    if len(clients) < 2:
        raise ConfigError(f"federation needs at least two clients, got {len(clients)}")
    check_bank(cfg, bank)
    model_bytes = model_size_bytes(init)
    style_bytes = style_traffic(cfg, bank)
    in_fed_sets = [item for c in clients for item in c.test]
    sizes = [c.size for c in clients]
    class_ids = list(range(1, init.n_classes))

    global_model = init
    reports = []
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        for r in range(start_round + 1, cfg.rounds + 1):
            results = list(pool.map(lambda c: local_train(global_model, c, bank, cfg, r), clients))
            global_model = fedavg([m for m, _ in results], sizes)
            evaluate = r % cfg.eval_every == 0 or r == cfg.rounds
            in_fed = evaluate_model(global_model, in_fed_sets, class_ids) if evaluate and in_fed_sets else None
            out_fed = (
                evaluate_model(global_model, out_of_federation, class_ids)
                if evaluate and out_of_federation else None
            )
            report = RoundReport(
                r,
                {c.client_id: loss for c, (_, loss) in zip(clients, results)},
                in_fed,
                out_fed,
                traffic_report(r, model_bytes, style_bytes).total_bytes,
            )
            log.info(
                "round %d/%d loss=%.4f in-fed DSC=%s",
                r, cfg.rounds, np.mean(list(report.client_losses.values())),
                f"{in_fed.global_dsc:.2f}" if in_fed else "-",
            )
            reports.append(report)
            if on_round is not None:
                on_round(report, global_model)
    return global_model, reports


# -- CSV ---------------------------------------------------------------------

def report_fieldnames(client_ids: Sequence[int], class_ids: Sequence[int]) -> List[str]:
    names = ["round"] + [f"loss_client{c}" for c in client_ids]
    for prefix in ("in_", "oof_"):
        names += [f"{prefix}dsc_{c}" for c in class_ids]
        names += [f"{prefix}asd_{c}" for c in class_ids]
        names += [f"{prefix}global_dsc", f"{prefix}global_asd"]
    return names + ["cumulative_bytes"]


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def report_rows(reports: Sequence[RoundReport], class_ids: Sequence[int]) -> List[Dict[str, str]]:
    rows = []
    for rep in reports:
        row = {"round": str(rep.round), "cumulative_bytes": str(rep.cumulative_bytes)}
        row.update({f"loss_client{c}": _fmt(v) for c, v in rep.client_losses.items()})
        for prefix, table in (("in_", rep.in_fed), ("oof_", rep.out_fed)):
            if table is not None:
                row.update({k: _fmt(v) for k, v in table.row(class_ids, prefix).items()})
        rows.append(row)
    return rows


def write_reports_csv(path, reports: Sequence[RoundReport], client_ids, class_ids, append: bool = False) -> None:
    fields = report_fieldnames(client_ids, class_ids)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        if not append:
            writer.writeheader()
        writer.writerows(report_rows(reports, class_ids))
