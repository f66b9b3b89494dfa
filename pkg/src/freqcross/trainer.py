"""Adam training loop, per-epoch validation, checkpoints and the modality ablation driver."""
from __future__ import annotations

import csv
import io
import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as fqmodel
from .datapipe import SampleSource, make_batches
from .errors import CorruptFile, EmptySplit, InvalidConfig, NonFiniteLoss, VersionUnsupported
from .evalkit import MetricsReport, ScoredSet, metrics_report
from .imaging import AugmentConfig
from .neural import AdamState, Tensor, adam_step, backward, bce_l2_loss, bce_logits_l2_loss, no_grad

DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}

# ablation row order
ABLATION_ROWS = (
    ("spatial",),
    ("frequency",),
    ("radial",),
    ("spatial", "frequency"),
    ("spatial", "radial"),
    ("frequency", "radial"),
    ("spatial", "frequency", "radial"),
)


def ablation_row_name(mods) -> str:
    if len(mods) == 3:
        return "all"
    if len(mods) == 1:
        return mods[0]
    return "+".join(m[0] for m in mods)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    lam: float = 1e-4
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    modalities: tuple[str, ...] | None = None
    dtype: str = "f32"
    eval_batch_size: int = 64
    workers: int = 1

    def __post_init__(self):
        if self.modalities is not None:
            self.modalities = tuple(self.modalities)
        self.validate()

    def validate(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise InvalidConfig(f"epochs must be an integer >= 1, got {self.epochs!r}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise InvalidConfig("batch sizes must be >= 1")
        if not self.lr >= 0:
            raise InvalidConfig(f"lr must be >= 0, got {self.lr}")
        if not self.lam >= 0:
            raise InvalidConfig(f"lambda must be >= 0, got {self.lam}")
        if self.dtype not in DTYPE_NAMES:
            raise InvalidConfig(f"dtype must be one of {sorted(DTYPE_NAMES)}, got {self.dtype!r}")
        if self.workers < 1:
            raise InvalidConfig("workers must be >= 1")

    @property
    def np_dtype(self):
        return DTYPE_NAMES[self.dtype]

    def to_dict(self) -> dict:
        a = self.augment
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lambda": self.lam,
            "seed": self.seed,
            "modalities": list(self.modalities) if self.modalities is not None else None,
            "dtype": self.dtype,
            "eval_batch_size": self.eval_batch_size,
            "augment": {
                "enabled": a.enabled,
                "hflip_prob": a.hflip_prob,
                "max_rotation": a.max_rotation,
                "jitter_range": a.jitter_range,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        known = {"epochs", "batch_size", "lr", "lambda", "seed", "modalities", "dtype", "eval_batch_size", "augment", "workers"}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "augment" in d:
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "epochs": [list(map(float, (r.train_loss, r.train_acc, r.val_loss, r.val_acc))) for r in self.epochs],
            "step_losses": self.step_losses,
        }

    @classmethod
    def from_dict(cls, d) -> TrainHistory:
        recs = [EpochRecord(i + 1, *row) for i, row in enumerate(d["epochs"])]
        return cls(recs, [float(x) for x in d["step_losses"]])


def write_history_csv(path, history: TrainHistory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for r in history.epochs:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.val_loss), repr(r.val_acc)])


def write_steps_csv(path, history: TrainHistory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(history.step_losses, start=1):
            w.writerow([i, repr(loss)])


# ---------------------------------------------------------------------------
# scoring


@dataclass
class SplitScores:
    scored: ScoredSet
    features: np.ndarray | None = None


def score_split(model, source, split: str, batch_size: int = 64, perturb=None, seed: int = 0, features: bool = False) -> SplitScores:
    """Eval-mode probabilities for ``split`` in manifest order."""
    if not isinstance(source, SampleSource):
        source = SampleSource(source, model.config.input_side, model.config.radial_bins)
    probs, labels, feats = [], [], []
    with no_grad():
        for b in make_batches(source, split, batch_size, seed=seed, perturb=perturb):
            out = model.forward(b.rgb, b.m_log, b.e, mode="eval")
            probs.append(out.probabilities.astype(np.float64))
            labels.append(b.labels)
            if features:
                feats.append(out.f_fused.data.astype(np.float64))
    scored = ScoredSet(np.concatenate(probs), np.concatenate(labels))
    return SplitScores(scored, np.concatenate(feats) if features else None)


def split_loss(model, scored: ScoredSet, lam: float) -> float:
    """Mean BCE of ``scored`` plus the L2 term on the model's current weights."""
    with no_grad():
        p = Tensor(scored.scores.astype(model.dtype))
        return float(bce_l2_loss(p, scored.labels, model.decay_parameters(), lam).item())


def evaluate(model, manifest, split: str = "test", batch_size: int = 64,
             threshold: float = 0.5) -> tuple[ScoredSet, MetricsReport]:
    """Eval-mode scores for ``split`` in manifest order and their metrics."""
    scored = score_split(model, manifest, split, batch_size).scored
    return scored, metrics_report(scored, threshold)


def accuracy(model, manifest, split: str, batch_size: int = 64) -> float:
    scored = score_split(model, manifest, split, batch_size).scored
    return float(np.mean((scored.scores >= 0.5) == (scored.labels == 1)))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: fqmodel.FreqCross
    history: TrainHistory
    optimizer: AdamState
    train_config: TrainConfig


def step_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, 3])


def train(model_config: fqmodel.FreqCrossConfig, manifest, cfg: TrainConfig, checkpoint_path=None,
          resume=None, source: SampleSource | None = None) -> TrainResult:
    """Train from scratch (or from ``resume``) for ``cfg.epochs`` total epochs.

    A checkpoint is written to ``checkpoint_path`` after every epoch. Every
    random draw derives from ``(seed, epoch, step)`` so a resumed run
    continues exactly as an uninterrupted one would.
    """
    if cfg.modalities is not None:
        model_config = replace(model_config, modalities=cfg.modalities)
    for split in ("train", "val"):
        if not manifest.split(split):
            raise EmptySplit(f"split {split!r} is empty")
    if resume is not None:
        ck = load_checkpoint(resume)
        model, state, history = ck.model, ck.optimizer, ck.history
        if model.dtype != np.dtype(cfg.np_dtype):
            raise InvalidConfig(f"checkpoint dtype {model.dtype} differs from configured {cfg.dtype}")
        state.lr = cfg.lr
    else:
        model = fqmodel.build(model_config, cfg.seed, cfg.np_dtype)
        state = AdamState(lr=cfg.lr)
        history = TrainHistory()
    cfg_side = model.config.input_side
    if source is None:
        source = SampleSource(manifest, cfg_side, model.config.radial_bins, cfg.workers)
    params = model.parameters()
    decay = model.decay_parameters()
    for epoch in range(len(history.epochs), cfg.epochs):
        losses, correct, seen = [], 0, 0
        batches = make_batches(source, "train", cfg.batch_size, cfg.seed, epoch, augment_cfg=cfg.augment)
        for step, b in enumerate(batches):
            out = model.forward(b.rgb, b.m_log, b.e, mode="train", rng=step_rng(cfg.seed, epoch, step))
            loss = bce_logits_l2_loss(out.logit, b.labels, decay, cfg.lam)
            value = float(loss.item())
            if not np.isfinite(value):
                raise NonFiniteLoss(len(history.step_losses) + 1, value)
            model.zero_grad()
            backward(loss, params)
            adam_step(params, None, state)
            history.step_losses.append(value)
            losses.append(value * len(b))
            correct += int(np.sum((out.probabilities >= 0.5) == (b.labels == 1)))
            seen += len(b)
        val = score_split(model, source, "val", cfg.eval_batch_size).scored
        val_acc = float(np.mean((val.scores >= 0.5) == (val.labels == 1)))
        history.epochs.append(
            EpochRecord(epoch + 1, sum(losses) / seen, correct / seen, split_loss(model, val, cfg.lam), val_acc)
        )
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, state, history, cfg)
    return TrainResult(model, history, state, cfg)


def ablate(model_config, manifest, cfg: TrainConfig, split: str = "test", rows=ABLATION_ROWS):
    """Train one model per modality mask from the same seed; returns
    ``[(row name, modalities, MetricsReport)]`` in ABLATION_ROWS order."""
    results = []
    source_cache: dict = {}
    for mods in rows:
        mc = replace(model_config, modalities=mods)
        key = (mc.input_side, mc.radial_bins)
        if key not in source_cache:
            source_cache[key] = SampleSource(manifest, mc.input_side, mc.radial_bins, cfg.workers)
        res = train(mc, manifest, replace(cfg, modalities=None), source=source_cache[key])
        _, report = evaluate(res.model, source_cache[key], split, cfg.eval_batch_size)
        results.append((ablation_row_name(mods), mods, report))
    return results


def write_ablation_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "modalities", "accuracy", "precision", "recall", "f1", "auc_roc", "auc_pr"])
        for name, mods, r in results:
            w.writerow([name, "+".join(mods), repr(r.accuracy), repr(r.precision), repr(r.recall), repr(r.f1),
                        repr(r.auc_roc), repr(r.auc_pr)])


# ---------------------------------------------------------------------------
# checkpoints
#
#   "FQXC" | u32 version | u32 len + JSON state | u32 len + embedded model file
#   | u32 n | n first-moment records | u32 n | n second-moment records | u32 CRC32

CHECKPOINT_MAGIC = b"FQXC"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model: fqmodel.FreqCross
    optimizer: AdamState
    history: TrainHistory
    train_config: dict


def checkpoint_to_bytes(model, state: AdamState, history: TrainHistory, cfg: TrainConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta = {
        "adam": {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "epsilon": state.epsilon, "step": state.step},
        "history": history.to_dict(),
        "train_config": cfg.to_dict(),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    mbytes = fqmodel.model_to_bytes(model)
    buf.write(struct.pack("<I", len(mbytes)))
    buf.write(mbytes)
    for moments in (state.m, state.v):
        buf.write(struct.pack("<I", len(moments)))
        for name in sorted(moments):
            fqmodel.write_record(buf, name, moments[name])
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, model, state, history, cfg) -> None:
    data = checkpoint_to_bytes(model, state, history, cfg)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    tmp.replace(path)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    r = fqmodel._Reader(data)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CorruptFile(f"bad magic (expected {CHECKPOINT_MAGIC!r})")
    (version,) = r.unpack("<I", "checkpoint version")
    if version != CHECKPOINT_VERSION:
        raise VersionUnsupported(f"checkpoint version {version} is not supported")
    (n,) = r.unpack("<I", "state length")
    try:
        meta = json.loads(r.take(n, "state").decode("utf-8"))
        adam = meta["adam"]
        history = TrainHistory.from_dict(meta["history"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFile(f"invalid checkpoint state: {exc}") from exc
    (mlen,) = r.unpack("<I", "model length")
    model = fqmodel.model_from_bytes(r.take(mlen, "embedded model"))
    moments = []
    for what in ("first moments", "second moments"):
        (count,) = r.unpack("<I", f"{what} count")
        moments.append(dict(r.record() for _ in range(count)))
    if len(data) - r.pos != 4:
        raise CorruptFile("unexpected trailing bytes before checksum")
    fqmodel.check_crc(data)
    shapes = {name: p.shape for name, p in model.named_parameters()}
    for mom in moments:
        for name, arr in mom.items():
            if shapes.get(name) != arr.shape:
                raise CorruptFile(f"optimizer state {name} does not match the model")
    state = AdamState(adam["lr"], adam["beta1"], adam["beta2"], adam["epsilon"], adam["step"], moments[0], moments[1])
    return Checkpoint(model, state, history, meta["train_config"])


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CorruptFile(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(data)
