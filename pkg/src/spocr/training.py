"""Two-stage training protocol.

Stage 1 trains the whole network from scenes, with the first FC layer
(the candidate patterns) clipped to [-1, 1] after every update. The
patterns are then projected onto the displayable [0, 1] range, and
stage 2 freezes them while the rest of the network adapts, stopping
when validation exact-match accuracy stops improving.

Checkpoints are deterministic ZIP archives: same seed, config, and
data produce byte-identical files (wall-clock times live only in the
optional JSONL history sidecar).
"""

from __future__ import annotations

import hashlib
import io
import json
import time
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .ctc import (
    LabelSequence,
    ctc_loss_batch,
    decode_greedy,
    min_feasible_timesteps,
)
from .errors import ConfigError, InputError, ProtocolError, TrainingAbort
from .model import CRNN, ModelConfig
from .sensing import PatternSet, project_weights

STAGE1 = "stage1"
PROJECTED = "projected"
STAGE2_FINAL = "stage2-final"
STAGES = (STAGE1, PROJECTED, STAGE2_FINAL)

# the published operating points: sampling rate -> measurement count on
# the 96x32 geometry, and the stage-1 epoch budget used at each rate
SR_TO_K = {0.03: 100, 0.05: 150, 0.07: 200, 0.09: 250}
SR_STAGE1_EPOCHS = {0.03: 100, 0.05: 100, 0.07: 200, 0.09: 200}

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed member timestamp


def sr_to_k(sr: float) -> int:
    if sr not in SR_TO_K:
        raise ConfigError(
            f"no measurement count table entry for SR {sr}; "
            f"known rates: {sorted(SR_TO_K)}"
        )
    return SR_TO_K[sr]


@dataclass(frozen=True)
class TrainConfig:
    """Protocol hyperparameters. ``sr`` is informational once ``k`` is
    resolved; the trainer checks it against the model geometry."""

    k: int
    sr: float | None = None
    stage1_epochs: int = 100
    stage2_patience: int = 100
    stage2_max_epochs: int = 500
    batch_size: int = 64
    seed: int = 0
    projection: str = "clamp"
    optimizer: str = "adadelta"
    rho: float = 0.9
    eps: float = 1e-6
    lr: float = 0.01
    momentum: float = 0.9
    train_noise_snr_db: float | None = None
    stage2_init: str = "reinit"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.stage1_epochs < 1 or self.stage2_max_epochs < 1:
            raise ConfigError("epoch budgets must be >= 1")
        if self.stage2_patience < 1:
            raise ConfigError(f"stage2_patience must be >= 1, got {self.stage2_patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.projection not in ("clamp", "reflect"):
            raise ConfigError(f"unknown projection {self.projection!r}")
        if self.optimizer not in ("adadelta", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.stage2_init not in ("reinit", "inherit"):
            raise ConfigError(f"unknown stage2_init {self.stage2_init!r}")
        if not (0.0 <= self.rho < 1.0) or self.eps <= 0:
            raise ConfigError("need 0 <= rho < 1 and eps > 0")

    @classmethod
    def for_sr(cls, sr: float, **overrides) -> "TrainConfig":
        """Published operating point: K and the stage-1 epoch budget come
        from the rate tables."""
        kw = dict(k=sr_to_k(sr), sr=sr, stage1_epochs=SR_STAGE1_EPOCHS[sr])
        kw.update(overrides)
        return cls(**kw)

    def check_against(self, model_config: ModelConfig) -> None:
        if self.k != model_config.k:
            raise ConfigError(
                f"TrainConfig.k={self.k} but model K={model_config.k}")
        if self.sr is not None:
            actual = model_config.k / (model_config.m * model_config.n)
            # the published lookup rounds K/(M*N) to the nearest percent
            if abs(self.sr - actual) > 0.011:
                raise ConfigError(
                    f"sr={self.sr} inconsistent with K/(M*N)={actual:.4f}")


def adadelta_step(params, grads, state, rho: float = 0.9, eps: float = 1e-6):
    """One elementwise ADADELTA update; works on numpy arrays, torch
    tensors, and plain floats.

    ``state`` is (E[g^2], E[dx^2]) with the parameter shapes; pass zeros
    for the first step. Returns (new_params, new_state).
    """
    eg2, ed2 = state
    eg2 = rho * eg2 + (1.0 - rho) * grads * grads
    delta = -((ed2 + eps) ** 0.5) / ((eg2 + eps) ** 0.5) * grads
    ed2 = rho * ed2 + (1.0 - rho) * delta * delta
    return params + delta, (eg2, ed2)


def sgd_step(params, grads, velocity, lr: float = 0.01, momentum: float = 0.9):
    """Momentum SGD kept for ablation against the default optimizer."""
    velocity = momentum * velocity + grads
    return params - lr * velocity, velocity


class EarlyStopper:
    """Stops after ``patience`` consecutive epochs without a strictly
    better validation value."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = -float("inf")
        self.best_epoch: int | None = None
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        """Feed one epoch's validation value; True means stop now."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass(frozen=True)
class LabeledDataset:
    """Scenes stacked as (count, N, M) in [0,1] plus one label each."""

    scenes: np.ndarray
    labels: tuple[LabelSequence, ...]

    def __post_init__(self):
        arr = np.asarray(self.scenes, dtype=np.float64)
        if arr.ndim != 3:
            raise InputError(f"scenes must be (count, N, M), got {arr.shape}")
        if arr.shape[0] != len(self.labels):
            raise InputError(
                f"{arr.shape[0]} scenes vs {len(self.labels)} labels")
        object.__setattr__(self, "scenes", arr)
        object.__setattr__(
            self, "labels",
            tuple(lab if isinstance(lab, LabelSequence) else LabelSequence(tuple(lab))
                  for lab in self.labels))

    def __len__(self) -> int:
        return self.scenes.shape[0]

    @classmethod
    def from_samples(cls, samples) -> "LabeledDataset":
        samples = list(samples)
        if not samples:
            raise InputError("empty sample list")
        return cls(np.stack([s.scene.pixels for s in samples]),
                   tuple(s.label for s in samples))

    def vectors(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(
            self.scenes.reshape(len(self), -1)).to(dtype)


@dataclass(frozen=True)
class Checkpoint:
    """Model parameters frozen as float32 blocks plus the stage tag and
    per-epoch history."""

    config: ModelConfig
    stage: str
    state: "OrderedDict[str, np.ndarray]"
    history: tuple[dict, ...] = ()

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ProtocolError(f"unknown stage tag {self.stage!r}")
        if "fc1_weight" not in self.state:
            raise InputError("checkpoint lacks the fc1_weight block")
        blocks = OrderedDict()
        for name, arr in self.state.items():
            blocks[name] = np.ascontiguousarray(arr, dtype=np.float32)
        object.__setattr__(self, "state", blocks)
        object.__setattr__(self, "history", tuple(self.history))

    @classmethod
    def from_model(cls, model: CRNN, stage: str,
                   history: Sequence[dict] = ()) -> "Checkpoint":
        state = OrderedDict(
            (name, p.detach().to(torch.float32).numpy().copy())
            for name, p in model.named_parameters())
        return cls(model.config, stage, state, tuple(history))

    def build_model(self, dtype: torch.dtype = torch.float32) -> CRNN:
        model = CRNN(self.config, seed=0, dtype=dtype)
        params = dict(model.named_parameters())
        if set(params) != set(self.state):
            missing = set(params) ^ set(self.state)
            raise InputError(f"checkpoint blocks disagree with config: {missing}")
        with torch.no_grad():
            for name, arr in self.state.items():
                if tuple(params[name].shape) != arr.shape:
                    raise InputError(
                        f"block {name} has shape {arr.shape}, "
                        f"model wants {tuple(params[name].shape)}")
                params[name].copy_(torch.from_numpy(arr).to(dtype))
        return model

    def fc1_payload(self) -> bytes:
        """The FC1 block in pattern-file payload layout (f32 LE)."""
        return self.state["fc1_weight"].astype("<f4").tobytes()

    def pattern_set(self) -> PatternSet:
        return self.build_model().pattern_set()

    def best_val_exact_match(self) -> float | None:
        vals = [r["val_exact_match"] for r in self.history
                if r.get("val_exact_match") is not None]
        return max(vals) if vals else None


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = _serialize_checkpoint(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)


def _serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        def put(name: str, payload: bytes) -> None:
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            zf.writestr(info, payload)

        put("config.json", json.dumps(
            {"model": ckpt.config.to_json(), "stage": ckpt.stage},
            indent=2, sort_keys=True).encode())
        put("history.json", json.dumps(list(ckpt.history)).encode())
        put("blocks.json", json.dumps(
            [{"name": n, "shape": list(a.shape)}
             for n, a in ckpt.state.items()]).encode())
        for name, arr in ckpt.state.items():
            put(f"params/{name}.bin", arr.astype("<f4").tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path, "r") as zf:
        try:
            meta = json.loads(zf.read("config.json"))
            history = json.loads(zf.read("history.json"))
            blocks = json.loads(zf.read("blocks.json"))
        except KeyError as exc:
            raise InputError(f"{path}: missing checkpoint member {exc}") from exc
        config = ModelConfig.from_json(meta["model"])
        state = OrderedDict()
        for entry in blocks:
            raw = zf.read(f"params/{entry['name']}.bin")
            arr = np.frombuffer(raw, dtype="<f4")
            shape = tuple(entry["shape"])
            if arr.size != int(np.prod(shape)):
                raise InputError(
                    f"{path}: block {entry['name']} has {arr.size} values, "
                    f"shape {shape} wants {int(np.prod(shape))}")
            state[entry["name"]] = arr.reshape(shape).copy()
    return Checkpoint(config, meta["stage"], state, tuple(history))


def checkpoint_hash(ckpt: Checkpoint) -> str:
    return hashlib.sha256(_serialize_checkpoint(ckpt)).hexdigest()


def append_history(path, records: Sequence[dict]) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _exact_match(model: CRNN, vectors: torch.Tensor,
                 labels: Sequence[LabelSequence], batch_size: int) -> float:
    hits = 0
    with torch.no_grad():
        for lo in range(0, vectors.shape[0], batch_size):
            probs = model.train_grid(vectors[lo:lo + batch_size])
            for row, lab in zip(probs.numpy(),
                                labels[lo:lo + batch_size]):
                if decode_greedy(row).indices == lab.indices:
                    hits += 1
    return hits / vectors.shape[0]


def _noise_like(y: torch.Tensor, snr_db: float,
                gen: torch.Generator) -> torch.Tensor:
    # per-row signal power, mirroring the measurement-noise model
    power = (y.detach() ** 2).mean(dim=1, keepdim=True)
    sigma = (power / (10.0 ** (snr_db / 10.0))).sqrt()
    return torch.randn(y.shape, generator=gen, dtype=y.dtype) * sigma


class _Optimizer:
    """Per-parameter functional-step driver over a fixed name list."""

    def __init__(self, config: TrainConfig, params: "OrderedDict[str, torch.nn.Parameter]"):
        self.config = config
        self.params = params
        self.state = {
            name: (torch.zeros_like(p), torch.zeros_like(p))
            for name, p in params.items()
        }

    @torch.no_grad()
    def step(self) -> None:
        cfg = self.config
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if cfg.optimizer == "adadelta":
                new, self.state[name] = adadelta_step(
                    p.data, p.grad, self.state[name], cfg.rho, cfg.eps)
            else:
                new, vel = sgd_step(p.data, p.grad, self.state[name][0],
                                    cfg.lr, cfg.momentum)
                self.state[name] = (vel, self.state[name][1])
            p.data.copy_(new)
            p.grad = None


def _run_stage(
    model: CRNN,
    train: LabeledDataset,
    val: LabeledDataset,
    config: TrainConfig,
    *,
    stage: str,
    max_epochs: int,
    freeze_fc1: bool,
    history_path=None,
    stopper: EarlyStopper | None = None,
) -> tuple[list[dict], "OrderedDict[str, np.ndarray] | None", float]:
    """Shared epoch loop. Returns (history records, best state or None,
    best validation value); ``best`` tracking only when a stopper is given.
    """
    if len(train) == 0 or len(val) == 0:
        raise InputError("training needs nonempty train and validation sets")
    config.check_against(model.config)
    for lab in train.labels + val.labels:
        if min_feasible_timesteps(lab) > model.config.t:
            raise ConfigError(
                f"label of length {len(lab)} cannot fit T={model.config.t}")

    dtype = model.dtype
    x_train = train.vectors(dtype)
    x_val = val.vectors(dtype)
    params = OrderedDict(
        (name, p) for name, p in model.named_parameters()
        if not (freeze_fc1 and name == "fc1_weight"))
    if freeze_fc1:
        model.fc1_weight.requires_grad_(False)
    opt = _Optimizer(config, params)
    rng = np.random.default_rng(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed)

    def snapshot() -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (name, p.detach().to(torch.float32).numpy().copy())
            for name, p in model.named_parameters())

    records: list[dict] = []
    last_good = snapshot()  # initial weights are always finite
    best_state: "OrderedDict[str, np.ndarray] | None" = None
    best_val = -float("inf")

    for epoch in range(1, max_epochs + 1):
        t0 = time.monotonic()
        order = rng.permutation(len(train))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[lo:lo + config.batch_size])
            xb = x_train[idx]
            labels_b = [train.labels[i] for i in idx.tolist()]
            y = model.measure_batch(xb)
            if config.train_noise_snr_db is not None:
                y = y + _noise_like(y, config.train_noise_snr_db, noise_gen)
            loss = ctc_loss_batch(model.infer_grid(y), labels_b)
            if not torch.isfinite(loss):
                raise TrainingAbort(
                    f"non-finite loss at epoch {epoch}",
                    checkpoint=Checkpoint(model.config, stage, last_good,
                                          tuple(records)))
            loss.backward()
            opt.step()
            if not freeze_fc1:
                with torch.no_grad():
                    model.fc1_weight.clamp_(-1.0, 1.0)
            losses.append(float(loss.detach()))

        val_acc = _exact_match(model, x_val, val.labels, config.batch_size)
        record = {
            "epoch": epoch,
            "stage": stage,
            "train_loss": float(np.mean(losses)),
            "val_exact_match": val_acc,
        }
        records.append(record)
        append_history(history_path,
                       [dict(record, wall_seconds=time.monotonic() - t0)])
        last_good = snapshot()
        if stopper is not None:
            if val_acc > best_val:
                best_val = val_acc
                best_state = last_good
            if stopper.update(epoch, val_acc):
                break
    return records, best_state, best_val


def train_stage1(
    model: CRNN,
    train: LabeledDataset,
    val: LabeledDataset,
    config: TrainConfig,
    history_path=None,
) -> Checkpoint:
    """Stage 1: end-to-end training of all blocks, FC1 clipped to [-1,1]
    after every step."""
    records, _, _ = _run_stage(
        model, train, val, config, stage=STAGE1,
        max_epochs=config.stage1_epochs, freeze_fc1=False,
        history_path=history_path)
    return Checkpoint.from_model(model, STAGE1, records)


def project_stage(
    ckpt: Checkpoint,
    strategy: str = "clamp",
    val: LabeledDataset | None = None,
    config: TrainConfig | None = None,
    history_path=None,
) -> Checkpoint:
    """Project FC1 onto the displayable [0,1] range; everything else is
    copied bit-identically. Post-projection validation accuracy is
    recorded (never asserted) when a validation set is supplied."""
    if ckpt.stage != STAGE1:
        raise ProtocolError(
            f"projection expects a {STAGE1} checkpoint, got {ckpt.stage!r}")
    cfg = ckpt.config
    projected = project_weights(
        ckpt.state["fc1_weight"].astype(np.float64), strategy,
        height=cfg.n, width=cfg.m)
    state = OrderedDict(ckpt.state)
    state["fc1_weight"] = projected.patterns.astype(np.float32)
    history = list(ckpt.history)
    record = {
        "epoch": (history[-1]["epoch"] if history else 0),
        "stage": PROJECTED,
        "train_loss": None,
        "val_exact_match": None,
    }
    out = Checkpoint(cfg, PROJECTED, state, tuple(history))
    if val is not None:
        batch = config.batch_size if config else 64
        model = out.build_model()
        record["val_exact_match"] = _exact_match(
            model, val.vectors(model.dtype), val.labels, batch)
    history.append(record)
    append_history(history_path, [dict(record, wall_seconds=0.0)])
    return replace(out, history=tuple(history))


def train_stage2(
    ckpt: Checkpoint,
    train: LabeledDataset,
    val: LabeledDataset,
    config: TrainConfig,
    history_path=None,
) -> Checkpoint:
    """Stage 2: FC1 frozen bit-exact, the rest retrained until validation
    exact-match accuracy stalls for ``stage2_patience`` epochs. Returns
    the best-validation checkpoint.

    ``stage2_init`` picks the recognizer's starting point. ``reinit``
    (default) trains a fresh recognizer against the frozen patterns:
    projection shifts the measurement distribution (clamping makes every
    pattern nonnegative, so values gain a large common offset), and the
    stage-1 recognizer's activations saturate on the shifted inputs
    badly enough that gradient descent stalls instead of adapting.
    ``inherit`` continues from the projected checkpoint's values.
    """
    if ckpt.stage != PROJECTED:
        raise ProtocolError(
            f"stage 2 expects a {PROJECTED} checkpoint, got {ckpt.stage!r}")
    if config.stage2_init == "reinit":
        model = CRNN(ckpt.config, seed=config.seed)
        with torch.no_grad():
            model.fc1_weight.copy_(
                torch.from_numpy(ckpt.state["fc1_weight"]).to(model.dtype))
    else:
        model = ckpt.build_model()
    frozen = ckpt.state["fc1_weight"].copy()
    stopper = EarlyStopper(config.stage2_patience)
    records, best_state, _ = _run_stage(
        model, train, val, config, stage=STAGE2_FINAL,
        max_epochs=config.stage2_max_epochs, freeze_fc1=True,
        history_path=history_path, stopper=stopper)
    if best_state is None:  # unreachable: >= 1 epoch always runs
        raise TrainingAbort("stage 2 produced no epochs")
    if best_state["fc1_weight"].tobytes() != frozen.tobytes():
        raise ProtocolError("FC1 drifted during stage 2")
    history = tuple(ckpt.history) + tuple(records)
    return Checkpoint(ckpt.config, STAGE2_FINAL, best_state, history)


def train_full(
    model: CRNN,
    train: LabeledDataset,
    val: LabeledDataset,
    config: TrainConfig,
    history_path=None,
) -> tuple[Checkpoint, Checkpoint, Checkpoint]:
    """Run the whole protocol; returns (stage1, projected, final)."""
    c1 = train_stage1(model, train, val, config, history_path)
    c2 = project_stage(c1, config.projection, val, config, history_path)
    c3 = train_stage2(c2, train, val, config, history_path)
    return c1, c2, c3
