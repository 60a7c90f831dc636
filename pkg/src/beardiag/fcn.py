"""Fault classification network and its training loop.

Each input channel of the unified representation goes through its own
wide-kernel convolution stem (no weight sharing), the stem outputs are
concatenated and refined by three multiscale blocks whose parallel
convolutions are fused through channel attention, and a two-layer
classifier produces the fault logits.  Class layout is frozen: 0 is
fault-free, 1-9 are (inner ring, ball, outer ring) x (minor, moderate,
severe) in that order.

Training minimizes softmax cross-entropy with decoupled-weight-decay Adam
and a loss-plateau schedule; the weights with the best validation accuracy
are the ones retained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .errors import ConfigError, DataError, LabelError

N_CLASSES = 10
FAULT_LOCATIONS = ("inner ring", "ball", "outer ring")
FAULT_SEVERITIES = ("minor", "moderate", "severe")


def _check_label(label: int) -> int:
    if not 0 <= label < N_CLASSES:
        raise LabelError(f"fault label must lie in [0, {N_CLASSES}), got {label}")
    return int(label)


def fault_location(label: int) -> str | None:
    """Defect location for a label, or None for the fault-free class."""
    label = _check_label(label)
    return None if label == 0 else FAULT_LOCATIONS[(label - 1) // 3]


def fault_severity(label: int) -> str | None:
    """Defect severity for a label, or None for the fault-free class."""
    label = _check_label(label)
    return None if label == 0 else FAULT_SEVERITIES[(label - 1) % 3]


def fault_description(label: int) -> str:
    """Short textual description of a class, e.g. 'moderate fault of bearing ball'."""
    label = _check_label(label)
    if label == 0:
        return "normal bearing condition"
    return f"{fault_severity(label)} fault of bearing {fault_location(label)}"


def all_fault_descriptions() -> list[str]:
    return [fault_description(k) for k in range(N_CLASSES)]


@dataclass(frozen=True)
class FcnConfig:
    """Hyperparameters of the classifier; defaults target roughly one
    million parameters at n_f = 24000."""

    n_f: int = 24000
    in_channels: int = 3
    stem_kernel: int = 64
    stem_stride: int = 8
    stem_channels: int = 16
    branch_kernels: tuple[int, ...] = (3, 5, 7)
    block_widths: tuple[int, ...] = (32, 64, 128)
    cam_reduction: int = 8
    pool_width: int = 4
    head_pool_width: int = 2
    hidden_units: int = 256
    n_classes: int = 10
    batchnorm: bool = True

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.in_channels < 1:
            raise ConfigError("need at least 1 input channel")
        if min(self.block_widths) < 1 or self.stem_channels < 1 or self.hidden_units < 1:
            raise ConfigError("all widths must be >= 1")
        if any(k % 2 == 0 for k in self.branch_kernels):
            raise ConfigError("branch kernels must be odd so branch outputs align")
        if self.n_f < self.stem_kernel:
            raise ConfigError(f"n_f {self.n_f} shorter than stem kernel {self.stem_kernel}")
        for width in self.block_widths:
            cam_channels = width * len(self.branch_kernels)
            if self.cam_reduction > cam_channels:
                raise ConfigError(
                    f"attention reduction {self.cam_reduction} exceeds "
                    f"{cam_channels} fused channels"
                )
        if self.length_trace()[-1] < 1:
            raise ConfigError("configuration collapses the sequence to length 0")

    def length_trace(self) -> list[int]:
        """Sequence length after the stem, each block, and the head pool."""
        lengths = [(self.n_f - self.stem_kernel) // self.stem_stride + 1]
        for _ in self.block_widths:
            lengths.append(lengths[-1] // self.pool_width)
        lengths.append(lengths[-1] // self.head_pool_width)
        return lengths

    @property
    def feature_width(self) -> int:
        """Width of the flattened encoder output fed to the classifier."""
        return self.block_widths[-1] * self.length_trace()[-1]

    def parameter_count(self) -> int:
        """Trainable parameter count, computed analytically from the config."""
        n_branches = len(self.branch_kernels)
        total = self.in_channels * (self.stem_channels * self.stem_kernel + self.stem_channels)
        if self.batchnorm:
            total += self.in_channels * 2 * self.stem_channels
        c_in = self.stem_channels * self.in_channels
        for width in self.block_widths:
            for k in self.branch_kernels:
                total += c_in * width * k + width
            cam_channels = width * n_branches
            hidden = max(1, cam_channels // self.cam_reduction)
            total += cam_channels * hidden + hidden + hidden * cam_channels + cam_channels
            total += cam_channels * width + width  # pointwise fusion
            if self.batchnorm:
                total += n_branches * 2 * width + 2 * width
            c_in = width
        total += self.feature_width * self.hidden_units + self.hidden_units
        total += self.hidden_units * self.n_classes + self.n_classes
        return total


class ChannelAttention:
    """Per-channel gating from pooled statistics through a shared bottleneck MLP.

    weights = sigmoid(mlp(mean_L(x)) + mlp(max_L(x))), output = x * weights.
    Every gate lies strictly in (0, 1).
    """

    def __init__(self, name: str, channels: int, reduction: int, rng):
        if reduction > channels:
            raise ConfigError(f"reduction {reduction} exceeds channel count {channels}")
        hidden = max(1, channels // reduction)
        self.w1 = nn.Param(f"{name}.fc1.weight", nn.kaiming_uniform((hidden, channels), channels, rng))
        self.b1 = nn.Param(f"{name}.fc1.bias", np.zeros(hidden))
        self.w2 = nn.Param(f"{name}.fc2.weight", nn.kaiming_uniform((channels, hidden), hidden, rng))
        self.b2 = nn.Param(f"{name}.fc2.bias", np.zeros(channels))
        self._ctx = None

    def _mlp(self, pooled):
        z1, c1 = nn.linear_forward(pooled, self.w1.value, self.b1.value)
        r, cr = nn.relu_forward(z1)
        z2, c2 = nn.linear_forward(r, self.w2.value, self.b2.value)
        return z2, (c1, cr, c2)

    def _mlp_backward(self, ctx, dz2):
        c1, cr, c2 = ctx
        dr, dw2, db2 = nn.linear_backward(c2, dz2)
        dz1 = nn.relu_backward(cr, dr)
        dpooled, dw1, db1 = nn.linear_backward(c1, dz1)
        self.w1.grad += dw1
        self.b1.grad += db1
        self.w2.grad += dw2
        self.b2.grad += db2
        return dpooled

    def forward(self, x, train=False):
        avg, avg_ctx = nn.global_avg_pool_forward(x)
        mx, mx_ctx = nn.global_max_pool_forward(x)
        za, mlp_a_ctx = self._mlp(avg)
        zm, mlp_m_ctx = self._mlp(mx)
        weights, sig_ctx = nn.sigmoid_forward(za + zm)
        y, scale_ctx = nn.channel_scale_forward(x, weights)
        self._ctx = (avg_ctx, mx_ctx, mlp_a_ctx, mlp_m_ctx, sig_ctx, scale_ctx)
        return y

    def backward(self, dy):
        avg_ctx, mx_ctx, mlp_a_ctx, mlp_m_ctx, sig_ctx, scale_ctx = self._ctx
        dx, dweights = nn.channel_scale_backward(scale_ctx, dy)
        dz = nn.sigmoid_backward(sig_ctx, dweights)
        davg = self._mlp_backward(mlp_a_ctx, dz)
        dmx = self._mlp_backward(mlp_m_ctx, dz)
        dx += nn.global_avg_pool_backward(avg_ctx, davg)
        dx += nn.global_max_pool_backward(mx_ctx, dmx)
        return dx

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]


class MultiscaleBlock:
    """Parallel convolutions at several kernel sizes, fused by channel
    attention and a pointwise convolution, then max-pooled."""

    def __init__(self, name, c_in, width, kernels, reduction, pool_width, batchnorm, rng):
        self.width = width
        self.batchnorm = batchnorm
        self.branches = [
            nn.Conv1d(f"{name}.branch{k}", c_in, width, k, padding=(k - 1) // 2, rng=rng)
            for k in kernels
        ]
        self.branch_bns = (
            [nn.BatchNorm1d(f"{name}.branch{k}.bn", width) for k in kernels]
            if batchnorm else []
        )
        fused = width * len(kernels)
        self.cam = ChannelAttention(f"{name}.cam", fused, reduction, rng)
        self.fuse = nn.Conv1d(f"{name}.fuse", fused, width, 1, rng=rng)
        self.fuse_bn = nn.BatchNorm1d(f"{name}.fuse.bn", width) if batchnorm else None
        self.act = nn.ReLU()
        self.pool = nn.MaxPool1d(pool_width)

    def forward(self, x, train=False):
        outs = []
        for i, branch in enumerate(self.branches):
            h = branch.forward(x, train)
            if self.batchnorm:
                h = self.branch_bns[i].forward(h, train)
            outs.append(h)
        cat = np.concatenate(outs, axis=1)
        h = self.cam.forward(cat, train)
        h = self.fuse.forward(h, train)
        if self.fuse_bn is not None:
            h = self.fuse_bn.forward(h, train)
        h = self.act.forward(h, train)
        return self.pool.forward(h, train)

    def backward(self, dy):
        d = self.pool.backward(dy)
        d = self.act.backward(d)
        if self.fuse_bn is not None:
            d = self.fuse_bn.backward(d)
        d = self.fuse.backward(d)
        d = self.cam.backward(d)
        dx = None
        for i, branch in enumerate(self.branches):
            chunk = d[:, i * self.width : (i + 1) * self.width, :]
            if self.batchnorm:
                chunk = self.branch_bns[i].backward(chunk)
            db = branch.backward(chunk)
            dx = db if dx is None else dx + db
        return dx

    def params(self):
        out = []
        for i, branch in enumerate(self.branches):
            out.extend(branch.params())
            if self.batchnorm:
                out.extend(self.branch_bns[i].params())
        out.extend(self.cam.params())
        out.extend(self.fuse.params())
        if self.fuse_bn is not None:
            out.extend(self.fuse_bn.params())
        return out


class FcnModel:
    """Encoder (stems + multiscale blocks) plus the two-layer classifier."""

    def __init__(self, config: FcnConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFC]))
        cfg = config
        self.stems = [
            nn.Conv1d(f"stem{i}", 1, cfg.stem_channels, cfg.stem_kernel,
                      stride=cfg.stem_stride, rng=rng, input_grad=False)
            for i in range(cfg.in_channels)
        ]
        self.stem_bns = (
            [nn.BatchNorm1d(f"stem{i}.bn", cfg.stem_channels) for i in range(cfg.in_channels)]
            if cfg.batchnorm else []
        )
        self.stem_acts = [nn.ReLU() for _ in range(cfg.in_channels)]
        self.blocks = []
        c_in = cfg.stem_channels * cfg.in_channels
        for b, width in enumerate(cfg.block_widths):
            self.blocks.append(
                MultiscaleBlock(f"block{b}", c_in, width, cfg.branch_kernels,
                                cfg.cam_reduction, cfg.pool_width, cfg.batchnorm, rng)
            )
            c_in = width
        self.head_pool = nn.AvgPool1d(cfg.head_pool_width)
        self.l1 = nn.Linear("classifier.l1", cfg.feature_width, cfg.hidden_units, rng=rng)
        self.l1_act = nn.ReLU()
        self.l2 = nn.Linear("classifier.l2", cfg.hidden_units, cfg.n_classes, rng=rng)
        self._head_shape = None

    @property
    def feature_width(self) -> int:
        return self.config.feature_width

    def encode(self, x, train=False):
        """(B, in_channels, n_f) -> flattened encoder features (B, feature_width)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.config.in_channels or x.shape[2] != self.config.n_f:
            raise ConfigError(
                f"expected input of shape (B, {self.config.in_channels}, "
                f"{self.config.n_f}), got {x.shape}"
            )
        outs = []
        for i, stem in enumerate(self.stems):
            h = stem.forward(x[:, i : i + 1, :], train)
            if self.config.batchnorm:
                h = self.stem_bns[i].forward(h, train)
            outs.append(self.stem_acts[i].forward(h, train))
        h = np.concatenate(outs, axis=1)
        for block in self.blocks:
            h = block.forward(h, train)
        h = self.head_pool.forward(h, train)
        self._head_shape = h.shape
        return h.reshape(h.shape[0], -1)

    def classify(self, x, train=False):
        """(B, in_channels, n_f) -> logits (B, n_classes)."""
        features = self.encode(x, train)
        h = self.l1_act.forward(self.l1.forward(features, train), train)
        return self.l2.forward(h, train)

    def backward(self, dlogits):
        d = self.l2.backward(dlogits)
        d = self.l1_act.backward(d)
        d = self.l1.backward(d)
        d = d.reshape(self._head_shape)
        d = self.head_pool.backward(d)
        for block in reversed(self.blocks):
            d = block.backward(d)
        width = self.config.stem_channels
        dx_cols = []
        for i, stem in enumerate(self.stems):
            chunk = d[:, i * width : (i + 1) * width, :]
            chunk = self.stem_acts[i].backward(chunk)
            if self.config.batchnorm:
                chunk = self.stem_bns[i].backward(chunk)
            dx_cols.append(stem.backward(chunk))
        if any(dx is None for dx in dx_cols):
            return None  # stems skip the unused input gradient
        return np.concatenate(dx_cols, axis=1)

    def params(self) -> list[nn.Param]:
        out = []
        for i, stem in enumerate(self.stems):
            out.extend(stem.params())
            if self.config.batchnorm:
                out.extend(self.stem_bns[i].params())
        for block in self.blocks:
            out.extend(block.params())
        out.extend(self.l1.params())
        out.extend(self.l2.params())
        names = [p.name for p in out]
        assert len(names) == len(set(names)), "duplicate parameter names"
        return out

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params() if p.trainable)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in state:
                raise ConfigError(f"checkpoint is missing tensor {p.name!r}")
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ConfigError(
                    f"tensor {p.name!r} has shape {value.shape}, expected {p.value.shape}"
                )
            p.value = value.copy()


# ---------------------------------------------------------------------------
# checkpoint round trip with embedded config


_CONFIG_PREFIX = "__config__/"


def save_model(path, model: FcnModel, extra_scalars: dict[str, float] | None = None) -> None:
    """Write model weights plus enough config to rebuild the model."""
    cfg = model.config
    tensors = {p.name: p.value for p in model.params()}
    scalars = {
        "n_f": cfg.n_f, "in_channels": cfg.in_channels,
        "stem_kernel": cfg.stem_kernel, "stem_stride": cfg.stem_stride,
        "stem_channels": cfg.stem_channels, "cam_reduction": cfg.cam_reduction,
        "pool_width": cfg.pool_width, "head_pool_width": cfg.head_pool_width,
        "hidden_units": cfg.hidden_units, "n_classes": cfg.n_classes,
        "batchnorm": int(cfg.batchnorm),
    }
    scalars.update(extra_scalars or {})
    for key, value in scalars.items():
        tensors[_CONFIG_PREFIX + key] = np.float64(value)
    tensors[_CONFIG_PREFIX + "branch_kernels"] = np.asarray(cfg.branch_kernels, float)
    tensors[_CONFIG_PREFIX + "block_widths"] = np.asarray(cfg.block_widths, float)
    nn.save_checkpoint(path, tensors)


def load_model(path) -> tuple[FcnModel, dict[str, float]]:
    """Rebuild a model from a checkpoint; returns (model, extra scalars)."""
    tensors = nn.load_checkpoint(path)
    raw = {
        key[len(_CONFIG_PREFIX):]: value
        for key, value in tensors.items()
        if key.startswith(_CONFIG_PREFIX)
    }
    known = {f.name for f in FcnConfig.__dataclass_fields__.values()}
    kwargs = {}
    extras = {}
    for key, value in raw.items():
        if key in ("branch_kernels", "block_widths"):
            kwargs[key] = tuple(int(v) for v in np.atleast_1d(value))
        elif key in known:
            kwargs[key] = bool(int(value)) if key == "batchnorm" else int(value)
        else:
            extras[key] = float(value)
    model = FcnModel(FcnConfig(**kwargs))
    model.load_state_dict(
        {k: v for k, v in tensors.items() if not k.startswith(_CONFIG_PREFIX)}
    )
    return model, extras


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    lr: float


@dataclass
class TrainingLog:
    epochs: list[EpochStats] = field(default_factory=list)
    best_val_accuracy: float = 0.0
    best_epoch: int = -1
    stop_reason: str = "completed"


def predict_logits(model: FcnModel, x, batch_size: int = 256) -> np.ndarray:
    """Inference-mode logits, batched to bound memory."""
    chunks = [
        model.classify(x[i : i + batch_size], train=False)
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def accuracy(model: FcnModel, x, labels, batch_size: int = 256) -> float:
    preds = predict_logits(model, x, batch_size).argmax(axis=1)
    return float((preds == np.asarray(labels)).mean())


def pretrain(
    model: FcnModel,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray],
    *,
    epochs: int = 50,
    batch_size: int = 1024,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
    patience: int = 150,
    lr_factor: float = 0.5,
    lr_floor: float = 1e-7,
    seed: int = 0,
    stop_at_val_accuracy: float | None = None,
    log_path=None,
) -> TrainingLog:
    """Train the classifier; the best-validation-accuracy weights are kept.

    The learning rate halves after `patience` consecutive batches without a
    new best loss and training stops once it falls below `lr_floor`.
    """
    x_train, y_train = train_data
    x_val, y_val = val_data
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train)
    if len(x_train) == 0 or len(x_val) == 0:
        raise DataError("training and validation sets must be non-empty")
    if len(x_train) != len(y_train):
        raise DataError(f"{len(x_train)} inputs vs {len(y_train)} labels")

    opt = nn.AdamW(model.params(), lr=lr, weight_decay=weight_decay)
    sched = nn.PlateauSchedule(lr=lr, patience=patience, factor=lr_factor, floor=lr_floor)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F]))

    log = TrainingLog()
    best_state: dict[str, np.ndarray] | None = None
    if log_path is not None:
        open(log_path, "w").close()

    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(len(x_train))
        losses = []
        correct = 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            logits = model.classify(x_train[idx], train=True)
            loss, dlogits = nn.softmax_cross_entropy(logits, y_train[idx])
            correct += int((logits.argmax(axis=1) == y_train[idx]).sum())
            losses.append(loss)
            opt.zero_grad()
            model.backward(dlogits)
            opt.lr = sched.lr
            opt.step()
            sched.step(loss)
            if sched.should_stop:
                break

        val_acc = accuracy(model, x_val, y_val, batch_size=batch_size)
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            train_accuracy=correct / len(order),
            val_accuracy=val_acc,
            lr=sched.lr,
        )
        log.epochs.append(stats)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(
                    f"{stats.epoch}\t{stats.train_loss:.6f}\t{stats.train_accuracy:.6f}"
                    f"\t{stats.val_accuracy:.6f}\t{stats.lr:.3e}\n"
                )
        if val_acc > log.best_val_accuracy or best_state is None:
            log.best_val_accuracy = val_acc
            log.best_epoch = epoch
            best_state = model.state_dict()
        if sched.should_stop:
            log.stop_reason = "lr below floor"
            break
        if stop_at_val_accuracy is not None and val_acc >= stop_at_val_accuracy:
            log.stop_reason = "validation target reached"
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    return log
