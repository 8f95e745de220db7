"""Multi-path 3D CNN: one binary-specialist path per class, joined by a dense head.

Each path is a conv/pool stack ending in a ``feature_width`` dense layer.
Paths are first trained one-vs-rest on their own class
(:func:`train_binary_path`), then frozen and concatenated; a fresh head
(dense -> relu -> dense -> softmax) learns to arbitrate between them
(:func:`assemble_multipath`, :func:`train_multipath`).
"""

from dataclasses import dataclass, field

import numpy as np

from . import losses
from .dataset import split
from .errors import PopulationError, ShapeError, TrainingError
from .metrics import confusion_matrix, f_beta, g_mean, precision_recall
from .tensor import (
    SGD,
    Activation,
    Conv3D,
    Dense,
    Flatten,
    MaxPool3D,
    Network,
    init_conv,
    init_dense,
    softmax,
)

# per-path layer templates: first-stage kernels 5, 3, 7, 3; path 4 adds a conv stage
PATH_TEMPLATES = tuple(
    [["conv", k, 8], ["relu"], ["pool", 2], ["conv", 3, 16], ["relu"]]
    + ([["conv", 3, 16], ["relu"]] if extra else [])
    + [["pool", 2]]
    for k, extra in ((5, False), (3, False), (7, False), (3, True))
)


@dataclass
class PathSpec:
    target_class: int
    layers: list
    feature_width: int = 32

    def to_dict(self):
        return {"target_class": self.target_class, "layers": self.layers,
                "feature_width": self.feature_width}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["target_class"]), [list(l) for l in d["layers"]], int(d["feature_width"]))


def fit_layers(template, dim):
    """Adapt a layer template to ``dim``.

    Convs that no longer fit are dropped together with the activation that
    follows them.  A pool whose window does not divide the current extent
    becomes a pool over the whole remaining extent.
    """
    out, extent, skip_act = [], dim, False
    for layer in template:
        kind = layer[0]
        if kind == "conv":
            k, stride = layer[1], (layer[3] if len(layer) > 3 else 1)
            if extent < k:
                skip_act = True
                continue
            extent = (extent - k) // stride + 1
        elif kind == "pool":
            if extent % layer[1]:
                layer = ["pool", extent]
            extent //= layer[1]
        elif skip_act:
            skip_act = False
            continue
        skip_act = False
        out.append(list(layer))
    return out


def default_path_specs(n_classes, dim=16, feature_width=32):
    return [
        PathSpec(c, fit_layers(PATH_TEMPLATES[c % len(PATH_TEMPLATES)], dim), feature_width)
        for c in range(n_classes)
    ]


def build_path(spec, volume_dim, rng, dtype=np.float32):
    """Initialised path network mapping ``(B, 1, D, D, D)`` to ``(B, feature_width)``."""
    layers, shape = [], (1, volume_dim, volume_dim, volume_dim)
    for i, desc in enumerate(spec.layers):
        kind = desc[0]
        if kind == "conv":
            k, ch = int(desc[1]), int(desc[2])
            stride = int(desc[3]) if len(desc) > 3 else 1
            layer = Conv3D(init_conv(rng, shape[0], ch, k, dtype), stride)
        elif kind == "pool":
            layer = MaxPool3D(int(desc[1]))
        elif kind in ("relu", "sigmoid"):
            layer = Activation(kind)
        else:
            raise ValueError(f"path layer {i}: unknown kind {kind!r}")
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ShapeError(
                f"path for class {spec.target_class}, layer {i} {desc}: {exc}"
            ) from None
        layers.append(layer)
    flat = int(np.prod(shape))
    layers += [Flatten(), Dense(init_dense(rng, flat, spec.feature_width, dtype)), Activation("relu")]
    return Network(layers)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim == 4:
        x = x[:, None]
    if x.shape[1:] != (1, dim, dim, dim):
        raise ShapeError(f"expected volumes of shape ({dim}, {dim}, {dim}), got {x.shape[2:]}")
    return x


def _forward_chunks(net, x, chunk=64):
    if len(x) <= chunk:
        return net.forward(x, keep=False)
    return np.concatenate([net.forward(x[i:i + chunk], keep=False) for i in range(0, len(x), chunk)])


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 30
    path_epochs: int = 6
    path_lr: float = 0.01
    seed: int = 0
    freeze_paths: bool = True
    path_loss: str = "bce"  # bce | focal
    path_focal_gamma: float = 2.0
    holdout_fraction: float = 0.2
    head_width: int = 64
    feature_width: int = 32
    dim: int = 16
    mixup_phase: str = "head"  # head | paths | both

    def __post_init__(self):
        if self.path_loss not in ("bce", "focal"):
            raise ValueError(f"unknown path loss {self.path_loss!r}")
        if self.mixup_phase not in ("head", "paths", "both"):
            raise ValueError(f"unknown mixup phase {self.mixup_phase!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.path_epochs < 0:
            raise ValueError("batch size must be positive and epoch counts non-negative")


# ---------------------------------------------------------------------------
# binary paths


class BinaryPathClassifier:
    """A path plus a single sigmoid output scoring membership of one class."""

    def __init__(self, path, output, target_class, dim):
        self.path = path
        self.output = output
        self.target_class = target_class
        self.dim = dim
        self.network = Network(path.layers + [output])

    def scores(self, x):
        x = _as_batch(x, self.dim)
        logits = _forward_chunks(self.network, x)[:, 0]
        return 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))


@dataclass
class PathReport:
    target_class: int
    f1: float
    g_mean: float
    confusion: list
    losses: list = field(default_factory=list)


def _binary_loss(cfg, targets):
    if cfg.path_loss == "focal":
        pos = float(np.mean(targets))
        alpha = (max(pos, 1e-3), max(1.0 - pos, 1e-3))  # alpha_neg, alpha_pos
        return lambda z, t: losses.binary_focal_loss(z, t, cfg.path_focal_gamma, alpha)
    return losses.binary_cross_entropy


def train_binary_path(path, dataset, target_class, cfg, rng, mixup=None):
    """One-vs-rest training of ``path`` on ``target_class``.

    A stratified ``holdout_fraction`` of ``dataset`` is held out and the
    returned report holds binary F1 and G-mean of the positive class there.
    """
    counts = dataset.class_counts()
    if target_class >= dataset.n_classes or counts[target_class] < 2:
        raise PopulationError(f"class {target_class} needs at least 2 samples, has "
                              f"{counts[target_class] if target_class < len(counts) else 0}")
    if counts[target_class] == len(dataset):
        raise PopulationError(f"dataset holds only class {target_class}; no negatives")
    train, held = split(dataset, 1.0 - cfg.holdout_fraction, True, int(rng.integers(2**31)))
    dim = dataset.dim
    output = Dense(init_dense(rng, path.layers[-2].params.weights.shape[0], 1))
    clf = BinaryPathClassifier(path, output, target_class, dim)
    net = clf.network
    x = _as_batch(train.volumes, dim)
    t = (train.labels == target_class).astype(np.float32)
    loss_fn = _binary_loss(cfg, t)
    use_mixup = mixup is not None and mixup.enabled and cfg.mixup_phase in ("paths", "both")
    opt = SGD(net.parameters(), cfg.path_lr, cfg.momentum)
    log = []
    for epoch in range(cfg.path_epochs):
        perm = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, tb = x[idx], t[idx]
            if use_mixup:
                xb, tb2 = losses.mixup_batch(xb, tb[:, None], mixup, rng)
                tb = tb2[:, 0]
            z = net.forward(xb)[:, 0]
            loss, dz = loss_fn(z, tb)
            if not np.isfinite(loss):
                raise TrainingError(f"path {target_class}: non-finite loss in epoch {epoch}")
            net.backward(dz[:, None].astype(np.float32))
            opt.step(net.gradients())
            total += loss * len(idx)
        log.append(total / len(x))
    preds = (clf.scores(held.volumes) >= 0.5).astype(np.int64)
    truth = (held.labels == target_class).astype(np.int64)
    cm = confusion_matrix(preds, truth, 2)
    report = PathReport(
        target_class,
        f_beta(*precision_recall(cm, 1)),
        g_mean(cm, 1),
        cm.counts.tolist(),
        log,
    )
    return clf, report


def ovr_scores(classifiers, x):
    return np.stack([clf.scores(x) for clf in classifiers], axis=-1)


def ovr_predict(classifiers, x, n_classes=None):
    """Label of each sample as the class whose binary classifier scores highest."""
    if n_classes is not None and len(classifiers) != n_classes:
        raise ShapeError(f"{len(classifiers)} binary classifiers for {n_classes} classes")
    labels = np.argmax(ovr_scores(classifiers, x), axis=-1)
    return int(labels[0]) if np.ndim(x) == 3 else labels


# ---------------------------------------------------------------------------
# the assembled model


class MultiPathModel:
    def __init__(self, paths, head, n_classes, specs, dim, frozen_paths=True):
        if len(paths) != n_classes:
            raise ShapeError(f"{len(paths)} paths for {n_classes} classes")
        self.paths = paths
        self.head = head
        self.n_classes = n_classes
        self.specs = specs
        self.dim = dim
        self.frozen_paths = frozen_paths
        self.head_width = head.layers[0].params.weights.shape[0]

    @property
    def feature_widths(self):
        return [s.feature_width for s in self.specs]

    def features(self, x, keep=False):
        x = _as_batch(x, self.dim)
        if keep:
            return np.concatenate([p.forward(x, keep=True) for p in self.paths], axis=1)
        return np.concatenate([_forward_chunks(p, x) for p in self.paths], axis=1)

    def forward(self, x, keep=True):
        return self.head.forward(self.features(x, keep=keep), keep=keep)

    def backward(self, dlogits):
        dfeat = self.head.backward(dlogits)
        if not self.frozen_paths:
            offsets = np.cumsum([0] + self.feature_widths)
            for p, lo, hi in zip(self.paths, offsets[:-1], offsets[1:]):
                p.backward(np.ascontiguousarray(dfeat[:, lo:hi]))
        return dfeat

    def trainable_parameters(self):
        params = [] if self.frozen_paths else [q for p in self.paths for q in p.parameters()]
        return params + self.head.parameters()

    def trainable_gradients(self):
        grads = [] if self.frozen_paths else [g for p in self.paths for g in p.gradients()]
        return grads + self.head.gradients()

    def all_parameters(self):
        return [q for p in self.paths for q in p.parameters()] + self.head.parameters()

    def predict_probs(self, x):
        single = np.ndim(x) == 3
        probs = softmax(self.head.forward(self.features(x), keep=False).astype(np.float64))
        return probs[0] if single else probs

    def predict(self, x):
        return np.argmax(self.predict_probs(x), axis=-1)

    def with_head(self, head):
        return MultiPathModel(self.paths, head, self.n_classes, self.specs, self.dim, self.frozen_paths)

    def copy(self):
        return MultiPathModel([p.copy() for p in self.paths], self.head.copy(), self.n_classes,
                              self.specs, self.dim, self.frozen_paths)


def build_head(in_width, n_classes, rng, width=64, dtype=np.float32):
    return Network([
        Dense(init_dense(rng, in_width, width, dtype)),
        Activation("relu"),
        Dense(init_dense(rng, width, n_classes, dtype)),
    ])


def assemble_multipath(paths, n_classes, rng, specs=None, dim=None, head_width=64,
                       frozen_paths=True):
    """Concatenate trained paths into a model with a freshly initialised head.

    ``paths`` may be path networks or :class:`BinaryPathClassifier` objects.
    """
    if len(paths) != n_classes:
        raise ShapeError(f"{len(paths)} paths for {n_classes} classes")
    nets, widths = [], []
    for p in paths:
        if isinstance(p, BinaryPathClassifier):
            dim = dim or p.dim
            p = p.path
        nets.append(p)
        widths.append(p.layers[-2].params.weights.shape[0])
    if specs is None:
        specs = [PathSpec(c, [], w) for c, w in enumerate(widths)]
    if dim is None:
        raise ValueError("volume dim unknown; pass dim=")
    head = build_head(sum(widths), n_classes, rng, head_width)
    return MultiPathModel(nets, head, n_classes, specs, dim, frozen_paths)


class HeadClassifier:
    """A trained head that classifies precomputed path features."""

    def __init__(self, head):
        self.head = head

    def predict_probs(self, features):
        return softmax(self.head.forward(np.asarray(features, dtype=np.float32), keep=False)
                       .astype(np.float64))


def _loss_fn(loss, focal):
    if loss == "ce":
        return losses.cross_entropy
    if loss == "focal":
        cfg = focal if focal is not None else losses.FocalConfig()
        return lambda p, y: losses.focal_loss(p, y, cfg)
    raise ValueError(f"unknown loss {loss!r}")


def train_head(head, features, labels, n_classes, cfg, rng, loss="ce", focal=None):
    """Mini-batch SGD of a head on fixed features; returns per-epoch mean losses."""
    model_input = np.asarray(features, dtype=np.float32)
    y = losses.one_hot(labels, n_classes)
    loss_fn = _loss_fn(loss, focal)
    opt = SGD(head.parameters(), cfg.lr, cfg.momentum)
    log = []
    n = len(model_input)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            logits = head.forward(model_input[idx])
            value, dz = loss_fn(softmax(logits), y[idx])
            if not np.isfinite(value):
                raise TrainingError(f"head training diverged in epoch {epoch}: loss {value}")
            head.backward(dz.astype(np.float32))
            opt.step(head.gradients())
            total += value * len(idx)
        log.append(total / n)
    return log


def train_multipath(model, dataset, loss="ce", mixup=None, cfg=None, rng=None, focal=None):
    """Train the head (and the paths too when not frozen).

    With frozen paths and no mixup the path features are computed once and
    the head trains on them directly.  Otherwise every (mixed) batch passes
    through the paths.  Returns ``(model, per-epoch losses)``.
    """
    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    counts = dataset.class_counts()
    if dataset.n_classes != model.n_classes:
        raise ShapeError(f"dataset has {dataset.n_classes} classes, model {model.n_classes}")
    if np.any(counts == 0):
        raise PopulationError(f"training data must cover every class, counts {counts.tolist()}")
    use_mixup = mixup is not None and mixup.enabled and cfg.mixup_phase in ("head", "both")
    if model.frozen_paths and not use_mixup:
        feats = model.features(dataset.volumes)
        log = train_head(model.head, feats, dataset.labels, model.n_classes, cfg, rng, loss, focal)
        return model, log

    x = _as_batch(dataset.volumes, model.dim)
    y = losses.one_hot(dataset.labels, model.n_classes)
    loss_fn = _loss_fn(loss, focal)
    opt = SGD(model.trainable_parameters(), cfg.lr, cfg.momentum)
    # Frozen paths under mixup: the first conv is affine, so mixing its cached
    # outputs equals running the mixed input through it (up to rounding).
    stems = _stem_cache(model, x) if model.frozen_paths else None
    log = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            yb = y[idx]
            plan = losses.mixup_plan(len(idx), mixup, rng) if use_mixup else None
            if plan is not None:
                yb = losses.apply_mixup(yb, *plan)
            if stems is not None:
                feats = np.concatenate([
                    tail.forward(losses.apply_mixup(s[idx], *plan), keep=False)
                    for tail, s in stems
                ], axis=1)
            else:
                xb = x[idx] if plan is None else losses.apply_mixup(x[idx], *plan)
                feats = model.features(xb, keep=not model.frozen_paths)
            logits = model.head.forward(feats)
            value, dz = loss_fn(softmax(logits), yb)
            if not np.isfinite(value):
                raise TrainingError(f"training diverged in epoch {epoch}: loss {value}")
            model.backward(dz.astype(np.float32))
            opt.step(model.trainable_gradients())
            total += value * len(idx)
        log.append(total / len(x))
    return model, log


def _stem_cache(model, x):
    """Per path: (remaining layers, first-layer outputs for all of ``x``)."""
    out = []
    for p in model.paths:
        if not isinstance(p.layers[0], Conv3D):
            return None
        out.append((Network(p.layers[1:]), _forward_chunks(Network(p.layers[:1]), x)))
    return out


def predict_probs(model, x):
    """Class probabilities for one volume (or a batch) from a trained model."""
    return model.predict_probs(x)
