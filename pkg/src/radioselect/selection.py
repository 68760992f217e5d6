"""Patient-specific feature selection with a jointly trained classifier.

A small convolutional weighting network looks at the study (original views
plus persona views, channel-stacked and downsampled) and emits one
probability per feature in the layout. During training those probabilities
softly weight the z-scored feature pool before a logistic head; both parts
are optimized together on the task's binary cross-entropy. At inference the
probabilities are hard-thresholded, so the classifier sees each feature
either at its normalized value or exactly zero.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import checkpoint
from .errors import ConfigurationError, DegenerateDataError, InputError, UsageError
from .metrics import youden_threshold
from .network import NetworkConfig, Parameters, init_parameters, network_forward
from .optim import adam_step, gradients, init_adam_state
from .radiomics import VIEW_ORDER, FeatureLayout, FeaturePool, assemble_feature_pool
from .volume import block_mean, resize_trilinear

__all__ = [
    "TASKS",
    "SelectorTrainConfig",
    "SelectorModel",
    "SelectedFeatures",
    "InferenceResult",
    "make_weighting_config",
    "make_selector_model",
    "predict_feature_probabilities",
    "weight_features",
    "logistic_forward",
    "train_joint",
    "binarize_select",
    "predict_probability",
    "infer",
    "calibrate_youden",
    "save_selector_model",
    "load_selector_model",
]

TASKS = ("abnormal", "acl", "meniscus")

DEFAULT_SELECTION_THRESHOLD = 0.4
DEFAULT_NET_EXTENTS = (8, 8, 8)

# untrained feature probability: sits below the default selection threshold,
# so only features that training actively promotes end up selected
UNTRAINED_PROBABILITY = 0.3


def make_weighting_config(layout: FeatureLayout, net_extents=DEFAULT_NET_EXTENTS,
                          base_channels: int = 8, seed: int = 0) -> NetworkConfig:
    """Fully convolutional: two stride-2 stages collapse the input onto the
    subpatch grid, then a shared 1x1 readout emits one channel per
    (view, source, feature name) at every grid cell.

    Weight sharing across cells is the point: a feature's selection logit is
    read from the conv features of its own subpatch with the same readout
    weights everywhere, so evidence learned at one location transfers to all
    of them. The trunk output is mean-centered across cells before the
    readout, which removes the constant component the readout could
    otherwise use to promote a channel at every cell at once: one cell's
    logit can only rise above the shared bias by pushing its siblings below
    it, so selection has to be earned from local evidence. Output length
    equals ``layout.total``, ordered channel-major (see
    ``_network_slot_order`` for the mapping back to pool order).

    Input channels: one per (source, view) pair, originals first, in layout
    view order. Each stride-2 stage maps extent ``e`` to ``ceil(e / 2)``, and
    the input extents must land exactly on ``layout.grid`` after both."""
    c = int(base_channels)
    if c < 1:
        raise InputError("base_channels must be at least 1")
    net_extents = tuple(int(e) for e in net_extents)
    reduced = tuple(((e + 1) // 2 + 1) // 2 for e in net_extents)
    if reduced != tuple(layout.grid):
        raise ConfigurationError(
            f"net_extents {net_extents} reduce to {reduced} after two stride-2 "
            f"stages, but the feature grid is {tuple(layout.grid)}; "
            f"use 4 * grid per axis")
    in_channels = len(layout.sources) * len(layout.views)
    readout = layout.total // layout.patch_count
    layers = [
        {"kind": "conv3d", "channels": c, "kernel": 3, "stride": 2, "activation": "silu"},
        {"kind": "conv3d", "channels": 2 * c, "kernel": 3, "stride": 2, "activation": "silu"},
        {"kind": "center"},
        {"kind": "conv3d", "channels": readout, "kernel": 1, "stride": 1,
         "activation": "identity"},
        {"kind": "flatten"},
    ]
    return NetworkConfig(input_shape=(in_channels,) + net_extents,
                         layers=layers, seed=seed)


def _network_slot_order(layout: FeatureLayout) -> np.ndarray:
    """Pool index of every network output position.

    The flattened network output is channel-major: all grid cells of the
    first (view, source, name) channel, then the next channel. The pool
    nests (view, subpatch, source, name). ``order[j]`` is the pool index at
    network position ``j``; gathering a pool vector with ``order`` aligns it
    with the network, scattering through ``order`` maps network outputs back.
    """
    v, p = len(layout.views), layout.patch_count
    s, n = len(layout.sources), len(layout.feature_names)
    return np.arange(layout.total).reshape(v, p, s, n).transpose(0, 2, 3, 1).ravel()


@dataclass
class SelectorTrainConfig:
    """``selection_enabled=False`` drops the weighting network entirely
    (plain logistic regression on the z-scored pool, the selection-off
    ablation); ``sources=("original",)`` drops persona features (the
    persona-off ablation)."""

    task: str
    views: tuple = tuple(VIEW_ORDER)
    grid: tuple = (2, 2, 2)
    sources: tuple = ("original", "persona")
    selection_threshold: float = DEFAULT_SELECTION_THRESHOLD
    selection_enabled: bool = True
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    net_extents: tuple = DEFAULT_NET_EXTENTS
    base_channels: int = 8

    def __post_init__(self):
        if self.task not in TASKS:
            raise InputError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not 0.0 <= self.selection_threshold <= 1.0:
            raise UsageError("selection_threshold must be in [0, 1]")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise UsageError("weight_decay must be >= 0")

    def make_layout(self) -> FeatureLayout:
        return FeatureLayout(views=self.views, grid=self.grid, sources=self.sources)


@dataclass
class SelectorModel:
    """Weighting network plus logistic head plus frozen normalization.

    ``decision_threshold`` stays None until Youden calibration; inference
    refuses to run without it. ``feature_std`` is strictly positive: features
    constant on the training set are stored with std 1 so they pass through
    unscaled.
    """

    task: str
    layout: FeatureLayout
    config: NetworkConfig
    params: Parameters
    head_weights: np.ndarray
    head_bias: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    selection_threshold: float = DEFAULT_SELECTION_THRESHOLD
    decision_threshold: float = None
    net_extents: tuple = DEFAULT_NET_EXTENTS
    seed: int = 0
    fingerprint: str = ""

    def __post_init__(self):
        if self.task not in TASKS:
            raise InputError(f"unknown task {self.task!r}; expected one of {TASKS}")
        f = self.layout.total
        self.head_weights = np.asarray(self.head_weights, dtype=np.float64)
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_std = np.asarray(self.feature_std, dtype=np.float64)
        for name, arr in (("head_weights", self.head_weights),
                          ("feature_mean", self.feature_mean),
                          ("feature_std", self.feature_std)):
            if arr.shape != (f,):
                raise InputError(f"{name} has shape {arr.shape}, layout expects ({f},)")
        if np.any(self.feature_std <= 0):
            raise InputError("feature_std entries must be strictly positive")
        if not 0.0 <= self.selection_threshold <= 1.0:
            raise UsageError("selection_threshold must be in [0, 1]")
        if self.decision_threshold is not None and not 0.0 <= self.decision_threshold <= 1.0:
            raise UsageError("decision_threshold must be in [0, 1]")
        self.net_extents = tuple(int(e) for e in self.net_extents)

    @property
    def normalization(self) -> tuple:
        return self.feature_mean, self.feature_std


def _structured_trunk_init(params: Parameters, layout: FeatureLayout) -> None:
    """Overwrite the leading trunk filters so the network starts out as a
    persona-discrepancy detector.

    The first stage takes signed original-minus-persona differences per view
    (both polarities) at the kernel center; the second stage sums each
    difference map over its local neighborhood. Everything stays trainable
    and the remaining filters keep their random draw, so training can refine
    or abandon the prior, but the initial gradient already points at cells
    where the persona disagrees with the original. Persona-free layouts have
    no counterpart to subtract and keep the fully random start."""
    if len(layout.sources) != 2:
        return
    v_count = len(layout.views)
    w1 = params.tensors["layer0.weight"].data
    # input channel order per _stacked_input: originals first, then personas
    gain = 4.0
    for f in range(min(2 * v_count, w1.shape[0])):
        view, sign = f % v_count, (1.0 if f < v_count else -1.0)
        w1[f] = 0.0
        w1[f, view, 1, 1, 1] = sign * gain
        w1[f, v_count + view, 1, 1, 1] = -sign * gain
    w2 = params.tensors["layer1.weight"].data
    for k in range(min(2 * v_count, w1.shape[0], w2.shape[0])):
        w2[k] = 0.0
        w2[k, k] = 1.0


def make_selector_model(task: str, layout: FeatureLayout = None,
                        selection_threshold: float = DEFAULT_SELECTION_THRESHOLD,
                        net_extents=DEFAULT_NET_EXTENTS, base_channels: int = 8,
                        seed: int = 0) -> SelectorModel:
    """Untrained model: every feature probability is UNTRAINED_PROBABILITY,
    the logistic head is zero (class probability 0.5), normalization is the
    identity."""
    layout = layout if layout is not None else FeatureLayout()
    config = make_weighting_config(layout, net_extents, base_channels, seed)
    params = init_parameters(config)
    _structured_trunk_init(params, layout)
    # zero the last parametric layer (the readout) so every logit starts at
    # its bias, which is set to the untrained prior
    last = max(int(name.split(".")[0][len("layer"):]) for name in params.tensors)
    params.tensors[f"layer{last}.weight"].data[:] = 0.0
    params.tensors[f"layer{last}.bias"].data[:] = np.log(
        UNTRAINED_PROBABILITY / (1.0 - UNTRAINED_PROBABILITY))
    f = layout.total
    return SelectorModel(task=task, layout=layout, config=config, params=params,
                         head_weights=np.zeros(f), head_bias=0.0,
                         feature_mean=np.zeros(f), feature_std=np.ones(f),
                         selection_threshold=selection_threshold,
                         net_extents=net_extents, seed=seed)


def _stacked_input(layout: FeatureLayout, net_extents, study) -> np.ndarray:
    """(C, d, h, w) float32 stack: original views then persona views (when
    the layout includes them), downsampled to the network input extents.

    Block averaging is used whenever the extents divide evenly so thin
    structures survive the reduction; other shapes fall back to trilinear
    resizing."""
    channels = []
    for source in layout.sources:
        store = study.volumes if source == "original" else study.personas
        for view in layout.views:
            if view not in store:
                raise InputError(
                    f"study {study.study_id} is missing the {source} volume for view {view!r}")
            vol = store[view]
            if all(e % t == 0 for e, t in zip(vol.extents, net_extents)):
                vol = block_mean(vol, net_extents)
            else:
                vol = resize_trilinear(vol, net_extents)
            channels.append(vol.intensities)
    return np.stack(channels).astype(np.float32)


def predict_feature_probabilities(model: SelectorModel, study) -> np.ndarray:
    """One probability in (0, 1) per layout index, deterministic in
    (model, study). Network outputs are scattered from the network's
    channel-major order back into pool order."""
    x = _stacked_input(model.layout, model.net_extents, study)
    with ad.no_grad():
        logits = network_forward(model.config, model.params, ad.Tensor(x[None]))
    p = np.empty(model.layout.total)
    p[_network_slot_order(model.layout)] = expit(logits.data[0].astype(np.float64))
    return p


def _check_lengths(n: int, **vectors) -> dict:
    out = {}
    for name, v in vectors.items():
        arr = np.asarray(v, dtype=np.float64)
        if arr.shape != (n,):
            raise UsageError(f"{name} has shape {arr.shape}, expected ({n},)")
        out[name] = arr
    return out


def weight_features(pool: FeaturePool, p, normalization) -> np.ndarray:
    """Soft-weighted training vector: f^w_i = p_i * (f_i - mu_i) / sigma_i."""
    mean, std = normalization
    n = len(pool.values)
    v = _check_lengths(n, p=p, mean=mean, std=std)
    z = (pool.values - v["mean"]) / v["std"]
    return v["p"] * z


def logistic_forward(weights, bias, features) -> float:
    """sigma(w . f + b), always in (0, 1)."""
    weights = np.asarray(weights, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if weights.shape != features.shape or weights.ndim != 1:
        raise UsageError(
            f"weights {weights.shape} and features {features.shape} must be equal-length vectors")
    return float(expit(weights @ features + float(bias)))


@dataclass
class SelectedFeatures:
    """Hard selection: mask in {0,1}^F and f^s = mask * z."""

    mask: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mask.shape != self.values.shape or self.mask.ndim != 1:
            raise InputError("mask and values must be equal-length vectors")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise InputError("mask entries must be 0 or 1")
        if np.any(self.values[self.mask == 0] != 0.0):
            raise InputError("unselected features must have value 0")

    @property
    def count(self) -> int:
        return int(np.sum(self.mask))


def binarize_select(p, pool: FeaturePool, normalization, selection_threshold: float) -> SelectedFeatures:
    """Hard selection at the threshold: p_i >= T selects (inclusive)."""
    if not 0.0 <= selection_threshold <= 1.0:
        raise UsageError("selection_threshold must be in [0, 1]")
    mean, std = normalization
    n = len(pool.values)
    v = _check_lengths(n, p=p, mean=mean, std=std)
    mask = (v["p"] >= selection_threshold).astype(np.int64)
    z = (pool.values - v["mean"]) / v["std"]
    return SelectedFeatures(mask=mask, values=np.where(mask == 1, z, 0.0))


def _as_pool(model: SelectorModel, study, pool) -> FeaturePool:
    if pool is None:
        return assemble_feature_pool(study.volumes, study.personas, model.layout)
    if isinstance(pool, FeaturePool):
        return pool
    return FeaturePool(model.layout, pool)


def _selection_state(model: SelectorModel, study, pool=None) -> tuple:
    pool = _as_pool(model, study, pool)
    if model.selection_threshold == 0.0:
        # threshold 0 selects everything no matter what the network says, so
        # this is plain logistic regression on the full normalized pool
        p = np.ones(model.layout.total)
    else:
        p = predict_feature_probabilities(model, study)
    selected = binarize_select(p, pool, model.normalization, model.selection_threshold)
    probability = logistic_forward(model.head_weights, model.head_bias, selected.values)
    return p, selected, probability


def predict_probability(model: SelectorModel, study, pool=None) -> float:
    """Class probability through the hard-selection path (no decision
    threshold needed). ``pool`` optionally injects precomputed feature
    values for the study (skips re-extraction)."""
    return _selection_state(model, study, pool)[2]


@dataclass
class InferenceResult:
    probability: float
    selected: SelectedFeatures
    decision: int
    report: dict


def infer(model: SelectorModel, study, pool=None) -> InferenceResult:
    """Classify one study and decode the selected features for the
    interpretability report."""
    if model.decision_threshold is None:
        raise UsageError("model is not calibrated: decision_threshold is unset")
    p, selected, probability = _selection_state(model, study, pool)
    decision = int(probability >= model.decision_threshold)
    entries = []
    for i in np.flatnonzero(selected.mask):
        view, patch, source, name = model.layout.decode(int(i))
        entries.append({
            "index": int(i),
            "view": view,
            "subpatch": patch,
            "source": source,
            "name": name,
            "probability": float(p[i]),
            "value": float(selected.values[i]),
            "contribution": float(model.head_weights[i] * selected.values[i]),
        })
    entries.sort(key=lambda e: (-abs(e["contribution"]), e["index"]))
    report = {
        "study_id": study.study_id,
        "task": model.task,
        "probability": probability,
        "decision": decision,
        "decision_threshold": model.decision_threshold,
        "selection_threshold": model.selection_threshold,
        "selected_count": selected.count,
        "selected": entries,
    }
    return InferenceResult(probability=probability, selected=selected,
                           decision=decision, report=report)


def _task_labels(studies, task: str) -> np.ndarray:
    labels = []
    for study in studies:
        if task not in study.labels:
            raise InputError(f"study {study.study_id} has no label for task {task!r}")
        labels.append(study.labels[task])
    return np.asarray(labels, dtype=np.int64)


def _fit_normalization(matrix: np.ndarray) -> tuple:
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    std[std == 0.0] = 1.0
    return mean, std


def _pool_matrix(studies, layout: FeatureLayout, pools) -> np.ndarray:
    if pools is None:
        return np.stack([
            assemble_feature_pool(s.volumes, s.personas, layout).values for s in studies])
    matrix = np.asarray(pools, dtype=np.float64)
    if matrix.shape != (len(studies), layout.total):
        raise UsageError(
            f"pools has shape {matrix.shape}, expected ({len(studies)}, {layout.total})")
    return matrix


def train_joint(studies, config: SelectorTrainConfig, seed: int = 0, pools=None) -> tuple:
    """Jointly fit the weighting network and the logistic head.

    Feature pools and network inputs are computed once up front (``pools``
    optionally injects precomputed per-study feature vectors, row-aligned
    with ``studies``); normalization is fit on this training set and frozen
    into the model. Returns (model, losses) where losses[0] is the full-set
    BCE before any update and each later entry is the mean batch BCE of one
    epoch. Deterministic under (studies, config, seed) in single-threaded
    mode.

    ``config.weight_decay`` applies decoupled per-step shrinkage to weight
    tensors after each Adam update. Features whose head weight decays to
    zero stop sending gradient to the weighting network, so their selection
    probability stays at the untrained prior instead of saturating; this is
    what keeps hard selection sparse on small training sets.

    With ``config.selection_enabled`` False only the logistic head is
    trained on the full z-scored pool and the model's selection threshold is
    forced to 0, which makes inference the plain logistic path.
    """
    studies = list(studies)
    if not studies:
        raise InputError("training set is empty")
    y = _task_labels(studies, config.task)
    if len(np.unique(y)) < 2:
        raise DegenerateDataError(
            f"training set has a single class for task {config.task!r}")

    layout = config.make_layout()
    pool_matrix = _pool_matrix(studies, layout, pools)
    mean, std = _fit_normalization(pool_matrix)
    z_matrix = ((pool_matrix - mean) / std).astype(np.float32)

    threshold = config.selection_threshold if config.selection_enabled else 0.0
    model = make_selector_model(config.task, layout, threshold,
                                config.net_extents, config.base_channels, seed)
    model.feature_mean = mean
    model.feature_std = std

    f = layout.total
    if config.selection_enabled:
        inputs = np.stack([_stacked_input(layout, config.net_extents, s) for s in studies])
        # align pool columns with the network's channel-major output order;
        # the head trains in that order and is scattered back at the end
        net_order = _network_slot_order(layout)
        z_matrix = z_matrix[:, net_order]
        # the readout bias stays frozen at the untrained prior: with centered
        # trunk features each channel's mean cell logit is pinned there, so a
        # feature can only clear the selection threshold on input evidence,
        # never on a learned global offset
        last = max(int(name.split(".")[0][len("layer"):]) for name in model.params.tensors)
        train_params = Parameters({name: t for name, t in model.params.tensors.items()
                                   if name != f"layer{last}.bias"})
    else:
        train_params = Parameters({})
    train_params.tensors["head.weight"] = ad.parameter(np.zeros((f, 1)))
    train_params.tensors["head.bias"] = ad.parameter(np.zeros(1))

    def batch_loss(idx) -> ad.Tensor:
        weighted = ad.Tensor(z_matrix[idx])
        if config.selection_enabled:
            logits = network_forward(model.config, model.params, ad.Tensor(inputs[idx]))
            weighted = ad.mul(ad.sigmoid(logits), weighted)
        head = ad.dense(weighted, train_params["head.weight"], train_params["head.bias"])
        return ad.mul(ad.bce_loss(ad.sigmoid(head), y[idx].reshape(-1, 1)), 1.0 / len(idx))

    with ad.no_grad():
        initial = float(batch_loss(np.arange(len(studies))).data)
    losses = [initial]

    state = init_adam_state(train_params)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1EC7]))
    n = len(studies)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = batch_loss(idx)
            grads = gradients(loss, train_params)
            state = adam_step(train_params, grads, state, config.learning_rate)
            if config.weight_decay:
                # decoupled decay on weight tensors only: biases carry the
                # untrained selection prior and must keep it
                shrink = 1.0 - config.learning_rate * config.weight_decay
                for name, tensor in train_params.tensors.items():
                    if name.endswith(".weight"):
                        tensor.data *= shrink
            batch_losses.append(float(loss.data))
        losses.append(float(np.mean(batch_losses)))

    head = train_params["head.weight"].data[:, 0].astype(np.float64)
    if config.selection_enabled:
        scattered = np.empty_like(head)
        scattered[net_order] = head
        head = scattered
    model.head_weights = head.copy()
    model.head_bias = float(train_params["head.bias"].data[0])
    digest = hashlib.sha256()
    for study in sorted(studies, key=lambda s: s.study_id):
        digest.update(f"{study.study_id}:{study.labels[config.task]};".encode())
    digest.update((f"task={config.task};views={','.join(layout.views)};"
                   f"grid={layout.grid};sources={','.join(layout.sources)};"
                   f"tsel={threshold};selection={config.selection_enabled};"
                   f"epochs={config.epochs};wd={config.weight_decay};"
                   f"seed={seed}").encode())
    model.fingerprint = digest.hexdigest()[:16]
    return model, losses


def calibrate_youden(model: SelectorModel, studies, pools=None) -> float:
    """Set the decision threshold to the Youden-optimal value on a
    validation set containing both classes."""
    studies = list(studies)
    if not studies:
        raise InputError("validation set is empty")
    y = _task_labels(studies, model.task)
    matrix = _pool_matrix(studies, model.layout, pools)
    scores = np.asarray([
        predict_probability(model, s, matrix[i]) for i, s in enumerate(studies)])
    threshold, _ = youden_threshold(scores, y)
    model.decision_threshold = threshold
    return threshold


def save_selector_model(path, model: SelectorModel, step: int = 0) -> None:
    tensors = dict(model.params.tensors)
    tensors["head.weight"] = ad.parameter(model.head_weights, dtype=np.float64)
    tensors["head.bias"] = ad.parameter(np.array([model.head_bias]), dtype=np.float64)
    tensors["norm.mean"] = ad.parameter(model.feature_mean, dtype=np.float64)
    tensors["norm.std"] = ad.parameter(model.feature_std, dtype=np.float64)
    meta = {
        "kind": "feature-selector",
        "task": model.task,
        "layout": model.layout.to_dict(),
        "selection_threshold": model.selection_threshold,
        "decision_threshold": model.decision_threshold,
        "net_extents": list(model.net_extents),
        "fingerprint": model.fingerprint,
        "config": model.config.to_dict(),
    }
    checkpoint.save_parameters(path, Parameters(tensors), seed=model.seed,
                               step=step, meta=meta)


def load_selector_model(path) -> SelectorModel:
    params, header = checkpoint.load_parameters(path)
    meta = header.get("meta", {})
    if meta.get("kind") != "feature-selector":
        raise InputError(f"checkpoint at {path} is not a selector model")
    tensors = dict(params.tensors)
    head_w = tensors.pop("head.weight").data
    head_b = float(tensors.pop("head.bias").data[0])
    mean = tensors.pop("norm.mean").data
    std = tensors.pop("norm.std").data
    return SelectorModel(
        task=meta["task"],
        layout=FeatureLayout.from_dict(meta["layout"]),
        config=NetworkConfig.from_dict(meta["config"]),
        params=Parameters(tensors),
        head_weights=head_w,
        head_bias=head_b,
        feature_mean=mean,
        feature_std=std,
        selection_threshold=meta["selection_threshold"],
        decision_threshold=meta["decision_threshold"],
        net_extents=tuple(meta["net_extents"]),
        seed=int(header.get("seed", 0)),
        fingerprint=meta.get("fingerprint", ""),
    )
