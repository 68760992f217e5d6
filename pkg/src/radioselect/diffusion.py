"""Masked-conditional DDPM for healthy-persona generation.

A single denoiser is trained on healthy volumes from all views jointly.
Conditioning is channel concatenation of (x_t, masked x0, mask); the
objective is epsilon-prediction with uniformly sampled timesteps; reverse
sampling is ancestral with posterior variance beta_t. Generation runs at a
reduced internal resolution and the result is resized back up; voxels
outside the mask are then replaced by the original input exactly, so a
persona can only differ from the patient inside the masked box.

Intensities are assumed normalized to [0,1] and are affinely mapped to
[-1,1] around the network.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .autodiff import Tensor, mean_all, no_grad, square, sub
from .errors import InputError, UsageError
from .network import NetworkConfig, Parameters, infer_shapes, init_parameters, network_forward
from .optim import AdamState, adam_step, gradients, init_adam_state
from .volume import Volume, block_mean, resize_trilinear

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_MASK_FRACTIONS = (0.5, 0.3, 0.5)
DEFAULT_INTERNAL_EXTENTS = (16, 32, 32)


@dataclass
class DiffusionSchedule:
    timesteps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha for 1-indexed step t."""
        if not 1 <= t <= self.timesteps:
            raise InputError(f"t={t} outside schedule range [1, {self.timesteps}]")
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.timesteps:
            raise InputError(f"t={t} outside schedule range [1, {self.timesteps}]")
        return float(self.betas[t - 1])


def linear_beta_schedule(timesteps: int, beta_start: float = DEFAULT_BETA_START,
                         beta_end: float = DEFAULT_BETA_END) -> DiffusionSchedule:
    if timesteps < 2:
        raise InputError(f"schedule needs at least 2 timesteps, got {timesteps}")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise InputError("betas must lie in (0, 1)")
    alpha_bars = np.cumprod(1.0 - betas)
    return DiffusionSchedule(timesteps, float(beta_start), float(beta_end), betas, alpha_bars)


@dataclass
class MaskBox:
    """Axis-aligned box; 1 inside, 0 outside."""

    extents: tuple
    fractions: tuple
    start: tuple
    size: tuple

    def slices(self):
        return tuple(slice(s, s + n) for s, n in zip(self.start, self.size))

    def array(self, dtype=np.float32) -> np.ndarray:
        arr = np.zeros(self.extents, dtype=dtype)
        arr[self.slices()] = 1
        return arr


def make_center_mask(extents, fractions) -> MaskBox:
    extents = tuple(int(n) for n in extents)
    fractions = tuple(float(f) for f in fractions)
    if len(extents) != 3 or len(fractions) != 3:
        raise InputError("extents and fractions must be 3-vectors")
    for f in fractions:
        if not 0 < f <= 1:
            raise InputError(f"mask fraction {f} outside (0, 1]")
    size = tuple(int(np.floor(f * n)) for f, n in zip(fractions, extents))
    if any(s == 0 for s in size):
        raise InputError(f"mask box has a zero-size axis: {size} from extents {extents}")
    start = tuple((n - s) // 2 for n, s in zip(extents, size))
    return MaskBox(extents, fractions, start, size)


def q_sample(x0: Volume, t: int, noise: Volume, schedule: DiffusionSchedule) -> Volume:
    if noise.extents != x0.extents:
        raise InputError(f"noise extents {noise.extents} != x0 extents {x0.extents}")
    ab = schedule.alpha_bar(t)
    xt = np.sqrt(ab) * x0.intensities.astype(np.float64) \
        + np.sqrt(1.0 - ab) * noise.intensities.astype(np.float64)
    return Volume(xt.astype(np.float32), x0.spacing)


def sinusoidal_time_embedding(ts, dim: int) -> np.ndarray:
    """(B, dim) embedding: first half sines, second half cosines, with
    log-spaced frequencies from 1 down to 1/10000."""
    if dim < 2 or dim % 2 != 0:
        raise UsageError(f"embedding dim must be even and >= 2, got {dim}")
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, -np.log(10000.0), half))
    ang = ts[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb.astype(np.float32)


def make_denoiser_config(internal_extents=DEFAULT_INTERNAL_EXTENTS, base_channels: int = 8,
                         temb_dim: int = 32, seed: int = 0,
                         tail_channels: int = None) -> NetworkConfig:
    """3-level encoder/decoder with skip connections and a timestep
    embedding added at each encoder level. Input channels: x_t, masked x0,
    mask. Most decoder mixing happens at half resolution; by default the
    full-res tail is a narrow 3x3 conv, which keeps per-forward cost
    desk-friendly (the full-res stage dominates the arithmetic otherwise).
    tail_channels widens that tail when sample fidelity matters more than
    speed."""
    c = base_channels
    half = max(c // 2, 1) if tail_channels is None else int(tail_channels)
    if half < 1:
        raise InputError("tail_channels must be at least 1")
    layers = [
        {"kind": "conv3d", "channels": c, "kernel": 3, "activation": "silu"},
        {"kind": "time_embed"},
        {"kind": "save", "tag": "l1"},
        {"kind": "conv3d", "channels": 2 * c, "kernel": 3, "stride": 2, "activation": "silu"},
        {"kind": "time_embed"},
        {"kind": "save", "tag": "l2"},
        {"kind": "conv3d", "channels": 4 * c, "kernel": 3, "stride": 2, "activation": "silu"},
        {"kind": "time_embed"},
        {"kind": "resblock", "channels": 4 * c, "kernel": 3, "activation": "silu"},
        {"kind": "upsample", "factor": 2},
        {"kind": "concat", "tag": "l2"},
        {"kind": "conv3d", "channels": 2 * c, "kernel": 1, "activation": "silu"},
        {"kind": "conv3d", "channels": 2 * c, "kernel": 3, "activation": "silu"},
        {"kind": "upsample", "factor": 2},
        {"kind": "concat", "tag": "l1"},
        {"kind": "conv3d", "channels": half, "kernel": 1, "activation": "silu"},
        {"kind": "conv3d", "channels": half, "kernel": 3, "activation": "silu"},
        {"kind": "conv3d", "channels": 1, "kernel": 1, "activation": "identity"},
    ]
    return NetworkConfig(input_shape=(3,) + tuple(internal_extents), layers=layers,
                         seed=seed, temb_dim=temb_dim)


@dataclass
class PersonaModel:
    schedule: DiffusionSchedule
    config: NetworkConfig
    params: Parameters
    extents: tuple
    internal_extents: tuple
    mask_fractions: tuple
    fingerprint: str = ""

    def __post_init__(self):
        self.extents = tuple(int(n) for n in self.extents)
        self.internal_extents = tuple(int(n) for n in self.internal_extents)
        self.mask_fractions = tuple(float(f) for f in self.mask_fractions)
        infer_shapes(self.config)
        # the mask must be constructible at both resolutions
        make_center_mask(self.extents, self.mask_fractions)
        make_center_mask(self.internal_extents, self.mask_fractions)


def make_persona_model(extents, timesteps: int = 200, internal_extents=DEFAULT_INTERNAL_EXTENTS,
                       mask_fractions=DEFAULT_MASK_FRACTIONS, base_channels: int = 8,
                       temb_dim: int = 32, seed: int = 0,
                       tail_channels: int = None) -> PersonaModel:
    schedule = linear_beta_schedule(timesteps)
    config = make_denoiser_config(internal_extents, base_channels, temb_dim, seed,
                                  tail_channels=tail_channels)
    params = init_parameters(config)
    # zero the output conv: epsilon-prediction starts at 0 (loss 1.0), which
    # keeps the first optimizer steps small and training stable
    last = max(i for i, layer in enumerate(config.layers) if layer["kind"] == "conv3d")
    params.tensors[f"layer{last}.weight"].data[:] = 0.0
    return PersonaModel(schedule, config, params, tuple(extents), tuple(internal_extents),
                        tuple(mask_fractions))


def save_persona_model(path, model: PersonaModel, step: int = 0) -> None:
    meta = {
        "kind": "persona-ddpm",
        "timesteps": model.schedule.timesteps,
        "beta_start": model.schedule.beta_start,
        "beta_end": model.schedule.beta_end,
        "extents": list(model.extents),
        "internal_extents": list(model.internal_extents),
        "mask_fractions": list(model.mask_fractions),
        "fingerprint": model.fingerprint,
        "config": model.config.to_dict(),
    }
    checkpoint.save_parameters(path, model.params, seed=model.config.seed, step=step, meta=meta)


def load_persona_model(path) -> PersonaModel:
    params, header = checkpoint.load_parameters(path)
    meta = header.get("meta", {})
    if meta.get("kind") != "persona-ddpm":
        raise InputError(f"checkpoint at {path} is not a persona model")
    schedule = linear_beta_schedule(meta["timesteps"], meta["beta_start"], meta["beta_end"])
    config = NetworkConfig.from_dict(meta["config"])
    return PersonaModel(schedule, config, params, tuple(meta["extents"]),
                        tuple(meta["internal_extents"]), tuple(meta["mask_fractions"]),
                        meta.get("fingerprint", ""))


def _to_signed(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32) * 2.0 - 1.0


def _to_unit(x: np.ndarray) -> np.ndarray:
    return (x.astype(np.float32) + 1.0) / 2.0


def _internal_x0(model: PersonaModel, volume: Volume) -> np.ndarray:
    """Volume in [0,1] at full extents -> signed x0 at internal extents.

    Block averaging (when the extents divide exactly) suppresses the voxel
    noise by the block volume, so the internal-scale target is close to the
    noiseless anatomy; trilinear point sampling would keep full-variance
    noise in every retained voxel."""
    if all(e % t == 0 for e, t in zip(volume.extents, model.internal_extents)):
        small = block_mean(volume, model.internal_extents)
    else:
        small = resize_trilinear(volume, model.internal_extents)
    return _to_signed(small.intensities)


def _conditioning(model: PersonaModel, x0_internal: np.ndarray, box: MaskBox) -> np.ndarray:
    """(2, D, H, W): masked x0 and the mask, at internal extents."""
    mask = box.array(np.float32)
    masked = x0_internal * (1.0 - mask)
    return np.stack([masked, mask])


def _noise_stream(seed: int, study_id: str, view: str) -> np.random.Generator:
    """Noise generator independent of batch composition."""
    digest = hashlib.sha256(f"{seed}:{study_id}:{view}".encode()).digest()
    return np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint64))


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scales the gradient dict in place to a global L2 norm of at most
    max_norm; returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def train_persona(studies, model: PersonaModel, steps: int, seed: int = 0,
                  batch_size: int = 4, lr: float = 2e-3, clip_norm: float = 1.0):
    """Trains the denoiser on the healthy studies (all views pooled).

    Returns (model, loss_trace). Rejects any study labeled abnormal."""
    for study in studies:
        if study.labels.get("abnormal", 0) != 0:
            raise InputError(f"study {study.study_id} is labeled abnormal; "
                             "persona training uses healthy studies only")
    if steps < 0:
        raise UsageError("steps must be >= 0")
    pool = []
    ids = []
    for study in studies:
        for view in sorted(study.volumes):
            vol = study.volumes[view]
            if vol.extents != model.extents:
                raise InputError(f"study {study.study_id} view {view} extents "
                                 f"{vol.extents} != model extents {model.extents}")
            pool.append(_internal_x0(model, vol))
            ids.append(study.study_id)
    if not pool and steps > 0:
        raise InputError("no training volumes")
    box = make_center_mask(model.internal_extents, model.mask_fractions)
    conds = [_conditioning(model, x0, box) for x0 in pool]

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1FF]))
    state = init_adam_state(model.params)
    schedule = model.schedule
    trace = []
    for _ in range(steps):
        idx = rng.integers(0, len(pool), size=min(batch_size, len(pool)))
        ts = rng.integers(1, schedule.timesteps + 1, size=len(idx))
        x0 = np.stack([pool[i] for i in idx])
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        ab = schedule.alpha_bars[ts - 1].astype(np.float32)[:, None, None, None]
        xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        x_in = np.concatenate([xt[:, None], np.stack([conds[i] for i in idx])], axis=1)
        temb = sinusoidal_time_embedding(ts, model.config.temb_dim)
        pred = network_forward(model.config, model.params, Tensor(x_in),
                               temb=Tensor(temb))
        diff = sub(pred, Tensor(eps[:, None]))
        loss = mean_all(square(diff))
        grads = gradients(loss, model.params)
        clip_gradients(grads, clip_norm)
        adam_step(model.params, grads, state, lr=lr)
        trace.append(float(loss.data))
    fingerprint = hashlib.sha256(
        ("|".join(sorted(set(ids))) + f"|steps={steps}|seed={seed}").encode()
    ).hexdigest()[:16]
    model.fingerprint = fingerprint
    return model, trace


def _sample_batch(model: PersonaModel, conds: np.ndarray, rngs) -> np.ndarray:
    """Ancestral sampling at internal extents.

    conds: (B, 2, D, H, W) conditioning; rngs: one Generator per item, so an
    item's noise does not depend on what else is in the batch (gemm rounding
    can still differ at the last ulp between batch shapes; bitwise
    reproducibility holds for identical batches). Returns signed samples
    (B, D, H, W)."""
    schedule = model.schedule
    shape = model.internal_extents
    known, mask = conds[:, 0], conds[:, 1]
    x = np.stack([rng.standard_normal(shape).astype(np.float32) for rng in rngs])
    with no_grad():
        for t in range(schedule.timesteps, 0, -1):
            beta = schedule.beta(t)
            ab = schedule.alpha_bar(t)
            x_in = np.concatenate([x[:, None], conds], axis=1)
            temb = sinusoidal_time_embedding(np.full(len(rngs), t), model.config.temb_dim)
            eps_hat = network_forward(model.config, model.params, Tensor(x_in),
                                      temb=Tensor(temb)).data[:, 0]
            # clip the implied x0 to the signed intensity range before the
            # update; keeps early steps from overshooting and is a no-op once
            # the implied x0 is in range
            x0_hat = np.clip((x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -1.0, 1.0)
            eps_hat = (x - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
            x = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
            if t > 1:
                z = np.stack([rng.standard_normal(shape).astype(np.float32) for rng in rngs])
                x = x + np.sqrt(beta) * z
            # pin the visible region to its forward-diffused true value, so
            # the trajectory agrees with the conditioning outside the hole at
            # every step and the denoiser only has to be right inside it
            if t > 1:
                ab_prev = schedule.alpha_bar(t - 1)
                zk = np.stack([rng.standard_normal(shape).astype(np.float32) for rng in rngs])
                pinned = np.sqrt(ab_prev) * known + np.sqrt(1.0 - ab_prev) * zk
            else:
                pinned = known
            x = mask * x + (1.0 - mask) * pinned
            x = x.astype(np.float32)
    return x


def _finalize(model: PersonaModel, sample_signed: np.ndarray, original: Volume,
              box: MaskBox) -> Volume:
    small = Volume(np.clip(_to_unit(sample_signed), 0.0, 1.0), original.spacing)
    up = resize_trilinear(small, original.extents)
    out = original.intensities.copy()
    sl = box.slices()
    out[sl] = up.intensities[sl]
    return Volume(out, original.spacing)


def inpaint(model: PersonaModel, volume: Volume, mask: MaskBox = None, seed: int = 0) -> Volume:
    """Healthy persona of one volume. Outside the mask the output equals the
    input bitwise."""
    if volume.extents != model.extents:
        raise InputError(f"volume extents {volume.extents} != model extents {model.extents}")
    if mask is None:
        mask = make_center_mask(volume.extents, model.mask_fractions)
    elif mask.extents != volume.extents:
        raise InputError(f"mask extents {mask.extents} != volume extents {volume.extents}")
    internal_box = make_center_mask(model.internal_extents, mask.fractions)
    cond = _conditioning(model, _internal_x0(model, volume), internal_box)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3]))
    sample = _sample_batch(model, cond[None], [rng])[0]
    return _finalize(model, sample, volume, mask)


def persona_of_study(model: PersonaModel, study, seed: int = 0):
    """Fills study.personas with one persona per view.

    The views are sampled in one batch for speed, but each item draws from
    its own noise stream keyed by (seed, study id, view), so a view's noise
    never depends on which studies are processed alongside it."""
    box_full = make_center_mask(model.extents, model.mask_fractions)
    internal_box = make_center_mask(model.internal_extents, model.mask_fractions)
    views = sorted(study.volumes)
    conds, rngs = [], []
    for view in views:
        vol = study.volumes[view]
        if vol.extents != model.extents:
            raise InputError(f"study {study.study_id} view {view} extents "
                             f"{vol.extents} != model extents {model.extents}")
        conds.append(_conditioning(model, _internal_x0(model, vol), internal_box))
        rngs.append(_noise_stream(seed, study.study_id, view))
    samples = _sample_batch(model, np.stack(conds), rngs)
    for view, sample in zip(views, samples):
        study.personas[view] = _finalize(model, sample, study.volumes[view], box_full)
    return study
