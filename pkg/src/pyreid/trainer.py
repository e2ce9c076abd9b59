"""Training orchestration: phase-dependent sampling, SGD with momentum and
weight decay, the stepped learning-rate schedule, checkpointing, and the
ablation modes.

One iteration of dynamic training: recompute the focal weights from the
previous iteration's loss-reduction probabilities, pick the phase, draw a
batch with the phase's sampler (plain random for ID-only, ID-balanced PK
for combined), run forward/backward, step the optimizer, then fold the
observed losses back into the EMAs. Epochs are counted in random-sampling
lengths (ceil(train size / batch size) iterations) regardless of phase, so
the learning-rate schedule is phase-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, backward, no_grad
from .backbone import Backbone, BackboneConfig
from .batching import MiniBatch, Split, pk_batches, random_batches
from .container import load_tensors, save_tensors
from .data_synth import ReIDDataset
from .errors import ConfigError, ContainerError, TrainingDiverged
from .losses import LossValue, id_loss, triplet_loss
from .pyramid import BranchMask, PyramidModel
from .scheduler import (Phase, SchedulerState, TraceWriter, combined_objective,
                        focal_weight)

_INIT_PURPOSE = 7

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    n: int = 6
    feature_dim: int = 16
    margin: float = 1.4
    batch_size: int = 16
    p_ids: int = 4
    k_imgs: int = 4
    alpha: float = 0.25
    gamma: float = 2.0
    switch_ratio: float = 0.16
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 30
    lr_halving_epochs: tuple = (15, 20, 25)
    seed: int = 0
    pyramid_mask: str = "111111"
    no_triplet_alternating: bool = False
    pk_with_replacement: bool = False
    triplet_in_id_phase: bool = True
    classifier_bias: bool = False
    squared_distance: bool = False
    l2_normalize_eval: bool = False
    in_channels: int = 3
    backbone_stages: tuple = ((16, 2), (32, 2), (64, 1))
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.n < 1:
            raise ConfigError(f"n must be positive, got {self.n}")
        if self.p_ids * self.k_imgs != self.batch_size:
            raise ConfigError(f"p_ids * k_imgs must equal batch_size, got "
                              f"{self.p_ids}*{self.k_imgs} != {self.batch_size}")
        if self.p_ids < 2 or self.k_imgs < 2:
            raise ConfigError(f"p_ids and k_imgs must be >= 2 for valid triplets, got "
                              f"P={self.p_ids} K={self.k_imgs}")
        if list(self.lr_halving_epochs) != sorted(set(self.lr_halving_epochs)):
            raise ConfigError(f"lr_halving_epochs must be strictly increasing, got "
                              f"{self.lr_halving_epochs}")
        if len(self.pyramid_mask) != self.n:
            raise ConfigError(f"pyramid_mask {self.pyramid_mask!r} must have n={self.n} digits")
        BranchMask.from_string(self.pyramid_mask)
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")


PROFILES = {
    "desk": TrainConfig(),
    "paper": TrainConfig(feature_dim=128, batch_size=64, p_ids=8, k_imgs=8,
                         epochs=120, lr_halving_epochs=(60, 70, 80, 90),
                         pyramid_mask="111111"),
}


# -- config file / override plumbing ------------------------------------------


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean from {text!r}")


def _parse_int_tuple(text: str) -> tuple:
    text = text.strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _parse_stages(text: str) -> tuple:
    stages = []
    text = text.strip()
    if text:
        for part in text.split(","):
            ch, _, st = part.partition(":")
            stages.append((int(ch), int(st)))
    return tuple(stages)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{c}:{s}" for c, s in value)
        return ",".join(str(v) for v in value)
    return str(value)


_PARSERS = {
    int: int,
    float: float,
    bool: _parse_bool,
    str: str,
}


def _field_parser(name: str):
    if name == "backbone_stages":
        return _parse_stages
    if name == "lr_halving_epochs":
        return _parse_int_tuple
    for f in fields(TrainConfig):
        if f.name == name:
            return _PARSERS[type(getattr(TrainConfig(), name))]
    raise ConfigError(f"unknown config key {name!r}")


def parse_config_file(path) -> dict:
    """Flat key=value file; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def make_config(profile: str = "desk", file_path=None, overrides: dict | None = None
                ) -> TrainConfig:
    """Profile defaults, overlaid with config-file values, overlaid with
    explicit overrides (already-typed values)."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}, choose from {sorted(PROFILES)}")
    config = PROFILES[profile]
    if file_path is not None:
        for key, text in parse_config_file(file_path).items():
            config = replace(config, **{key: _field_parser(key)(text)})
    if overrides:
        for key in overrides:
            _field_parser(key)  # reject unknown keys
        config = replace(config, **overrides)
    config.validate()
    return config


def resolved_config_text(config: TrainConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}"
             for f in fields(TrainConfig)]
    return "\n".join(lines) + "\n"


# -- optimizer -----------------------------------------------------------------


def lr_schedule(epoch: int, base_lr: float, halving_epochs) -> float:
    """base_lr halved once for every scheduled epoch <= the current one."""
    return base_lr * 0.5 ** sum(1 for e in halving_epochs if e <= epoch)


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float) -> None:
    """Classical momentum update, in place:
    v <- momentum*v + g + weight_decay*w ; w <- w - lr*v."""
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity


class SGD:
    """Momentum SGD over named parameters; batch-norm affine parameters are
    exempt from weight decay."""

    NO_DECAY_SUFFIXES = (".gamma", ".beta")

    def __init__(self, named_params: list, momentum: float, weight_decay: float):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def decays(self, name: str) -> bool:
        return not name.endswith(self.NO_DECAY_SUFFIXES)

    def step(self, lr: float) -> None:
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
            wd = self.weight_decay if self.decays(name) else 0.0
            sgd_step(p.data, g, self.velocity[name], lr, self.momentum, wd)


# -- model construction and checkpointing ---------------------------------------


def make_label_map(split: Split) -> dict:
    return {int(ident): i for i, ident in enumerate(sorted(np.unique(split.identities)))}


def build_model(config: TrainConfig, image_hw: tuple, num_identities: int) -> PyramidModel:
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([config.seed, _INIT_PURPOSE])))
    backbone = Backbone(BackboneConfig(in_channels=config.in_channels,
                                       stages=config.backbone_stages), rng)
    return PyramidModel(backbone, config.n, config.feature_dim, num_identities,
                        image_hw, rng, classifier_bias=config.classifier_bias)


_CONFIG_ENCODERS = {
    int: lambda v: np.array(v, dtype="<i8"),
    bool: lambda v: np.array(int(v), dtype="<i8"),
    float: lambda v: np.array(v, dtype="<f8"),
}


def _encode_config(config: TrainConfig) -> dict:
    out = {}
    for f in fields(TrainConfig):
        v = getattr(config, f.name)
        key = f"config/{f.name}"
        if f.name == "backbone_stages":
            out[key] = np.asarray([d for pair in v for d in pair], dtype="<i8")
        elif f.name == "lr_halving_epochs":
            out[key] = np.asarray(list(v), dtype="<i8")
        elif f.name == "pyramid_mask":
            out[key] = np.asarray([int(c) for c in v], dtype="<i8")
        else:
            out[key] = _CONFIG_ENCODERS[type(v)](v)
    return out


def _decode_config(entries: dict) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        arr = entries[f"config/{f.name}"]
        if f.name == "backbone_stages":
            flat = [int(v) for v in arr]
            kwargs[f.name] = tuple((flat[i], flat[i + 1]) for i in range(0, len(flat), 2))
        elif f.name == "lr_halving_epochs":
            kwargs[f.name] = tuple(int(v) for v in arr)
        elif f.name == "pyramid_mask":
            kwargs[f.name] = "".join(str(int(v)) for v in arr)
        else:
            default = getattr(TrainConfig(), f.name)
            kwargs[f.name] = type(default)(arr[()])
    return TrainConfig(**kwargs)


def save_checkpoint(path, model: PyramidModel, config: TrainConfig,
                    sched: SchedulerState, opt: SGD, stream_state: dict,
                    dataset_fingerprint: str) -> None:
    entries: dict[str, np.ndarray] = {}
    entries["meta/version"] = np.array(CHECKPOINT_VERSION, dtype="<i8")
    entries["meta/num_identities"] = np.array(model.num_identities, dtype="<i8")
    entries["meta/image_h"] = np.array(model.image_hw[0], dtype="<i8")
    entries["meta/image_w"] = np.array(model.image_hw[1], dtype="<i8")
    entries["meta/dataset_fingerprint"] = np.frombuffer(
        bytes.fromhex(dataset_fingerprint), dtype=np.uint8).astype("<i8")
    for key in ("rand_epoch", "rand_pos", "pk_epoch", "pk_pos"):
        entries[f"meta/{key}"] = np.array(stream_state[key], dtype="<i8")
    entries.update(_encode_config(config))
    for key, val in sched.to_scalars().items():
        entries[f"sched/{key}"] = np.array(val, dtype="<f8")
    for name, p in model.named_parameters():
        entries[f"param/{name}"] = p.data
    for name, buf in model.named_buffers():
        entries[f"buffer/{name}"] = buf
    for name, _ in opt.params:
        entries[f"momentum/{name}"] = opt.velocity[name]
    save_tensors(path, entries)


def load_checkpoint(path) -> dict:
    entries = load_tensors(path)
    version = int(entries.get("meta/version", np.array(-1))[()])
    if version != CHECKPOINT_VERSION:
        raise ContainerError(f"checkpoint version {version} not supported "
                             f"(expected {CHECKPOINT_VERSION})")
    return entries


def checkpoint_fingerprint(entries: dict) -> str:
    return bytes(entries["meta/dataset_fingerprint"].astype(np.uint8)).hex()


def rebuild_model(entries: dict) -> tuple:
    """Reconstruct the model (architecture + weights + running stats) stored
    in a loaded checkpoint. Returns (model, config)."""
    config = _decode_config(entries)
    image_hw = (int(entries["meta/image_h"][()]), int(entries["meta/image_w"][()]))
    num_ids = int(entries["meta/num_identities"][()])
    model = build_model(config, image_hw, num_ids)
    for name, p in model.named_parameters():
        stored = entries[f"param/{name}"]
        if stored.shape != p.data.shape:
            raise ContainerError(f"parameter {name!r}: stored shape {stored.shape} does not "
                                 f"match model shape {p.data.shape}")
        p.data[...] = stored
    for name, buf in model.named_buffers():
        buf[...] = entries[f"buffer/{name}"]
    return model, config


# -- training loop ---------------------------------------------------------------


class _BatchStream:
    """Lazily materialized epoch-chunked batch stream with a restorable
    (epoch, position) cursor."""

    def __init__(self, make_epoch):
        self._make_epoch = make_epoch
        self.epoch = 0
        self.pos = 0
        self._buf = None

    def next(self) -> MiniBatch:
        if self._buf is None:
            self._buf = self._make_epoch(self.epoch)
        if self.pos >= len(self._buf):
            self.epoch += 1
            self.pos = 0
            self._buf = self._make_epoch(self.epoch)
        batch = self._buf[self.pos]
        self.pos += 1
        return batch

    def restore(self, epoch: int, pos: int) -> None:
        self.epoch = epoch
        self.pos = pos
        self._buf = None


@dataclass
class TrainResult:
    checkpoint_path: Path
    trace_path: Path
    epochs_run: int


def train(config: TrainConfig, dataset: ReIDDataset, out_dir,
          resume_from=None) -> TrainResult:
    """Run dynamic two-loss training (or an ablation mode) to completion,
    writing a per-iteration trace CSV and a final checkpoint under out_dir."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    split = dataset.train_split()
    if len(split) == 0:
        raise ConfigError("train: dataset has no train split")
    label_map = make_label_map(split)
    fingerprint = dataset.fingerprint()
    model = build_model(config, dataset.image_hw, len(label_map))
    mask = BranchMask.from_string(config.pyramid_mask)
    opt = SGD(list(model.named_parameters()), config.momentum, config.weight_decay)
    sched = SchedulerState(alpha=config.alpha, gamma=config.gamma,
                           switch_ratio=config.switch_ratio)

    rand_stream = _BatchStream(lambda e: random_batches(
        split, config.batch_size, config.seed, e))
    pk_stream = _BatchStream(lambda e: pk_batches(
        split, config.p_ids, config.k_imgs, config.seed, e,
        with_replacement=config.pk_with_replacement))

    if resume_from is not None:
        entries = load_checkpoint(resume_from)
        stored_config = _decode_config(entries)
        # run-length fields may legitimately change on resume
        diff = [f.name for f in fields(TrainConfig)
                if f.name not in ("epochs", "checkpoint_every")
                and getattr(stored_config, f.name) != getattr(config, f.name)]
        if diff:
            raise ConfigError(f"checkpoint config does not match requested config, "
                              f"differing fields: {diff}")
        if checkpoint_fingerprint(entries) != fingerprint:
            raise ConfigError("checkpoint was trained on a different dataset "
                              "(fingerprint mismatch)")
        model, _ = rebuild_model(entries)
        opt = SGD(list(model.named_parameters()), config.momentum, config.weight_decay)
        for name, _ in opt.params:
            opt.velocity[name][...] = entries[f"momentum/{name}"]
        sched = SchedulerState.from_scalars(
            {k.split("/", 1)[1]: float(v[()]) for k, v in entries.items()
             if k.startswith("sched/")})
        rand_stream.restore(int(entries["meta/rand_epoch"][()]),
                            int(entries["meta/rand_pos"][()]))
        pk_stream.restore(int(entries["meta/pk_epoch"][()]),
                          int(entries["meta/pk_pos"][()]))

    iters_per_epoch = math.ceil(len(split) / config.batch_size)
    total_iters = config.epochs * iters_per_epoch
    trace_path = out_dir / "trace.csv"
    checkpoint_path = out_dir / "checkpoint.pyrt"

    def stream_state() -> dict:
        return {"rand_epoch": rand_stream.epoch, "rand_pos": rand_stream.pos,
                "pk_epoch": pk_stream.epoch, "pk_pos": pk_stream.pos}

    with TraceWriter(trace_path) as trace:
        while sched.tau < total_iters:
            epoch = sched.tau // iters_per_epoch
            lr = lr_schedule(epoch, config.base_lr, config.lr_halving_epochs)

            if config.no_triplet_alternating:
                # Table-style ablation: alternate the samplers, optimize the
                # ID loss only; the scheduler tracks it but never routes.
                sched.tau += 1
                sched.fl_id = focal_weight(sched.id_stats.p, sched.gamma)
                sched.fl_tp = focal_weight(sched.tp_stats.p, sched.gamma)
                phase = Phase.ID_ONLY if sched.tau % 2 == 1 else Phase.COMBINED
                sched.phase = phase
            else:
                phase = sched.begin_iteration()

            batch = rand_stream.next() if phase == Phase.ID_ONLY else pk_stream.next()
            images = Tensor(dataset.images[batch.indices])
            class_labels = np.asarray([label_map[int(i)] for i in batch.identities],
                                      dtype=np.int64)

            out = model.forward(images, training=True, mask=mask)
            l_id = id_loss(out.enabled_logits(), class_labels)
            l_tp: LossValue | None = None

            if config.no_triplet_alternating:
                loss = l_id.tensor
            elif phase == Phase.ID_ONLY:
                loss = l_id.tensor
                if config.triplet_in_id_phase and len(batch) >= 2:
                    # tracked but not optimized: feeds the triplet EMA so the
                    # phase rule can ever leave the ID-only regime
                    with no_grad():
                        l_tp = triplet_loss(Tensor(out.embedding.data), batch.identities,
                                            config.margin, squared=config.squared_distance)
            else:
                l_tp = triplet_loss(out.embedding, batch.identities, config.margin,
                                    squared=config.squared_distance)
                if sched.fl_id == 0.0 and sched.fl_tp == 0.0:
                    loss = None  # zero total weight: no parameter update
                else:
                    loss = combined_objective(l_id.tensor, l_tp.tensor,
                                              sched.fl_id, sched.fl_tp)

            if loss is not None:
                if not np.isfinite(loss.data).all():
                    raise TrainingDiverged(f"non-finite loss at iteration {sched.tau}")
                model.zero_grad()
                backward(loss)
                opt.step(lr)

            sched.observe("id", l_id.value)
            if l_tp is not None and not l_tp.degenerate:
                sched.observe("tp", l_tp.value)
            trace.write(sched.tau, phase, l_id.value,
                        None if l_tp is None else l_tp.value, sched, lr)

            if sched.tau % iters_per_epoch == 0:
                done = sched.tau // iters_per_epoch
                if config.checkpoint_every and done % config.checkpoint_every == 0 \
                        and done < config.epochs:
                    save_checkpoint(out_dir / f"checkpoint_ep{done}.pyrt", model, config,
                                    sched, opt, stream_state(), fingerprint)

    save_checkpoint(checkpoint_path, model, config, sched, opt, stream_state(),
                    fingerprint)
    return TrainResult(checkpoint_path=checkpoint_path, trace_path=trace_path,
                       epochs_run=config.epochs)
