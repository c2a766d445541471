"""Datasets and the two-stage (synthetic, then freehand) training procedure."""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import gradcore as gc
from .bodymodel import (
    BodyParams,
    load_body_model,
    read_obj,
    save_body_model,
    smpl_forward,
    smpl_forward_np,
    write_obj,
)
from .camera import CameraParams, project, project_np
from .losses import regime_losses
from .network import (
    BRANCHES,
    NetConfig,
    branch_of,
    image_to_input,
    init_network,
    load_checkpoint,
    save_checkpoint,
    sketchbodynet_forward,
)
from .nnops import OptimizerConfig, optimizer_step
from .sketchgen import (
    NoBodyFoundError,
    OffscreenError,
    SketchSample,
    yawed_theta,
    detect_bbox_and_crop,
    generate_synthetic_sample,
    ink_mask,
    pseudo_freehand,
    read_pgm,
    write_pgm,
)

MANIFEST_VERSION = 1
RNG_ALGORITHM = "PCG64"
POSE_BOUND = 0.6
ROOT_TILT_BOUND = 0.2
MAX_RESAMPLES = 50


class ManifestError(ValueError):
    """Invalid dataset manifest; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class TrainingDivergedError(FloatingPointError):
    """Non-finite loss or gradient during training."""


# --- manifests ---------------------------------------------------------------

_VECTOR_FIELDS = ("theta", "beta", "cam", "joints3d", "joints2d", "joint_mask")


@dataclass
class ManifestRecord:
    id: str
    image: str
    source: str
    theta: list = None
    beta: list = None
    cam: list = None
    joints3d: list = None
    joints2d: list = None
    mesh: str = None
    joint_mask: list = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class DatasetManifest:
    body_model: str
    records: list
    version: int = MANIFEST_VERSION
    root: str = "."

    def path_of(self, rel):
        return os.path.join(self.root, rel)

    def filter(self, source=None):
        if source in (None, "all"):
            return list(self.records)
        return [r for r in self.records if r.source == source]

    def to_dict(self):
        return {
            "version": self.version,
            "body_model": self.body_model,
            "records": [r.to_dict() for r in self.records],
        }


def save_manifest(path, manifest):
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


def load_manifest(path):
    """Parse and validate a manifest; all record problems are reported together."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError([f"cannot read manifest {path}: {exc}"]) from exc
    errors = []
    if raw.get("version") != MANIFEST_VERSION:
        errors.append(f"unsupported manifest version {raw.get('version')!r}")
    root = os.path.dirname(os.path.abspath(path))
    body_model = raw.get("body_model")
    if not body_model:
        errors.append("manifest has no body_model")
    elif not os.path.exists(os.path.join(root, body_model)):
        errors.append(f"body model file not found: {body_model}")
    records, seen = [], set()
    known = set(ManifestRecord.__dataclass_fields__)
    for i, entry in enumerate(raw.get("records", [])):
        rid = entry.get("id", f"#{i}")
        unknown = set(entry) - known
        if unknown:
            errors.append(f"record {rid}: unknown fields {sorted(unknown)}")
            continue
        if "id" not in entry or "image" not in entry or "source" not in entry:
            errors.append(f"record {rid}: id, image and source are required")
            continue
        rec = ManifestRecord(**entry)
        if rec.id in seen:
            errors.append(f"record {rec.id}: duplicate id")
        seen.add(rec.id)
        if rec.source not in SketchSample.REQUIRED:
            errors.append(f"record {rec.id}: unknown source {rec.source!r}")
        else:
            needed = [n if n != "mesh_vertices" else "mesh" for n in SketchSample.REQUIRED[rec.source]]
            missing = [n for n in needed if getattr(rec, n) is None]
            if missing:
                errors.append(f"record {rec.id}: {rec.source} record missing {missing}")
        for rel in (rec.image, rec.mesh):
            if rel is not None and not os.path.exists(os.path.join(root, rel)):
                errors.append(f"record {rec.id}: file not found: {rel}")
        records.append(rec)
    if not records and not errors:
        errors.append("manifest has no records")
    if errors:
        raise ManifestError(errors)
    return DatasetManifest(body_model=body_model, records=records, version=raw["version"], root=root)


def record_to_sample(manifest, rec):
    arr = {k: (None if getattr(rec, k) is None else np.asarray(getattr(rec, k), dtype=np.float64))
           for k in _VECTOR_FIELDS}
    mesh = None
    if rec.mesh is not None:
        mesh, _ = read_obj(manifest.path_of(rec.mesh))
    return SketchSample(
        image=read_pgm(manifest.path_of(rec.image)),
        source=rec.source,
        theta=arr["theta"],
        beta=arr["beta"],
        cam=arr["cam"],
        joints3d=arr["joints3d"],
        joints2d=arr["joints2d"],
        mesh_vertices=mesh,
        joint_mask=None if arr["joint_mask"] is None else arr["joint_mask"].astype(bool),
        meta={"id": rec.id},
    )


def load_samples(manifest, source=None):
    return [record_to_sample(manifest, r) for r in manifest.filter(source)]


def prepare_sample(sample, resolution, margin=0.1):
    """Bring a sample to the network's input resolution.

    Images already at ``resolution`` are used as they are; others are cropped
    around their strokes, with 2-D annotations and the camera mapped along.
    """
    if sample.image.shape == (resolution, resolution):
        return sample
    cropped, crop = detect_bbox_and_crop(sample.image, resolution, margin)
    out = SketchSample(**{**sample.__dict__, "image": cropped, "meta": dict(sample.meta)})
    if sample.joints2d is not None:
        out.joints2d = crop.apply_normalized(sample.joints2d)
    if sample.cam is not None:
        out.cam = crop.camera_to_crop(sample.cam).as_array()
    out.meta["crop"] = crop
    return out


# --- batching ----------------------------------------------------------------


def epoch_rng(seed, epoch):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))


def make_batches(records, batch_size, seed, epoch, source_filter=None):
    """Deterministically shuffled batches of records; the last one may be partial."""
    if isinstance(records, DatasetManifest):
        records = records.filter(source_filter)
    elif source_filter not in (None, "all"):
        records = [r for r in records if r.source == source_filter]
    if not records:
        raise ValueError(f"no records match source filter {source_filter!r}")
    order = epoch_rng(seed, epoch).permutation(len(records))
    return [[records[i] for i in order[s : s + batch_size]] for s in range(0, len(records), batch_size)]


# --- training ----------------------------------------------------------------


@dataclass
class StageConfig:
    source_filter: str
    epochs: int
    loss_regime: str


@dataclass
class TrainConfig:
    stages: list = field(
        default_factory=lambda: [StageConfig("synthetic", 100, "synthetic"), StageConfig("freehand", 10, "freehand")]
    )
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 64
    seed: int = 0
    branch_lock_schedule: object = "round_robin"  # "none", "round_robin", or a list of always-locked branches
    net: NetConfig = field(default_factory=NetConfig)
    loss_weights: dict = field(default_factory=dict)
    normalize_losses: bool = False
    checkpoint_every: int = 0
    crop_margin: float = 0.1
    reset_optimizer_per_stage: bool = True

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        sched = self.branch_lock_schedule
        if not (sched in ("none", "round_robin") or (isinstance(sched, (list, tuple)) and set(sched) <= set(BRANCHES))):
            raise ValueError(f"bad branch_lock_schedule {sched!r}")

    def to_dict(self):
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields {sorted(unknown)}")
        return cls(**d)


def load_train_config(path):
    with open(path) as f:
        return TrainConfig.from_dict(json.load(f))


def desk_config(spec, stage1_epochs=300, stage2_epochs=10, **overrides):
    """Laptop-scale defaults: mini backbone, batch 8, lr 1e-3."""
    base = dict(
        stages=[StageConfig("synthetic", stage1_epochs, "synthetic"), StageConfig("freehand", stage2_epochs, "freehand")],
        optimizer=OptimizerConfig(lr=1e-3),
        batch_size=8,
        net=NetConfig.for_body_model(spec),
    )
    base.update(overrides)
    return TrainConfig(**base)


def locked_branches(schedule, step, multi_branch=True):
    """Decoder branches frozen at global ``step``; the backbone is never locked."""
    if not multi_branch or schedule == "none":
        return set()
    if schedule == "round_robin":
        unlocked = BRANCHES[step % len(BRANCHES)]
        return {b for b in BRANCHES if b != unlocked}
    return set(schedule)


def lock_predicate(locked):
    return lambda name: branch_of(name) in locked


@dataclass
class PreparedBatch:
    images: np.ndarray  # (N, 3, R, R)
    targets: dict  # key -> (N, ...) arrays or None
    joint_mask: np.ndarray  # (N, K)
    ids: list


def collate(samples, n_joints):
    def stacked(name):
        vals = [getattr(s, name) for s in samples]
        return None if any(v is None for v in vals) else np.stack([np.asarray(v, dtype=np.float64) for v in vals])

    return PreparedBatch(
        images=np.stack([image_to_input(s.image) for s in samples]),
        targets={
            "theta": stacked("theta"),
            "beta": stacked("beta"),
            "vertices": stacked("mesh_vertices"),
            "joints3d": stacked("joints3d"),
            "joints2d": stacked("joints2d"),
        },
        joint_mask=np.stack([s.mask_or_all(n_joints).astype(np.float64) for s in samples]),
        ids=[s.meta.get("id") for s in samples],
    )


def batch_loss(params, batch, regime, spec, cfg, weights=None, normalize=False):
    """Mean per-sample loss over a batch; returns (scalar Tensor, breakdown)."""
    out = sketchbodynet_forward(batch.images, params, cfg)
    need_mesh = regime == "synthetic"
    body = smpl_forward(spec, BodyParams(out.theta, out.beta), with_vertices=need_mesh)
    pred = {"theta": out.theta, "beta": out.beta, "vertices": body.vertices, "joints3d": body.joints3d}
    if regime == "synthetic":
        pred["joints2d"] = project(body.joints3d, out.cam)
    breakdown = regime_losses(regime, pred, batch.targets, batch.joint_mask, weights, normalize)
    return gc.mean(breakdown.total), breakdown


def train_step(params, batch, regime, locked, spec, cfg, optimizer, weights=None, normalize=False):
    """One optimizer step on ``batch``; parameters of ``locked`` branches stay fixed."""
    params.zero_grad()
    try:
        loss, breakdown = batch_loss(params, batch, regime, spec, cfg, weights, normalize)
        gc.backward(loss)
    except gc.NonFiniteError as exc:
        raise TrainingDivergedError(f"non-finite values on batch {batch.ids}: {exc}") from exc
    for t in params.params.values():
        if t.grad is None:
            t.grad = np.zeros(t.shape)
    optimizer_step(params, optimizer, locked=lock_predicate(locked))
    return breakdown


@dataclass
class StepInfo:
    step: int
    stage: int
    epoch: int
    batch: int
    regime: str
    records: list

    @property
    def stage_start(self):
        return self.epoch == 0 and self.batch == 0


def iterate_schedule(manifest, cfg):
    """Yield every training step of the schedule in order."""
    step = 0
    for si, stage in enumerate(cfg.stages):
        if stage.epochs <= 0:
            continue
        pool = manifest.filter(stage.source_filter)
        if not pool:
            raise ValueError(f"stage {si}: no records with source {stage.source_filter!r}")
        for epoch in range(stage.epochs):
            for bi, batch in enumerate(make_batches(pool, cfg.batch_size, cfg.seed + 7919 * si, epoch)):
                yield StepInfo(step, si, epoch, bi, stage.loss_regime, batch)
                step += 1


def count_steps(manifest, cfg):
    total = 0
    for stage in cfg.stages:
        n = len(manifest.filter(stage.source_filter))
        total += max(stage.epochs, 0) * math.ceil(n / cfg.batch_size) if n else 0
    return total


HISTORY_FIELDS = ("step", "stage", "regime", "shape3d", "joints3d", "joints2d", "theta", "beta", "total")


def format_history_line(step, stage, values):
    cells = [str(step), str(stage), values["regime"]]
    for k in HISTORY_FIELDS[3:]:
        v = values[k]
        cells.append("-" if v is None else repr(float(v)))
    return "\t".join(cells)


@dataclass
class TrainResult:
    params: object
    history: list
    steps: int


def rng_record(seed):
    gen = np.random.PCG64(seed)
    return {"algorithm": RNG_ALGORITHM, "seed": int(seed), "state": gen.state}


def srt_train(manifest, cfg, checkpoint_path=None, log_path=None, resume_from=None, max_steps=None,
              spec=None, init_params=None, progress=None):
    """Run the staged schedule; optionally resume from a checkpoint.

    ``max_steps`` stops after that many global steps (used to cut a run for
    resume tests). Returns the final parameters and per-step loss history.
    """
    spec = spec or load_body_model(manifest.path_of(manifest.body_model))
    if (cfg.net.n_theta, cfg.net.n_beta) != (spec.n_theta, spec.n_beta):
        raise ValueError(f"network outputs ({cfg.net.n_theta}, {cfg.net.n_beta}) do not match the body model "
                         f"({spec.n_theta}, {spec.n_beta})")
    start = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, cfg.net)
        params, start = ckpt.params, ckpt.step
    elif init_params is not None:
        params = init_params
    else:
        params = init_network(cfg.net, cfg.seed)

    cache = {}
    history = []
    log_file = open(log_path, "a" if resume_from else "w") if log_path else None
    extra = {"train_config": cfg.to_dict(), "body_model": os.path.abspath(manifest.path_of(manifest.body_model))}
    step = start
    try:
        for info in iterate_schedule(manifest, cfg):
            if info.step < start:
                continue
            if max_steps is not None and info.step >= max_steps:
                break
            samples = []
            for rec in info.records:
                if rec.id not in cache:
                    cache[rec.id] = prepare_sample(record_to_sample(manifest, rec), cfg.net.input_resolution,
                                                   cfg.crop_margin)
                samples.append(cache[rec.id])
            batch = collate(samples, spec.K)
            if cfg.reset_optimizer_per_stage and info.stage_start and info.step > 0:
                params.reset_state()
            locked = locked_branches(cfg.branch_lock_schedule, info.step, cfg.net.multi_branch)
            breakdown = train_step(params, batch, info.regime, locked, spec, cfg.net, cfg.optimizer,
                                   cfg.loss_weights, cfg.normalize_losses)
            values = breakdown.values()
            history.append({"step": info.step, "stage": info.stage, **values})
            if log_file:
                log_file.write(format_history_line(info.step, info.stage, values) + "\n")
            if progress:
                progress(info, values)
            step = info.step + 1
            if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, params, cfg.net, rng_record(cfg.seed), step, extra)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, cfg.net, rng_record(cfg.seed), step, extra)
    return TrainResult(params, history, step)


# --- inference wrapper ---------------------------------------------------------


class NetworkModel:
    """Callable ``sample -> (theta, beta, cam)`` backed by trained parameters.

    Inputs that are not at the network resolution are cropped first and the
    predicted camera is mapped back to the sample's own image frame.
    """

    def __init__(self, params, cfg, margin=0.1):
        self.params, self.cfg, self.margin = params, cfg, margin

    def predict_image(self, image):
        image = np.asarray(image)
        if not ink_mask(image).any():
            raise NoBodyFoundError("no body found: the sketch has no stroke pixels")
        crop = None
        if image.shape != (self.cfg.input_resolution,) * 2:
            image, crop = detect_bbox_and_crop(image, self.cfg.input_resolution, self.margin)
        with gc.no_grad():
            out = sketchbodynet_forward(image_to_input(image), self.params, self.cfg)
        cam = CameraParams.from_vector(out.cam.data)
        if crop is not None:
            cam = crop.camera_from_crop(cam)
        return out.theta.data.copy(), out.beta.data.copy(), cam.as_array()

    def __call__(self, sample):
        return self.predict_image(sample.image)


def _chunks(samples, size):
    for s in range(0, len(samples), size):
        yield samples[s : s + size]


def dataset_loss(params, samples, regime, spec, cfg, weights=None, normalize=False, chunk=16):
    """Mean per-sample loss of ``regime`` over a whole sample list (no gradients)."""
    samples = [prepare_sample(s, cfg.input_resolution) for s in samples]
    total = 0.0
    with gc.no_grad():
        for part in _chunks(samples, chunk):
            _, breakdown = batch_loss(params, collate(part, spec.K), regime, spec, cfg, weights, normalize)
            total += float(breakdown.total.data.sum())
    return total / len(samples)


def reprojection_error(params, samples, spec, cfg, chunk=16):
    """Mean 2-D joint distance in normalized crop units (the crop is 2 wide)."""
    samples = [prepare_sample(s, cfg.input_resolution) for s in samples]
    dists = []
    with gc.no_grad():
        for part in _chunks(samples, chunk):
            batch = collate(part, spec.K)
            out = sketchbodynet_forward(batch.images, params, cfg)
            body = smpl_forward(spec, BodyParams(out.theta, out.beta), with_vertices=False)
            pred = project(body.joints3d, out.cam).data
            d = np.linalg.norm(pred - batch.targets["joints2d"], axis=-1)
            dists.extend(d[batch.joint_mask > 0].tolist())
    return float(np.mean(dists))


ABLATION_SCHEDULES = {"none": "none", "round_robin": "round_robin", "fixed": ["cam"]}


def lock_schedule_ablation(manifest, cfg, schedules=None, spec=None):
    """Train once per branch-lock schedule and report final per-stage dataset losses.

    Every run starts from the same initialization and sees the same batches, so
    the schedule is the only thing that differs.
    """
    spec = spec or load_body_model(manifest.path_of(manifest.body_model))
    schedules = ABLATION_SCHEDULES if schedules is None else schedules
    report = {}
    for name, schedule in schedules.items():
        run_cfg = TrainConfig.from_dict({**cfg.to_dict(), "branch_lock_schedule": schedule})
        result = srt_train(manifest, run_cfg, spec=spec)
        losses = {}
        for si, stage in enumerate(run_cfg.stages):
            samples = load_samples(manifest, stage.source_filter)
            losses[f"stage{si}_{stage.loss_regime}"] = dataset_loss(
                result.params, samples, stage.loss_regime, spec, run_cfg.net, run_cfg.loss_weights,
                run_cfg.normalize_losses)
        report[name] = {"schedule": schedule, "steps": result.steps, **losses}
    return report


# --- dataset generation -------------------------------------------------------


def sample_body_params(spec, rng):
    theta = np.zeros(spec.n_theta)
    for j in range(1, spec.K):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        theta[3 * j : 3 * j + 3] = axis * rng.uniform(0.0, POSE_BOUND)
    tilt = rng.normal(size=2)
    tilt *= rng.uniform(0.0, ROOT_TILT_BOUND) / np.linalg.norm(tilt)
    root = Rotation.from_rotvec([0.0, rng.uniform(-np.pi, np.pi), 0.0]) * Rotation.from_rotvec([tilt[0], 0.0, tilt[1]])
    theta[:3] = root.as_rotvec()
    beta = np.clip(rng.normal(0.0, 0.7, size=spec.n_beta), -2.0, 2.0)
    cam = CameraParams(rng.uniform(0.8, 1.0), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05))
    return BodyParams(theta, beta), cam


def _on_screen(spec, params, cam, view):
    verts, _ = smpl_forward_np(spec, yawed_theta(params.theta, view), params.beta)
    return bool(np.all(np.abs(project_np(verts, cam)) <= 1.0))


def render_views(spec, params, cam, views, resolution, margin=0.1):
    """Samples for every view, or None if the body leaves the image under any view."""
    if not all(_on_screen(spec, params, cam, v) for v in views):
        return None
    return [generate_synthetic_sample(spec, params, cam, resolution, v, margin) for v in views]


def default_views(n=14):
    return [2.0 * np.pi * i / n for i in range(n)]


def build_dataset(spec, n_synthetic, views, seed, out_dir, resolution=64, n_freehand=0, margin=0.1):
    """Render ``n`` poses under every view into ``out_dir`` with a manifest.

    Synthetic records carry full annotations. Freehand records are
    pseudo-freehand degradations with pose, shape and 3-D joints but no camera,
    2-D joints or mesh. A pose is redrawn when its projection leaves
    [-1, 1]^2 under any view.
    """
    views = list(views)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "meshes"), exist_ok=True)
    save_body_model(os.path.join(out_dir, "body_model.json"), spec)
    records = []
    for source, count, stream in (("synthetic", n_synthetic, 0), ("freehand", n_freehand, 1)):
        for i in range(count):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream, i])))
            for _ in range(MAX_RESAMPLES):
                params, cam = sample_body_params(spec, rng)
                rendered = render_views(spec, params, cam, views, resolution, margin)
                if rendered is not None:
                    break
            else:
                raise OffscreenError(f"no acceptable pose for {source} #{i} after {MAX_RESAMPLES} draws")
            for vi, sample in enumerate(rendered):
                rid = f"{source[0]}{i:05d}_v{vi:02d}"
                image_rel = f"images/{rid}.pgm"
                if source == "synthetic":
                    write_pgm(os.path.join(out_dir, image_rel), sample.image)
                    mesh_rel = f"meshes/{rid}.obj"
                    write_obj(os.path.join(out_dir, mesh_rel), sample.mesh_vertices, spec.faces)
                    records.append(ManifestRecord(
                        id=rid, image=image_rel, source="synthetic",
                        theta=sample.theta.tolist(), beta=sample.beta.tolist(), cam=sample.cam.tolist(),
                        joints3d=sample.joints3d.tolist(), joints2d=sample.joints2d.tolist(), mesh=mesh_rel,
                        joint_mask=[True] * spec.K,
                    ))
                else:
                    write_pgm(os.path.join(out_dir, image_rel), pseudo_freehand(sample.image, rng))
                    records.append(ManifestRecord(
                        id=rid, image=image_rel, source="freehand",
                        theta=sample.theta.tolist(), beta=sample.beta.tolist(), joints3d=sample.joints3d.tolist(),
                        joint_mask=[True] * spec.K,
                    ))
    manifest = DatasetManifest(body_model="body_model.json", records=records, root=os.path.abspath(out_dir))
    save_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def build_synthetic_dataset(spec, n_samples, views=None, seed=0, out_dir="dataset", resolution=64):
    return build_dataset(spec, n_samples, default_views() if views is None else views, seed, out_dir, resolution)


