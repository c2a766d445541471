"""SketchBodyNet: residual backbone and three attention decoder branches."""

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import gradcore as gc
from .nnops import (
    AttentionConfig,
    ParamStore,
    conv_spec,
    init_params,
    mhsa,
    mhsa_spec,
    mlp,
    mlp_spec,
    residual_block,
    residual_block_spec,
)

BRANCHES = ("pose", "shape", "cam")
CHECKPOINT_MAGIC = b"SBNCKPT\n"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    input_resolution: int = 64
    stem_channels: int = 16
    stem_stride: int = 1
    backbone_stage_channels: tuple = (32, 64, 128, 256)
    heads: int = 4
    head_dim: int = 16
    mlp_hidden: tuple = (256, 256)
    attention_enabled: bool = True
    multi_branch: bool = True
    residual_heads: bool = False
    n_theta: int = 48
    n_beta: int = 4
    theta_init: tuple = None
    beta_init: tuple = None
    cam_init: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        self.backbone_stage_channels = tuple(int(c) for c in self.backbone_stage_channels)
        self.mlp_hidden = tuple(int(w) for w in self.mlp_hidden)
        if self.theta_init is None:
            self.theta_init = (0.0,) * self.n_theta
        if self.beta_init is None:
            self.beta_init = (0.0,) * self.n_beta
        self.theta_init = tuple(float(x) for x in self.theta_init)
        self.beta_init = tuple(float(x) for x in self.beta_init)
        self.cam_init = tuple(float(x) for x in self.cam_init)
        if len(self.theta_init) != self.n_theta or len(self.beta_init) != self.n_beta or len(self.cam_init) != 3:
            raise ValueError("init parameter lengths must match n_theta, n_beta and 3")

    @property
    def model_dim(self):
        return self.backbone_stage_channels[-1]

    @property
    def attention(self):
        return AttentionConfig(self.heads, self.head_dim, self.model_dim)

    @property
    def output_dims(self):
        return {"pose": self.n_theta, "shape": self.n_beta, "cam": 3}

    def init_vector(self, branch):
        return np.array({"pose": self.theta_init, "shape": self.beta_init, "cam": self.cam_init}[branch])

    def feature_size(self):
        size = (self.input_resolution + 2 - 3) // self.stem_stride + 1
        for _ in self.backbone_stage_channels:
            size = (size + 2 - 3) // 2 + 1
        return size

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NetConfig fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def for_body_model(cls, spec, **overrides):
        return cls(n_theta=spec.n_theta, n_beta=spec.n_beta, **overrides)


def full_scale_config(**overrides):
    """ResNet-scale widths: 224 input, 2048-D feature, 8 heads of 64."""
    base = dict(
        input_resolution=224,
        stem_channels=64,
        stem_stride=2,
        backbone_stage_channels=(256, 512, 1024, 2048),
        heads=8,
        head_dim=64,
        mlp_hidden=(1024, 1024),
        n_theta=72,
        n_beta=10,
    )
    base.update(overrides)
    return NetConfig(**base)


@dataclass
class NetOutput:
    theta: gc.Tensor
    beta: gc.Tensor
    cam: gc.Tensor


def _decoder_names(cfg):
    return BRANCHES if cfg.multi_branch else ("trunk",)


def _decoder_io(cfg, name):
    if name == "trunk":
        return cfg.n_theta + cfg.n_beta + 3
    return cfg.output_dims[name]


def _decoder_init(cfg, name):
    if name == "trunk":
        return np.concatenate([cfg.init_vector(b) for b in BRANCHES])
    return cfg.init_vector(name)


def param_specs(cfg):
    specs = conv_spec("backbone.stem", 3, cfg.stem_channels, 3)
    c_in = cfg.stem_channels
    for i, c_out in enumerate(cfg.backbone_stage_channels):
        specs += residual_block_spec(f"backbone.stage{i}", c_in, c_out, stride=2)
        c_in = c_out
    for name in _decoder_names(cfg):
        if cfg.attention_enabled:
            specs += mhsa_spec(f"{name}.attn", cfg.attention)
        out = _decoder_io(cfg, name)
        specs += mlp_spec(f"{name}.mlp", (cfg.model_dim + out,) + cfg.mlp_hidden + (out,))
    return specs


def init_network(cfg, seed):
    return init_params(param_specs(cfg), seed)


def image_to_input(sketch):
    """Sketch (R, R) uint8 -> (3, R, R) float ink map, strokes = 1."""
    ink = (255.0 - np.asarray(sketch, dtype=np.float64)) / 255.0
    return np.repeat(ink[None], 3, axis=0)


def backbone_forward(image, params, cfg):
    """(3, R, R) or (N, 3, R, R) image -> (model_dim,) or (N, model_dim) feature."""
    x = gc.as_tensor(image)
    if x.shape[-1] != cfg.input_resolution or x.shape[-2] != cfg.input_resolution or x.shape[-3] != 3:
        raise gc.ShapeError(f"expected 3x{cfg.input_resolution}x{cfg.input_resolution} input, got {x.shape}")
    x = gc.relu(
        gc.conv2d(x, params["backbone.stem.w"], stride=cfg.stem_stride, pad=1, bias=params["backbone.stem.b"])
    )
    for i in range(len(cfg.backbone_stage_channels)):
        x = residual_block(x, params, f"backbone.stage{i}", stride=2)
    return gc.global_avg_pool(x)


def backbone_feature_map(image, params, cfg):
    """Final feature map before pooling; mainly for shape inspection."""
    x = gc.relu(
        gc.conv2d(gc.as_tensor(image), params["backbone.stem.w"], stride=cfg.stem_stride, pad=1,
                  bias=params["backbone.stem.b"])
    )
    for i in range(len(cfg.backbone_stage_channels)):
        x = residual_block(x, params, f"backbone.stage{i}", stride=2)
    return x


def decoder_branch_forward(branch, f_in, params, cfg):
    """x = f_in + mhsa(f_in) (or f_in alone), then MLP over concat(x, init)."""
    f_in = gc.as_tensor(f_in)
    if f_in.shape[-1] != cfg.model_dim:
        raise gc.ShapeError(f"feature width {f_in.shape[-1]} != model_dim {cfg.model_dim}")
    x = f_in + mhsa(f_in, cfg.attention, params, f"{branch}.attn") if cfg.attention_enabled else f_in
    init = _decoder_init(cfg, branch)
    if f_in.ndim == 2:
        init = np.broadcast_to(init, (f_in.shape[0], init.size)).copy()
    out_dim = _decoder_io(cfg, branch)
    out = mlp(gc.concat([x, init], axis=-1), (cfg.model_dim + out_dim,) + cfg.mlp_hidden + (out_dim,), params,
              f"{branch}.mlp")
    if cfg.residual_heads:
        out = out + init
    return out


def sketchbodynet_forward(image, params, cfg):
    f_in = backbone_forward(image, params, cfg)
    if cfg.multi_branch:
        theta, beta, cam = (decoder_branch_forward(b, f_in, params, cfg) for b in BRANCHES)
    else:
        theta, beta, cam = gc.split(
            decoder_branch_forward("trunk", f_in, params, cfg), [cfg.n_theta, cfg.n_beta, 3], axis=-1
        )
    return NetOutput(theta, beta, cam)


def branch_of(name):
    """Decoder branch owning a parameter, or None for the backbone."""
    head = name.split(".", 1)[0]
    return head if head in BRANCHES or head == "trunk" else None


# --- checkpoints -------------------------------------------------------------


class CheckpointError(ValueError):
    """Version/shape mismatch or truncated checkpoint payload."""


@dataclass
class Checkpoint:
    params: ParamStore
    config: NetConfig
    rng_state: dict = None
    step: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, params, cfg, rng_state=None, step=0, extra=None):
    """Magic line, u64 header length, JSON header, then float64 LE payload.

    Tensors (parameters, then Adam first and second moments) are laid out
    back to back in header order.
    """
    tensors, chunks, offset = [], [], 0
    for name, t in params.items():
        st = params.state[name]
        for key, arr in ((name, t.data), (f"{name}#m", st["m"]), (f"{name}#v", st["v"])):
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            tensors.append({"name": key, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "rng": rng_state or {},
        "step": int(step),
        "adam_steps": {name: int(params.state[name]["t"]) for name in params},
        "tensors": tensors,
        "payload_bytes": offset,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for chunk in chunks:
            f.write(chunk)


def read_checkpoint_header(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a SketchBodyNet checkpoint")
    base = len(CHECKPOINT_MAGIC)
    if len(data) < base + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[base : base + 8])
    try:
        header = json.loads(data[base + 8 : base + 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    return header, data[base + 8 + hlen :]


def load_checkpoint(path, cfg=None):
    header, payload = read_checkpoint_header(path)
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    stored_cfg = NetConfig.from_dict(header["config"])
    cfg = stored_cfg if cfg is None else cfg
    if len(payload) < header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    expected = {s.name: tuple(s.shape) for s in param_specs(cfg)}
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated in {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape)
    store = ParamStore()
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        for key in (name, f"{name}#m", f"{name}#v"):
            if key in arrays and arrays[key].shape != shape:
                raise CheckpointError(f"{path}: {key} has shape {arrays[key].shape}, config expects {shape}")
        store.add(name, arrays[name].copy())
        st = store.state[name]
        if f"{name}#m" in arrays:
            st["m"] = arrays[f"{name}#m"].copy()
            st["v"] = arrays[f"{name}#v"].copy()
        st["t"] = int(header.get("adam_steps", {}).get(name, 0))
    extra_params = set(n for n in arrays if "#" not in n) - set(expected)
    if extra_params:
        raise CheckpointError(f"{path}: tensors not in config: {sorted(extra_params)[:5]}")
    return Checkpoint(store, cfg, header.get("rng") or None, int(header.get("step", 0)), header.get("extra", {}))
