"""DVMN: dual-encoder, single-decoder depth completion built from the sparse layers.

The depth encoder runs on the sparse depth map and its validity mask; the
image encoder has the same structure but sees an all-ones mask, so its
SI-convolutions behave like ordinary convolutions. Encoder outputs meet in
an SPP-style fusion, and the decoder climbs back up with transposed
convolutions, mask-aware skip fusion and dense residual bottlenecks.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .layers import (
    EPSILON,
    Conv1x1,
    ParamStore,
    fusion_block,
    fusion_params,
    mask_density,
    si_bottleneck_forward,
    si_conv_forward,
    spp_fuse,
    spp_params,
)
from .tensor import Tensor, add, batch_norm, concat, conv2d, mul, relu, transposed_conv2d


@dataclass
class NetworkConfig:
    C: int = 32
    stages: int = 4
    bottlenecks_per_stage: int = 6
    sisl_count: int = 4
    width_ratio: float = 0.5
    d_switch: int = 2
    batch_norm_decoder: bool = True
    share_weights: bool = False
    variant: str = "plain"
    depth_channels: int = 1
    image_channels: int = 3
    up_kernel: int = 4
    depth_scale: float = 85.0
    output_gain: float = 0.01
    output_bias: float = 10.0
    epsilon: float = EPSILON
    dtype: str = "float32"

    def validate(self) -> None:
        if self.C < 1:
            raise ValueError("channel base C must be >= 1")
        if self.stages < 1:
            raise ValueError("need at least one encoder stage")
        if self.bottlenecks_per_stage < 1:
            raise ValueError("each stage needs its expanding bottleneck")
        if not 0 <= self.sisl_count <= self.bottlenecks_per_stage:
            raise ValueError("sisl_count must fit inside the first stage")
        if not 0 < self.width_ratio <= 1:
            raise ValueError("width_ratio must lie in (0, 1]")
        if self.d_switch < 2:
            raise ValueError("d_switch must be >= 2")
        if self.up_kernel < 2 or self.up_kernel % 2:
            raise ValueError("up_kernel must be an even size >= 2")
        if self.output_gain < 0 or self.output_bias < 0:
            raise ValueError("output_gain and output_bias must be non-negative")
        if self.depth_scale <= 0 or self.epsilon <= 0:
            raise ValueError("depth_scale and epsilon must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def encoder_channels(self) -> List[int]:
        return [self.C * s for s in range(1, self.stages + 1)]

    @property
    def decoder_channels(self) -> List[int]:
        top = self.C * self.stages
        return [top - self.C * s for s in range(1, self.stages)] + [1]

    @property
    def multiple(self) -> int:
        return 2 ** self.stages

    @classmethod
    def from_dict(cls, values: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown network config fields: {sorted(unknown)}")
        return cls(**values)


@dataclass
class EncoderLayer:
    name: str
    kind: str  # "bottleneck" or "down"
    params: object
    stage: int


@dataclass
class DecoderStage:
    name: str
    up_w: Tensor
    up_b: Tensor
    fusion: Optional[Conv1x1] = None
    block: Optional["DenseBottleneck"] = None


@dataclass
class DenseBottleneck:
    reduce_w: Tensor
    inner_w: Tensor
    expand_w: Tensor
    biases: Tuple[Optional[Tensor], ...]
    norms: Tuple[Optional[Tuple[Tensor, Tensor, str]], ...]


@dataclass
class DvmnModel:
    config: NetworkConfig
    params: "OrderedDict[str, Tensor]"
    buffers: "OrderedDict[str, np.ndarray]"
    depth_encoder: List[EncoderLayer]
    image_encoder: List[EncoderLayer]
    spp: Conv1x1
    decoder: List[DecoderStage]
    training: bool = field(default=False)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def train(self, mode: bool = True) -> "DvmnModel":
        self.training = mode
        return self

    def eval(self) -> "DvmnModel":
        return self.train(False)

    def state_vector(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _encoder(store: ParamStore, prefix: str, cfg: NetworkConfig, in_ch: int,
             with_sisl: bool) -> List[EncoderLayer]:
    layers = []
    for stage, out_ch in enumerate(cfg.encoder_channels, start=1):
        for j in range(cfg.bottlenecks_per_stage):
            use_sisl = with_sisl and stage == 1 and j < cfg.sisl_count
            name = f"{prefix}.s{stage}.b{j}"
            p = store.bottleneck(name, in_ch if j == 0 else out_ch, out_ch, cfg.width_ratio,
                                 use_sisl=use_sisl, d_switch=cfg.d_switch,
                                 share_weights=cfg.share_weights, variant=cfg.variant,
                                 epsilon=cfg.epsilon)
            layers.append(EncoderLayer(name, "bottleneck", p, stage))
            if j == 0:
                name = f"{prefix}.s{stage}.down"
                p = store.si_conv(name, out_ch, out_ch, k=1, stride=2, epsilon=cfg.epsilon)
                layers.append(EncoderLayer(name, "down", p, stage))
        in_ch = out_ch
    return layers


def _dense_bottleneck(store: ParamStore, buffers, name: str, ch: int, cfg: NetworkConfig
                      ) -> DenseBottleneck:
    width = max(1, int(round(cfg.width_ratio * ch)))
    shapes = [(width, ch, 1, 1), (width, width, 3, 3), (ch, width, 1, 1)]
    weights, biases, norms = [], [], []
    for part, shape in zip(("reduce", "inner", "expand"), shapes):
        fan_in = shape[1] * shape[2] * shape[3]
        weights.append(store.normal(f"{name}.{part}.w", shape, np.sqrt(2.0 / fan_in)))
        if cfg.batch_norm_decoder:
            gamma = store.constant(f"{name}.{part}.bn.gamma", (shape[0],), 1.0)
            beta = store.constant(f"{name}.{part}.bn.beta", (shape[0],))
            key = f"{name}.{part}.bn"
            buffers[f"{key}.running_mean"] = np.zeros(shape[0], dtype=store.dtype)
            buffers[f"{key}.running_var"] = np.ones(shape[0], dtype=store.dtype)
            biases.append(None)
            norms.append((gamma, beta, key))
        else:
            biases.append(store.constant(f"{name}.{part}.b", (shape[0],)))
            norms.append(None)
    return DenseBottleneck(*weights, tuple(biases), tuple(norms))


def build_dvmn(cfg: NetworkConfig, rng_seed: int = 0) -> DvmnModel:
    """Build a DVMN with deterministic initialisation."""
    cfg.validate()
    store = ParamStore(rng_seed, dtype=np.dtype(cfg.dtype))
    buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
    depth_enc = _encoder(store, "depth", cfg, cfg.depth_channels, with_sisl=True)
    image_enc = _encoder(store, "image", cfg, cfg.image_channels, with_sisl=False)
    spp = spp_params(store, "spp", cfg.encoder_channels[-1])
    decoder = []
    k = cfg.up_kernel
    chans = [cfg.encoder_channels[-1]] + cfg.decoder_channels
    for s in range(1, cfg.stages + 1):
        cin, cout = chans[s - 1], chans[s]
        name = f"decoder.s{s}"
        std = np.sqrt(2.0 / (cin * k * k / 4.0))
        last = s == cfg.stages
        # a near-silent output layer keeps the first losses in a sane range
        up_w = store.normal(f"{name}.up.w", (cin, cout, k, k),
                            std * cfg.output_gain if last else std)
        up_b = store.constant(f"{name}.up.b", (cout,),
                              cfg.output_bias / cfg.depth_scale if last else 0.0)
        stage = DecoderStage(name, up_w, up_b)
        if s < cfg.stages:
            stage.fusion = fusion_params(store, f"{name}.fusion", cout, 2 * cout)
            stage.block = _dense_bottleneck(store, buffers, f"{name}.block", cout, cfg)
        decoder.append(stage)
    return DvmnModel(cfg, store.params, buffers, depth_enc, image_enc, spp, decoder)


def parameter_count(model: DvmnModel) -> int:
    return int(sum(p.size for p in model.params.values()))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _run_encoder(layers: List[EncoderLayer], x: Tensor, o: np.ndarray, stages: int):
    """Returns per-stage (features, mask) and the per-layer mask trace."""
    outputs: List[Tuple[Tensor, np.ndarray]] = []
    trace = []
    for i, layer in enumerate(layers):
        if layer.kind == "down":
            x, o = si_conv_forward(x, o, layer.params)
        else:
            x, o = si_bottleneck_forward(x, o, layer.params)
        trace.append((layer.name, o, layer.kind == "down"))
        last_of_stage = i + 1 == len(layers) or layers[i + 1].stage != layer.stage
        if last_of_stage:
            outputs.append((x, o))
    return outputs, trace


def _norm(model: DvmnModel, x: Tensor, norm) -> Tensor:
    gamma, beta, key = norm
    return batch_norm(x, gamma, beta, model.buffers[f"{key}.running_mean"],
                      model.buffers[f"{key}.running_var"], training=model.training)


def _dense_block(model: DvmnModel, x: Tensor, blk: DenseBottleneck) -> Tensor:
    h = x
    for idx, (w, b, norm) in enumerate(zip((blk.reduce_w, blk.inner_w, blk.expand_w),
                                           blk.biases, blk.norms)):
        pad = (w.shape[2] - 1) // 2
        h = conv2d(h, w, b, padding=pad)
        if norm is not None:
            h = _norm(model, h, norm)
        if idx < 2:
            h = relu(h)
    return relu(add(h, x))


def _check_inputs(model: DvmnModel, depth: np.ndarray, mask: np.ndarray, image: np.ndarray):
    cfg = model.config
    n, _, h, w = depth.shape
    if mask.shape != (n, 1, h, w):
        raise ValueError(f"mask shape {mask.shape} does not match depth {depth.shape}")
    if image.shape[0] != n or image.shape[2:] != (h, w):
        raise ValueError(f"image shape {image.shape} does not match depth {depth.shape}")
    m = cfg.multiple
    if h % m or w % m:
        ph, pw = (-h) % m, (-w) % m
        raise ValueError(f"input {h}x{w} is not divisible by {m}; pad by {ph} rows and "
                         f"{pw} columns")


def forward(model: DvmnModel, depth, mask, image) -> Tensor:
    """Complete a sparse depth map (metres) guided by an RGB image in [0, 1].

    Returns a (N, 1, H, W) tensor of depth in metres.
    """
    cfg = model.config
    dtype = np.dtype(cfg.dtype)
    depth_arr = depth.data if isinstance(depth, Tensor) else np.asarray(depth, dtype=dtype)
    image_arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=dtype)
    mask = np.asarray(mask, dtype=dtype)
    _check_inputs(model, depth_arr, mask, image_arr)

    d_in = Tensor(depth_arr.astype(dtype) / cfg.depth_scale)
    img = Tensor(image_arr.astype(dtype))
    ones = np.ones_like(mask)
    depth_out, _ = _run_encoder(model.depth_encoder, d_in, mask, cfg.stages)
    image_out, _ = _run_encoder(model.image_encoder, img, ones, cfg.stages)

    x = spp_fuse(image_out[-1][0], depth_out[-1][0], model.spp)
    for s, stage in enumerate(model.decoder, start=1):
        pad = (cfg.up_kernel - 2) // 2
        x = transposed_conv2d(x, stage.up_w, stage.up_b, stride=2, padding=pad)
        if stage.fusion is not None:
            level = cfg.stages - s - 1
            f_depth, o_stage = depth_out[level]
            skip = concat([f_depth, image_out[level][0]], axis=1)
            x = fusion_block(x, skip, o_stage, stage.fusion)
            x = _dense_block(model, x, stage.block)
    return mul(x, cfg.depth_scale)


def layer_mask_trace(model: DvmnModel, mask: np.ndarray) -> List[Tuple[str, np.ndarray, float]]:
    """Validity masks after every depth-encoder layer, in execution order.

    Masks do not depend on feature values, so the encoder runs on zeros.
    """
    cfg = model.config
    mask = np.asarray(mask, dtype=np.dtype(cfg.dtype))
    x = Tensor(np.zeros((mask.shape[0], cfg.depth_channels) + mask.shape[2:], dtype=mask.dtype))
    _, trace = _run_encoder(model.depth_encoder, x, mask, cfg.stages)
    return [(name, o, mask_density(o)) for name, o, _ in trace]


def strided_layers(model: DvmnModel) -> List[str]:
    return [layer.name for layer in model.depth_encoder if layer.kind == "down"]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"SPCKPT\x00\x00"
FORMAT_VERSION = 1


def save_checkpoint(model: DvmnModel, path, extra_arrays: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[dict] = None) -> None:
    """Write the model as a little-endian parameter container.

    Layout: 8-byte magic, uint32 format version, uint64 header length, a
    UTF-8 JSON header (config, entry table, free-form meta), then the raw
    little-endian payload of every entry in table order.
    """
    entries, chunks, offset = [], [], 0
    groups = [("param", {k: v.data for k, v in model.params.items()}),
              ("buffer", dict(model.buffers)),
              ("extra", dict(extra_arrays or {}))]
    for kind, arrays in groups:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            entries.append({"name": name, "kind": kind, "dtype": le.dtype.str,
                            "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "config": asdict(model.config),
              "entries": entries, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint(path) -> Tuple[dict, Dict[str, Tuple[str, np.ndarray]]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a sparseconv checkpoint")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for e in header["entries"]:
        start = base + e["offset"]
        arr = np.frombuffer(data[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = (e["kind"], arr.reshape(e["shape"]).copy())
    return header, arrays


def load_checkpoint(path) -> Tuple[DvmnModel, dict, Dict[str, np.ndarray]]:
    """Returns the model, the header meta and any extra arrays."""
    header, arrays = read_checkpoint(path)
    cfg = NetworkConfig.from_dict(header["config"])
    model = build_dvmn(cfg, 0)
    extra = {}
    for name, (kind, arr) in arrays.items():
        native = arr.astype(arr.dtype.newbyteorder("="))
        if kind == "param":
            if name not in model.params or model.params[name].shape != native.shape:
                raise ValueError(f"checkpoint parameter {name!r} does not fit the model")
            model.params[name].data = native
        elif kind == "buffer":
            model.buffers[name][...] = native
        else:
            extra[name] = native
    missing = set(model.params) - {n for n, (k, _) in arrays.items() if k == "param"}
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    return model, header.get("meta", {}), extra
