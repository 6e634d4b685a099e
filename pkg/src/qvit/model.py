"""Transformer assembly: one harness for the classical and quantum variants.

Both share the pipeline patch-embed -> attention blocks -> MLP -> mean pool
-> ReLU -> linear head. "classical" blocks project K/Q/V with bias-free
n x n linear maps (3n^2 parameters per block); "quantum" blocks push each
token row through three independent ring circuits (6n parameters per
block). Residual connections and layer norm exist behind config flags and
default off; the reference configuration is depth 1, single head, mean
pooling.

Checkpoints are a versioned binary container: magic "QVIT1", a JSON header
with the config and parameter manifest, then named float64 blobs. The
round trip is bit-exact.
"""

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import qnn

CHECKPOINT_MAGIC = b"QVIT1"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    in_channels: int
    patch_size: int
    embed_dim: int
    depth: int
    attention_kind: str          # "classical" | "quantum"
    mlp_hidden: int
    n_classes: int
    attn_scale: bool = True      # 1/sqrt(n) on attention logits
    residual: bool = False
    layer_norm: bool = False
    head_to: int | None = None   # two-stage head width (teacher variant)

    def __post_init__(self):
        if self.attention_kind not in ("classical", "quantum"):
            raise ValueError(f"unknown attention kind {self.attention_kind!r}")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.attention_kind == "quantum" and self.embed_dim not in (4, 8):
            raise ValueError("quantum attention ships 4- and 8-qubit topologies")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def tokens(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.in_channels * self.patch_size ** 2


# the six Table-style reference configurations (channels/classes come from
# the dataset at resolution time)
PRESETS = {
    "vit4_28": dict(image_size=28, patch_size=2, embed_dim=4, attention_kind="classical"),
    "qvit4_28": dict(image_size=28, patch_size=2, embed_dim=4, attention_kind="quantum"),
    "vit4_224": dict(image_size=224, patch_size=16, embed_dim=4, attention_kind="classical"),
    "qvit4_224": dict(image_size=224, patch_size=16, embed_dim=4, attention_kind="quantum"),
    "vit8_224": dict(image_size=224, patch_size=16, embed_dim=8, attention_kind="classical"),
    "qvit8_224": dict(image_size=224, patch_size=16, embed_dim=8, attention_kind="quantum"),
}


def preset_config(name, in_channels, n_classes, depth=1, **overrides):
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = dict(PRESETS[name])
    base.update(in_channels=in_channels, n_classes=n_classes, depth=depth)
    base.setdefault("mlp_hidden", 2 * base["embed_dim"])
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def named(self):
        return list(self.tensors.items())

    def trainable(self):
        return [t for _, t in self.tensors.items()]

    def head_names(self):
        return ["head.weight", "head.bias"]

    def copy(self):
        out = {k: ad.parameter(v.data.copy()) for k, v in self.tensors.items()}
        return ModelParams(self.config, out)


def init_params(config, seed):
    """Deterministic in seed: same seed, same bytes."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    t = {}

    def dense(fan_in, shape):
        return ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))

    t["patch.weight"] = dense(config.patch_dim, (config.patch_dim, d))
    t["patch.bias"] = ad.parameter(np.zeros(d))
    t["pos"] = ad.parameter(rng.normal(0.0, 0.02, size=(config.tokens, d)))
    for b in range(config.depth):
        if config.attention_kind == "quantum":
            for proj in ("q", "k", "v"):
                t[f"block{b}.{proj}"] = ad.parameter(qnn.init_params(d, rng))
        else:
            for proj in ("q", "k", "v"):
                t[f"block{b}.{proj}"] = dense(d, (d, d))
        t[f"block{b}.mlp.w1"] = dense(d, (d, config.mlp_hidden))
        t[f"block{b}.mlp.b1"] = ad.parameter(np.zeros(config.mlp_hidden))
        t[f"block{b}.mlp.w2"] = dense(config.mlp_hidden, (config.mlp_hidden, d))
        t[f"block{b}.mlp.b2"] = ad.parameter(np.zeros(d))
    if config.head_to is None:
        t["head.weight"] = dense(d, (d, config.n_classes))
        t["head.bias"] = ad.parameter(np.zeros(config.n_classes))
    else:
        t["head_in.weight"] = dense(d, (d, config.head_to))
        t["head_in.bias"] = ad.parameter(np.zeros(config.head_to))
        t["head.weight"] = dense(config.head_to, (config.head_to, config.n_classes))
        t["head.bias"] = ad.parameter(np.zeros(config.n_classes))
    return ModelParams(config, t)


def extract_patches(image, patch_size):
    """(C, H, W) -> (tokens, C * patch * patch), non-overlapping, row-major."""
    c, h, w = image.shape
    ph, pw = h // patch_size, w // patch_size
    x = image.reshape(c, ph, patch_size, pw, patch_size)
    x = x.transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(x.reshape(ph * pw, c * patch_size * patch_size))


def patch_embed(image, params):
    """Patchify + linear map + learned positional embedding."""
    cfg = params.config
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise ValueError(f"image shape {image.shape} does not match config")
    patches = ad.constant(extract_patches(image, cfg.patch_size))
    x = ad.add(ad.matmul(patches, params.tensors["patch.weight"]),
               params.tensors["patch.bias"])
    return ad.add(x, params.tensors["pos"])


def attention(q, k, v, scale=True):
    """softmax(q k^T / sqrt(n)) v."""
    scores = ad.matmul(q, ad.transpose(k))
    if scale:
        scores = ad.scale(scores, 1.0 / np.sqrt(q.data.shape[-1]))
    return ad.matmul(ad.softmax_rows(scores), v)


def self_attention_block(x, params, block, threads=1):
    cfg = params.config
    if cfg.attention_kind == "quantum":
        pairs = qnn.ring_topology(cfg.embed_dim)
        q = ad.quantum_apply(x, params.tensors[f"block{block}.q"], pairs, threads=threads)
        k = ad.quantum_apply(x, params.tensors[f"block{block}.k"], pairs, threads=threads)
        v = ad.quantum_apply(x, params.tensors[f"block{block}.v"], pairs, threads=threads)
    else:
        q = ad.matmul(x, params.tensors[f"block{block}.q"])
        k = ad.matmul(x, params.tensors[f"block{block}.k"])
        v = ad.matmul(x, params.tensors[f"block{block}.v"])
    return attention(q, k, v, scale=cfg.attn_scale)


def _mlp(x, params, block):
    t = params.tensors
    h = ad.relu(ad.add(ad.matmul(x, t[f"block{block}.mlp.w1"]), t[f"block{block}.mlp.b1"]))
    return ad.add(ad.matmul(h, t[f"block{block}.mlp.w2"]), t[f"block{block}.mlp.b2"])


def forward(image, params, threads=1):
    """Full pipeline. Returns (logits (1, n_classes), intermediate (1, d)).

    The intermediate is the pre-classifier vector used for distillation:
    the pooled token representation (or, for two-stage heads, the output of
    the first head layer), taken before its ReLU.
    """
    cfg = params.config
    x = patch_embed(image, params)
    for b in range(cfg.depth):
        a = self_attention_block(x, params, b, threads=threads)
        if cfg.residual:
            a = ad.add(a, x)
        if cfg.layer_norm:
            a = ad.layer_norm_rows(a)
        m = _mlp(a, params, b)
        if cfg.residual:
            m = ad.add(m, a)
        if cfg.layer_norm:
            m = ad.layer_norm_rows(m)
        x = m
    pooled = ad.mean_rows(x)
    t = params.tensors
    if cfg.head_to is None:
        intermediate = pooled
    else:
        intermediate = ad.add(ad.matmul(ad.relu(pooled), t["head_in.weight"]),
                              t["head_in.bias"])
    logits = ad.add(ad.matmul(ad.relu(intermediate), t["head.weight"]), t["head.bias"])
    return logits, intermediate


def sa_param_count(n):
    """Classical attention: three bias-free n->n projections."""
    return 3 * n * n


def qsa_param_count(n):
    """Quantum attention: three ring circuits, two angles per pair."""
    return 6 * n


def count_parameters(config):
    """Exact per-component counts; the attention row carries the SA/QSA pair."""
    d = config.embed_dim
    per_block_attn = (qsa_param_count(d) if config.attention_kind == "quantum"
                      else sa_param_count(d))
    per_block_mlp = d * config.mlp_hidden + config.mlp_hidden + config.mlp_hidden * d + d
    head = d * config.n_classes + config.n_classes
    if config.head_to is not None:
        head = (d * config.head_to + config.head_to
                + config.head_to * config.n_classes + config.n_classes)
    counts = {
        "patch_embed": config.patch_dim * d + d,
        "positional": config.tokens * d,
        "attention": config.depth * per_block_attn,
        "mlp": config.depth * per_block_mlp,
        "head": head,
    }
    counts["total"] = sum(counts.values())
    counts["attention_per_block"] = per_block_attn
    counts["sa_per_block"] = sa_param_count(d)
    counts["qsa_per_block"] = qsa_param_count(d)
    return counts


def total_parameters(params):
    return sum(t.data.size for t in params.tensors.values())


def save_checkpoint(path_or_file, params):
    names = [name for name, _ in params.named()]
    header = {
        "config": asdict(params.config),
        "params": [{"name": n, "shape": list(params.tensors[n].data.shape)}
                   for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<BI", 1, len(blob)))
    out.write(blob)
    for n in names:
        arr = np.ascontiguousarray(params.tensors[n].data, dtype="<f8")
        out.write(arr.tobytes())
    data = out.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as f:
            f.write(data)


def load_checkpoint(path_or_file):
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as f:
            data = f.read()
    if data[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<BI", data, 5)
    if version != 1:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[10:10 + hlen])
        config = ModelConfig(**header["config"])
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    offset = 10 + hlen
    tensors = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError("checkpoint truncated")
        arr = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape)
        tensors[entry["name"]] = ad.parameter(arr.copy())
        offset = end
    if offset != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return ModelParams(config, tensors)
