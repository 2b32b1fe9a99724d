"""Full forward pass, training loss and checkpoint container."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .agan import agan_forward, init_agan
from .graph import LandmarkLayout, build_graph
from .hpc import (
    DEFAULT_COUNTS, component_similarity, composed_sign_bank, diversity_loss, init_hpc,
    sign_embedding, sign_logits, vertex_matrix,
)
from .pdm import COMPONENTS, NORM_EPS, ComponentSet, init_pdm, orthogonality_loss, pdm_forward
from .ssm import bissm_layer, init_layer

CHECKPOINT_MAGIC = b"PHSGNCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 128
    d_comp: int = 32
    gat_heads: int = 4
    gat_layers: int = 3
    ssm_layers: int = 4
    d_state: int = 16
    expansion: int = 2
    dropout: float = 0.1
    tau: float = 0.1
    proto_counts: tuple = DEFAULT_COUNTS
    n_classes: int = 100
    frames: int = 30
    layout: str = "DominantHand21"
    lambda_ortho: float = 0.1
    lambda_div: float = 0.01
    label_smoothing: float = 0.1
    conv_kernel: int = 3
    d_embed: int | None = None
    # "learned": free K x De sign bank; "composed": prototypes from class tuples
    sign_prototypes: str = "learned"
    class_tuples: list | None = None
    # ablation: no decomposition, BiSSM on spatial features, linear head
    flat: bool = False
    backend: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.proto_counts = tuple(int(c) for c in self.proto_counts)
        if self.d_embed is None:
            self.d_embed = self.d_model
        for name in ("d_model", "d_comp", "gat_heads", "gat_layers", "d_state", "expansion",
                     "n_classes", "frames", "conv_kernel", "d_embed"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.ssm_layers < 0 or self.tau <= 0 or not 0 <= self.dropout < 1:
            raise ValueError("invalid ssm_layers / tau / dropout")
        if len(self.proto_counts) != 4 or min(self.proto_counts) < 2:
            raise ValueError("need four prototype banks with at least two rows each")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")
        if self.sign_prototypes not in ("learned", "composed"):
            raise ValueError(f"unknown sign_prototypes {self.sign_prototypes!r}")
        if self.sign_prototypes == "composed" and not self.flat:
            if self.class_tuples is None or len(self.class_tuples) != self.n_classes:
                raise ValueError("composed sign prototypes need one component tuple per class")
        LandmarkLayout.from_name(self.layout)

    @property
    def layout_obj(self) -> LandmarkLayout:
        return LandmarkLayout.from_name(self.layout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["proto_counts"] = list(self.proto_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    logits: ag.Tensor
    components: ComponentSet | None
    pooled: list | None
    g_bar: ag.Tensor
    sims: list | None = None
    embedding: ag.Tensor | None = None


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(seed))
    c = config
    p = init_agan(rng, 3, c.d_model, c.gat_heads, c.gat_layers)
    if not c.flat:
        p.update(init_pdm(rng, c.d_model, c.d_comp, c.conv_kernel))
    for layer in range(c.ssm_layers):
        p.update(init_layer(rng, c.d_model, c.d_state, c.expansion, f"ssm{layer}"))
    if c.flat:
        p["head.W"] = rng.normal(0.0, 1.0 / np.sqrt(c.d_model), (c.d_model, c.n_classes))
        p["head.b"] = np.zeros(c.n_classes)
    else:
        p.update(init_hpc(rng, c.d_comp, c.d_model, c.d_embed, c.proto_counts, c.n_classes,
                          learned_sign_bank=c.sign_prototypes == "learned"))
    return p


def count_parameters(params: dict) -> int:
    return int(sum(np.size(v) for v in params.values()))


def bank_names() -> list[str]:
    return [f"hpc.P_{name}" for name in COMPONENTS]


def _graph_for(config: ModelConfig):
    key = config.layout
    if key not in _GRAPHS:
        _GRAPHS[key] = build_graph(config.layout_obj)
    return _GRAPHS[key]


_GRAPHS: dict = {}
_VERTICES: dict = {}


def sign_bank(params: dict, config: ModelConfig) -> ag.Tensor:
    if config.sign_prototypes == "learned":
        return ag.as_tensor(params["hpc.P_sign"])
    key = (tuple(map(tuple, config.class_tuples)), config.proto_counts)
    V = _VERTICES.get(key)
    if V is None:
        V = _VERTICES[key] = vertex_matrix(config.class_tuples, config.proto_counts)
    return composed_sign_bank(V, params["hpc.W_e"], config.d_model)


def classify_head(params: dict, pooled, g_bar, config: ModelConfig, eps: float = NORM_EPS):
    """Component matching + sign embedding + cosine logits from pooled features."""
    sims = [
        component_similarity(pooled[i], params[f"hpc.P_{name}"], config.tau, eps=eps)
        for i, name in enumerate(COMPONENTS)
    ]
    e = sign_embedding(sims, g_bar, params["hpc.W_e"])
    logits = sign_logits(e, sign_bank(params, config), config.tau, eps=eps)
    return logits, sims, e


def forward(params: dict, x, config: ModelConfig, train: bool = False, rng=None) -> ForwardOutput:
    """Landmarks (T, N, 3) or (B, T, N, 3) -> logits and intermediate features.

    Dropout is active only when ``train`` is true and a generator is given.
    """
    x = np.asarray(x.data if isinstance(x, ag.Tensor) else x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    layout = config.layout_obj
    if x.ndim != 4 or x.shape[2] != layout.node_count or x.shape[3] != 3:
        raise ValueError(f"expected (B, T, {layout.node_count}, 3) landmarks, got {x.shape}")
    if x.shape[1] != config.frames:
        raise ValueError(f"expected {config.frames} frames, got {x.shape[1]}")
    drop = config.dropout if train else 0.0
    rng = rng if train else None

    z = agan_forward(x, _graph_for(config), params, config.gat_layers, dropout=drop, rng=rng)
    if config.flat:
        comps, pooled = None, None
        f = z
    else:
        comps, f = pdm_forward(z, params, dropout=drop, rng=rng)
        pooled = comps.pooled()
    for layer in range(config.ssm_layers):
        f = bissm_layer(f, params, f"ssm{layer}", backend=config.backend)
        f = ag.dropout(f, drop, rng)
    g_bar = ag.mean(f, axis=-2)

    if config.flat:
        logits = g_bar @ params["head.W"] + params["head.b"]
        out = ForwardOutput(logits, None, None, g_bar)
    else:
        logits, sims, e = classify_head(params, pooled, g_bar, config)
        out = ForwardOutput(logits, comps, pooled, g_bar, sims, e)
    if squeeze:
        out.logits = ag.reshape(out.logits, out.logits.shape[1:])
        out.g_bar = ag.reshape(out.g_bar, out.g_bar.shape[1:])
        if out.pooled is not None:
            out.pooled = [ag.reshape(v, v.shape[1:]) for v in out.pooled]
    return out


def smoothed_cross_entropy(logits, labels, smoothing: float) -> ag.Tensor:
    """Mean over the batch of -sum_k q_k log p_k with q = (1 - eps) onehot + eps / K."""
    logits = ag.as_tensor(logits)
    if logits.ndim == 1:
        logits = ag.reshape(logits, (1,) + logits.shape)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    K = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"label out of range for {K} classes")
    q = np.full((len(labels), K), smoothing / K)
    q[np.arange(len(labels)), labels] += 1.0 - smoothing
    return -ag.mean(ag.tsum(ag.log_softmax(logits, axis=-1) * ag.Tensor(q), axis=-1))


@dataclass
class LossTerms:
    total: ag.Tensor
    ce: float
    ortho: float
    div: float


def total_loss(params: dict, out: ForwardOutput, labels, config: ModelConfig) -> LossTerms:
    ce = smoothed_cross_entropy(out.logits, labels, config.label_smoothing)
    total = ce
    ortho_v = div_v = 0.0
    if not config.flat:
        ortho = ag.mean(orthogonality_loss(out.pooled, eps=NORM_EPS))
        div = ag.mean(ag.stack([diversity_loss(params[n]) for n in bank_names()]))
        ortho_v, div_v = ortho.item(), div.item()
        if config.lambda_ortho:
            total = total + config.lambda_ortho * ortho
        if config.lambda_div:
            total = total + config.lambda_div * div
    return LossTerms(total, ce.item(), ortho_v, div_v)


def predict(params: dict, x, config: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for a stack of sequences (n, T, N, 3)."""
    x = np.asarray(x)
    chunks = [forward(params, x[i:i + batch_size], config).logits.data for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, config.n_classes))


def pooled_components(params: dict, x, config: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Eval-mode pooled component embeddings, shape (n, 4, Dc)."""
    x = np.asarray(x)
    out = []
    for i in range(0, len(x), batch_size):
        fo = forward(params, x[i:i + batch_size], config)
        out.append(np.stack([v.data for v in fo.pooled], axis=1))
    return np.concatenate(out) if out else np.zeros((0, 4, config.d_comp))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: dict, config: ModelConfig, extra: dict | None = None) -> None:
    """Binary container: magic, version, JSON header, little-endian float64 payload."""
    tensors, offset = [], 0
    names = list(params)
    for name in names:
        arr = np.asarray(params[name], dtype=np.float64)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.size * 8})
        offset += arr.size * 8
    header = {
        "format": "phonsign-checkpoint",
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "tensors": tensors,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for name in names:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    raw = fh.read(12)
    if len(raw) != 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    hbytes = fh.read(hlen)
    if len(hbytes) != hlen:
        raise CheckpointError(f"{path}: truncated header")
    return json.loads(hbytes)


def load_checkpoint(path):
    """Returns ``(params, config, extra)``."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    params = {}
    for t in header["tensors"]:
        chunk = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise CheckpointError(f"{path}: tensor {t['name']} truncated")
        params[t["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(t["shape"])
    config = ModelConfig.from_dict(header["config"])
    return params, config, header.get("extra", {})
