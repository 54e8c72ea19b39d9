"""Text priors for voxel features.

Structured prompts are rendered to text, encoded into unit vectors (a seeded
stub encoder or a precomputed embedding table), adapted by a low-rank
adapter, and injected into voxels through gated cross-attention::

    out = softmax(Q K^T / sqrt(d_k)) V_text * gate(V) + V
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from voxfuse.core.functional import sigmoid, softmax
from voxfuse.core.nn import Linear, Module
from voxfuse.core.tensor import Tensor, as_tensor, matmul, reshape, transpose
from voxfuse.errors import ContractError, ShapeError
from voxfuse.voxel import VoxelGrid

DEFAULT_EMBED_DIM = 512

# nuScenes-OpenOccupancy semantic classes
NUSCENES_CLASSES = (
    "barrier", "bicycle", "bus", "car", "construction_vehicle", "motorcycle", "pedestrian",
    "traffic_cone", "trailer", "truck", "driveable_surface", "other_flat", "sidewalk",
    "terrain", "manmade", "vegetation",
)


class Region(str, enum.Enum):
    USA = "USA"
    SINGAPORE = "Singapore"
    OTHER = "Other"

    @classmethod
    def parse(cls, value) -> "Region":
        if isinstance(value, Region):
            return value
        for member in cls:
            if str(value).lower() in (member.value.lower(), member.name.lower()):
                return member
        return cls.OTHER

    @property
    def phrase(self) -> str:
        return {"USA": "the USA", "Singapore": "Singapore"}.get(self.value, "a city")


TEMPLATES = {
    "generic": "a driving scene in {region} that may contain {classes}",
    "instance": "a driving scene in {region} containing {classes}",
    "token": "a photo of a {name}, as seen on the streets of {region}",
    "weather": "{weather}",
}


@dataclass(frozen=True)
class PromptSpec:
    class_names: tuple[str, ...]
    region: Region = Region.OTHER
    template: str = "generic"
    slots: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "region", Region.parse(self.region))
        if not self.class_names:
            raise ContractError("a prompt needs at least one class name")

    def text(self) -> str:
        names = ", ".join(n.replace("_", " ") for n in self.class_names)
        return TEMPLATES.get(self.template, "{classes}").format(
            region=self.region.phrase, classes=names, **dict(self.slots))

    def token_texts(self) -> list[str]:
        """One phrase per class; these become the attention keys and values."""
        return [
            TEMPLATES["token"].format(name=n.replace("_", " "), region=self.region.phrase)
            for n in self.class_names
        ]


def build_instance_prompt(classes_present: Iterable[str], region, t: int,
                          all_classes: tuple[str, ...] = NUSCENES_CLASSES) -> PromptSpec:
    """Frame 0 gets a generic all-class prompt; later frames name only the given classes.

    Class order follows ``all_classes``. An empty class set at ``t > 0`` falls
    back to the generic prompt.
    """
    present = set(classes_present)
    restricted = tuple(c for c in all_classes if c in present)
    if t == 0 or not restricted:
        return PromptSpec(tuple(all_classes), Region.parse(region), "generic")
    return PromptSpec(restricted, Region.parse(region), "instance")


def normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def prompt_hash(text: str) -> str:
    return hashlib.sha256(normalize_text(text).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TextEmbedding:
    vector: Tensor
    source_hash: str

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


class TextEncoder(Protocol):
    dim: int

    def encode_raw(self, text: str) -> np.ndarray: ...


class StubTextEncoder:
    """Deterministic stand-in for a text encoder: hashed text seeds a Gaussian vector."""

    def __init__(self, dim: int = DEFAULT_EMBED_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._encode = lru_cache(maxsize=4096)(self._encode_uncached)

    def _encode_uncached(self, norm_text: str) -> bytes:
        digest = hashlib.sha256(f"{self.seed}:{norm_text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return (v / np.linalg.norm(v)).tobytes()

    def encode_raw(self, text: str) -> np.ndarray:
        return np.frombuffer(self._encode(normalize_text(text)), dtype=np.float64).copy()


class TableTextEncoder:
    """Looks prompts up in a table of precomputed embeddings (exact prompt string keys)."""

    def __init__(self, table: dict[str, np.ndarray]):
        if not table:
            raise ContractError("embedding table is empty")
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise ContractError(f"embedding table has mixed dimensions {sorted(dims)}")
        self.dim = dims.pop()
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    @classmethod
    def load(cls, path) -> "TableTextEncoder":
        return cls(json.loads(Path(path).read_text()))

    def encode_raw(self, text: str) -> np.ndarray:
        try:
            v = self.table[text]
        except KeyError:
            raise KeyError(f"prompt not in embedding table: {text!r}") from None
        norm = np.linalg.norm(v)
        if norm == 0:
            raise ContractError(f"zero embedding for prompt {text!r}")
        return v / norm


def encode_text(prompt: PromptSpec | str, encoder: TextEncoder | None = None) -> TextEmbedding:
    encoder = encoder if encoder is not None else default_encoder()
    text = prompt.text() if isinstance(prompt, PromptSpec) else prompt
    return TextEmbedding(Tensor(encoder.encode_raw(text)), prompt_hash(text))


def encode_tokens(prompt: PromptSpec, encoder: TextEncoder | None = None) -> Tensor:
    """``T x E`` matrix of per-class token embeddings."""
    encoder = encoder if encoder is not None else default_encoder()
    return Tensor(np.stack([encoder.encode_raw(t) for t in prompt.token_texts()]))


@lru_cache(maxsize=None)
def default_encoder(dim: int = DEFAULT_EMBED_DIM, seed: int = 0) -> StubTextEncoder:
    return StubTextEncoder(dim, seed)


class LoRAAdapter(Module):
    """Frozen projection plus a trainable low-rank correction.

    ``y = W x + (alpha / r) * B (A x)``; ``B`` starts at zero so the adapter
    initially reproduces the frozen map.
    """

    def __init__(self, in_dim: int, out_dim: int, rank: int = 4, alpha: float = 4.0,
                 rng: np.random.Generator | None = None, base: np.ndarray | None = None):
        if not 1 <= rank <= min(in_dim, out_dim):
            raise ShapeError(f"rank {rank} must lie in [1, min({in_dim}, {out_dim})]")
        rng = rng if rng is not None else np.random.default_rng(0)
        if base is None:
            base = np.eye(out_dim, in_dim) if in_dim == out_dim else (
                rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim))
        base = np.asarray(base, dtype=np.float64)
        if base.shape != (out_dim, in_dim):
            raise ShapeError(f"base weight {base.shape} vs ({out_dim}, {in_dim})")
        self.rank = rank
        self.scale = alpha / rank
        self.weight = Tensor(base)  # frozen: never joins the tape
        self.A = Tensor(rng.standard_normal((rank, in_dim)) / np.sqrt(in_dim), requires_grad=True)
        self.B = Tensor(np.zeros((out_dim, rank)), requires_grad=True)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"LoRA input dim {x.shape[-1]} vs {self.in_dim}")
        if x.ndim == 1:
            return matmul(self.weight, x) + matmul(self.B, matmul(self.A, x)) * self.scale
        base = matmul(x, transpose(self.weight))
        low = matmul(matmul(x, transpose(self.A)), transpose(self.B))
        return base + low * self.scale


def lora_project(x, adapter: LoRAAdapter) -> Tensor:
    return adapter(x)


class GateHead(Module):
    """Per-voxel relevance weight: linear map of voxel features followed by a sigmoid."""

    def __init__(self, channels: int, per_channel: bool = False,
                 rng: np.random.Generator | None = None):
        self.per_channel = per_channel
        self.linear = Linear(channels, channels if per_channel else 1, rng=rng)

    def forward(self, voxels: Tensor) -> Tensor:
        """``N x C`` voxel rows -> ``N x 1`` (or ``N x C``) gates in (0, 1)."""
        return sigmoid(self.linear(voxels))


@dataclass
class AttentionOutput:
    grid: VoxelGrid
    attention: Tensor
    gate: Tensor
    extras: dict = field(default_factory=dict)


class GatedCrossAttention(Module):
    """Voxel queries attend over text tokens; a sigmoid gate limits what is added back."""

    def __init__(self, channels: int, embed_dim: int, key_dim: int = 16,
                 lora: LoRAAdapter | None = None, per_channel_gate: bool = False,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.embed_dim = embed_dim
        self.key_dim = key_dim
        self.q_proj = Linear(channels, key_dim, rng=rng)
        self.k_proj = Linear(embed_dim, key_dim, rng=rng)
        self.v_proj = Linear(embed_dim, channels, rng=rng)
        self.gate = GateHead(channels, per_channel=per_channel_gate, rng=rng)
        self.lora = lora

    def attend(self, grid: VoxelGrid, text_keys, text_vals) -> AttentionOutput:
        text_keys, text_vals = as_tensor(text_keys), as_tensor(text_vals)
        if text_keys.ndim != 2 or text_keys.shape[0] == 0:
            raise ShapeError("need at least one text token (T x E keys)")
        if text_keys.shape != text_vals.shape:
            raise ShapeError(f"keys {text_keys.shape} vs values {text_vals.shape}")
        if text_keys.shape[1] != self.embed_dim:
            raise ShapeError(f"token dim {text_keys.shape[1]} vs {self.embed_dim}")
        if grid.channels != self.channels:
            raise ShapeError(f"grid has {grid.channels} channels, attention expects {self.channels}")
        if self.lora is not None:
            text_keys, text_vals = self.lora(text_keys), self.lora(text_vals)

        c = self.channels
        voxels = transpose(reshape(grid.features, (c, -1)))  # N x C
        q = self.q_proj(voxels)
        k = self.k_proj(text_keys)
        v = self.v_proj(text_vals)
        attn = softmax(matmul(q, transpose(k)) * (1.0 / np.sqrt(self.key_dim)), axis=1)
        gate = self.gate(voxels)
        fused = matmul(attn, v) * gate + voxels
        features = reshape(transpose(fused), grid.features.shape)
        return AttentionOutput(VoxelGrid(grid.spec, features), attn, gate)

    def forward(self, grid: VoxelGrid, text_keys, text_vals) -> VoxelGrid:
        return self.attend(grid, text_keys, text_vals).grid


def gated_cross_attention(V: VoxelGrid, text_keys, text_vals,
                          module: GatedCrossAttention) -> VoxelGrid:
    return module(V, text_keys, text_vals)
