"""Instance mask + text guidance: encode per-instance masks and texts into a
fused feature set, then let latent pixels exchange information with their own
instance's token through masked self-attention.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .attention import MaskMode, ProjectionParams, masked_self_attention
from .masks import (
    MaskPolicy,
    MaskSet,
    assemble_self_map_mask,
    build_latent_instance_mask,
    build_self_mask,
    resize_mask_set,
)

DEFAULT_MAX_TOKENS = 8
MASK_ENCODER_RESOLUTION = 32
MASK_FEATURE_DIM = 32
TOY_TEXT_DIM = 64
OOV_BUCKETS = 64

# color + shape vocabulary of the synthetic corpus; everything else hashes
# into OOV buckets
TOY_VOCABULARY = (
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "brown",
    "circle", "square", "triangle",
)

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class TextEncodeError(RuntimeError):
    """An encoder failed for a specific instance."""


@dataclass(frozen=True)
class InstanceText:
    """Normalized instance text: lowercased, punctuation-stripped tokens."""

    raw: str
    tokens: tuple[str, ...] = field(init=False)
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        tokens = [t.translate(_PUNCT_TABLE) for t in self.raw.lower().split()]
        tokens = tuple(t for t in tokens if t)[: self.max_tokens]
        object.__setattr__(self, "tokens", tokens)

    def is_empty(self) -> bool:
        return len(self.tokens) == 0

    def key(self) -> str:
        """Stable hash of the normalized form, used by sidecar embeddings."""
        return hashlib.sha256(" ".join(self.tokens).encode()).hexdigest()[:16]


def as_instance_text(text) -> InstanceText:
    return text if isinstance(text, InstanceText) else InstanceText(str(text))


def _bucket(token: str, seed: int) -> int:
    digest = hashlib.blake2b(token.encode(), key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest[:8], "little") % OOV_BUCKETS


class ToyTextEncoder(nn.Module):
    """Trainable bag-of-words encoder over the synthetic color/shape words.

    In-vocabulary tokens index dedicated embedding rows; anything else lands
    in one of 64 seeded-hash buckets. An empty text embeds to the zero
    vector (the null-token convention).
    """

    name = "toy"

    def __init__(self, dim: int = TOY_TEXT_DIM, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.seed = seed
        self.vocab = {w: i for i, w in enumerate(TOY_VOCABULARY)}
        self.table = nn.Embedding(len(TOY_VOCABULARY) + OOV_BUCKETS, dim)
        nn.init.normal_(self.table.weight, std=0.2)

    def token_index(self, token: str) -> int:
        if token in self.vocab:
            return self.vocab[token]
        return len(self.vocab) + _bucket(token, self.seed)

    def embed(self, text) -> Tensor:
        text = as_instance_text(text)
        w = self.table.weight
        if text.is_empty():
            return torch.zeros(self.dim, dtype=w.dtype, device=w.device)
        idx = torch.tensor([self.token_index(t) for t in text.tokens], device=w.device)
        return self.table(idx).sum(dim=0)

    def embed_many(self, texts) -> Tensor:
        """Batched bag-of-words sum via embedding_bag; empty texts give zero
        rows. Equivalent to stacking embed() over the list."""
        w = self.table.weight
        if not texts:
            return torch.zeros(0, self.dim, dtype=w.dtype, device=w.device)
        flat: list[int] = []
        offsets = []
        for text in texts:
            offsets.append(len(flat))
            flat.extend(self.token_index(t) for t in as_instance_text(text).tokens)
        if not flat:
            return torch.zeros(len(texts), self.dim, dtype=w.dtype, device=w.device)
        return nn.functional.embedding_bag(
            torch.tensor(flat, device=w.device),
            w, offsets=torch.tensor(offsets, device=w.device), mode="sum")


class ExternalTextEncoder(nn.Module):
    """Reads precomputed embeddings from a sidecar JSON file keyed by text
    hash, enabling offline use of any real encoder without linking one."""

    name = "external"

    def __init__(self, sidecar_path, dim: int | None = None):
        super().__init__()
        self.path = Path(sidecar_path)
        payload = json.loads(self.path.read_text())
        self.vectors = {k: torch.tensor(v, dtype=torch.float32) for k, v in payload.items()}
        if dim is None:
            if not self.vectors:
                raise ValueError("empty sidecar file and no explicit dim")
            dim = next(iter(self.vectors.values())).numel()
        self.dim = dim

    def embed(self, text) -> Tensor:
        text = as_instance_text(text)
        if text.is_empty():
            return torch.zeros(self.dim)
        key = text.key()
        if key not in self.vectors:
            raise TextEncodeError(f"no sidecar embedding for text {text.raw!r} (key {key})")
        return self.vectors[key]


def make_text_encoder(name: str, **kwargs):
    if name == "toy":
        return ToyTextEncoder(**kwargs)
    if name == "external":
        return ExternalTextEncoder(**kwargs)
    raise ValueError(f"unknown text encoder {name!r} (expected 'toy' or 'external')")


def encode_texts(texts, encoder) -> Tensor:
    """Stack encoder embeddings row-wise; failures carry the instance index."""
    rows = []
    for i, text in enumerate(texts):
        try:
            rows.append(encoder.embed(text))
        except Exception as exc:
            raise TextEncodeError(f"text encoder failed on instance {i}: {exc}") from exc
    if not rows:
        return torch.zeros(0, encoder.dim)
    return torch.stack(rows)


def encode_texts_batched(texts, encoder) -> Tensor:
    """encode_texts through the encoder's batched path when it has one."""
    if hasattr(encoder, "embed_many"):
        return encoder.embed_many(list(texts))
    return encode_texts(texts, encoder)


class MaskFeatureEncoder(nn.Module):
    """Three stride-2 convolutions (1->8->16->32) over 32x32 masks, global
    average pooled to a 32-d shape descriptor per instance."""

    def __init__(self, out_dim: int = MASK_FEATURE_DIM):
        super().__init__()
        self.out_dim = out_dim
        self.conv1 = nn.Conv2d(1, 8, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(16, out_dim, 3, stride=2, padding=1)
        self.act = nn.GELU()

    def forward(self, masks: Tensor) -> Tensor:
        # masks: (n, 1, 32, 32) float
        h = self.act(self.conv1(masks))
        h = self.act(self.conv2(h))
        h = self.conv3(h)
        return h.mean(dim=(2, 3))


def encode_masks(m: MaskSet, encoder: MaskFeatureEncoder, dtype=torch.float32) -> Tensor:
    """Encode each mask independently; (n, 32) for any n (empty for n = 0)."""
    if len(m) == 0:
        return torch.zeros(0, encoder.out_dim, dtype=dtype)
    resized = resize_mask_set(m, MASK_ENCODER_RESOLUTION, MASK_ENCODER_RESOLUTION)
    batch = torch.tensor(np.stack([mk.bits for mk in resized]), dtype=dtype)
    return encoder(batch.unsqueeze(1))


class FeatureFusion(nn.Module):
    """Per-instance concat(text, mask) through three fully connected layers
    (GELU, GELU, identity) to channel width c."""

    def __init__(self, d_text: int, d_mask: int, out_dim: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(d_text + d_mask, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, out_dim)
        self.act = nn.GELU()

    def forward(self, text_emb: Tensor, mask_emb: Tensor) -> Tensor:
        if text_emb.shape[0] != mask_emb.shape[0]:
            raise ValueError(
                f"row mismatch: {text_emb.shape[0]} texts vs {mask_emb.shape[0]} masks")
        joined = torch.cat([text_emb, mask_emb], dim=1)
        return self.fc3(self.act(self.fc2(self.act(self.fc1(joined)))))


class InstanceGuidanceBlock(nn.Module):
    """The full guidance branch: instance feature set + masked self-attention,
    added residually to the latent. The output projection starts at zero so an
    untrained branch leaves the backbone untouched."""

    def __init__(self, channels: int, d_text: int = TOY_TEXT_DIM,
                 d_mask: int = MASK_FEATURE_DIM, proj_dim: int | None = None):
        super().__init__()
        self.channels = channels
        proj_dim = channels if proj_dim is None else proj_dim
        self.mask_encoder = MaskFeatureEncoder(d_mask)
        self.fusion = FeatureFusion(d_text, d_mask, channels)
        self.w_q = nn.Parameter(torch.empty(channels, proj_dim))
        self.w_k = nn.Parameter(torch.empty(channels, proj_dim))
        self.w_v = nn.Parameter(torch.empty(channels, proj_dim))
        self.w_o = nn.Parameter(torch.zeros(proj_dim, channels))
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.normal_(w, std=channels ** -0.5)

    def projection_params(self) -> ProjectionParams:
        return ProjectionParams(self.w_q, self.w_k, self.w_v, self.w_o)

    def instance_features(self, m: MaskSet, texts, encoder) -> Tensor:
        dtype = self.w_q.dtype
        text_emb = encode_texts([as_instance_text(t) for t in texts], encoder).to(dtype)
        mask_emb = encode_masks(m, self.mask_encoder, dtype=dtype)
        return self.fusion(text_emb, mask_emb)

    def attention_masks(self, m: MaskSet, h: int, w: int, policy: MaskPolicy) -> np.ndarray:
        resized = resize_mask_set(m, h, w)
        self_mask = build_self_mask(resized, policy)
        cross_mask = build_latent_instance_mask(resized)
        return assemble_self_map_mask(self_mask, cross_mask, len(m))

    def forward(self, latent: Tensor, m: MaskSet, texts, encoder,
                policy: MaskPolicy = MaskPolicy(),
                mode: MaskMode = MaskMode.POST_SOFTMAX,
                mask_override: Tensor | None = None) -> Tensor:
        """latent: (h, w, c). Returns latent + guidance output (same shape)."""
        h, w, c = latent.shape
        if len(texts) != len(m):
            raise ValueError(f"{len(texts)} texts for {len(m)} masks")
        gamma = self.instance_features(m, texts, encoder)
        if mask_override is not None:
            full_mask = mask_override
        else:
            full_mask = torch.as_tensor(self.attention_masks(m, h, w, policy),
                                        dtype=latent.dtype)
        out = masked_self_attention(latent, gamma, full_mask,
                                    self.projection_params(), mode)
        return latent + out
