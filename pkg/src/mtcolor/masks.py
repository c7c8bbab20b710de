"""Binary instance masks and the attention-mask constructions built from them.

Pixel index convention used everywhere: masks are row-major ``(h, w)`` grids
and a pixel at column x, row y flattens to ``i = y * w + x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BACKGROUND_SELF_ONLY = "self_only"
BACKGROUND_REGION = "background_region"
BACKGROUND_ALL_ONES = "all_ones"
OVERLAP_UNION = "union"
OVERLAP_FIRST_MATCH = "first_match"

_BACKGROUNDS = (BACKGROUND_SELF_ONLY, BACKGROUND_REGION, BACKGROUND_ALL_ONES)
_OVERLAPS = (OVERLAP_UNION, OVERLAP_FIRST_MATCH)


class CorruptMaskError(ValueError):
    """Run-length data does not describe a well-formed mask."""


def flatten_index(x: int, y: int, w: int) -> int:
    return y * w + x


def unflatten_index(i: int, w: int) -> tuple[int, int]:
    return i % w, i // w


@dataclass(frozen=True)
class InstanceMask:
    """One instance's binary pixel mask, shape (h, w), values in {0, 1}."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        bits = bits.astype(np.uint8)
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return self.area == 0

    def flat(self) -> np.ndarray:
        """Row-major flattened view, length h*w."""
        return self.bits.reshape(-1)

    def bbox(self) -> tuple[int, int, int, int]:
        """Tight bounding box (x, y, w, h); raises on an empty mask."""
        ys, xs = np.nonzero(self.bits)
        if ys.size == 0:
            raise ValueError("empty mask has no bounding box")
        x0, x1 = int(xs.min()), int(xs.max())
        y0, y1 = int(ys.min()), int(ys.max())
        return x0, y0, x1 - x0 + 1, y1 - y0 + 1


@dataclass(frozen=True)
class MaskSet:
    """Ordered instance masks over a shared grid; order is instance identity."""

    width: int
    height: int
    masks: tuple[InstanceMask, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("mask grid dimensions must be positive")
        object.__setattr__(self, "masks", tuple(self.masks))
        for k, m in enumerate(self.masks):
            if m.height != self.height or m.width != self.width:
                raise ValueError(
                    f"mask {k} is {m.height}x{m.width}, set is {self.height}x{self.width}"
                )

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def stacked(self) -> np.ndarray:
        """(n, h*w) uint8 matrix of flattened masks (n may be 0)."""
        if not self.masks:
            return np.zeros((0, self.height * self.width), dtype=np.uint8)
        return np.stack([m.flat() for m in self.masks])

    @staticmethod
    def from_arrays(arrays, width: int | None = None, height: int | None = None) -> "MaskSet":
        masks = tuple(InstanceMask(np.asarray(a)) for a in arrays)
        if masks:
            return MaskSet(masks[0].width, masks[0].height, masks)
        if width is None or height is None:
            raise ValueError("empty MaskSet needs explicit width and height")
        return MaskSet(width, height, masks)


@dataclass(frozen=True)
class MaskPolicy:
    """How attention-mask builders treat uncovered pixels and overlapping masks.

    background: attention support for pixels in no instance mask --
        "self_only" (just themselves), "background_region" (the complement
        region acts as an implicit instance; default), or "all_ones".
    overlap: per-query mask for pixels in several instances -- "union" of all
        containing masks (default) or "first_match" (lowest index wins).
    """

    background: str = BACKGROUND_REGION
    overlap: str = OVERLAP_UNION

    def __post_init__(self):
        if self.background not in _BACKGROUNDS:
            raise ValueError(f"background must be one of {_BACKGROUNDS}")
        if self.overlap not in _OVERLAPS:
            raise ValueError(f"overlap must be one of {_OVERLAPS}")


def resize_mask(m: InstanceMask, h: int, w: int) -> InstanceMask:
    """Nearest-neighbor resize sampling at pixel centers; stays binary."""
    if h < 1 or w < 1:
        raise ValueError("target dimensions must be positive")
    if (h, w) == (m.height, m.width):
        return m
    src_y = np.minimum((np.arange(h) + 0.5) * m.height / h, m.height - 1).astype(np.int64)
    src_x = np.minimum((np.arange(w) + 0.5) * m.width / w, m.width - 1).astype(np.int64)
    return InstanceMask(m.bits[np.ix_(src_y, src_x)])


def resize_mask_set(m: MaskSet, h: int, w: int) -> MaskSet:
    if h < 1 or w < 1:
        raise ValueError("target dimensions must be positive")
    return MaskSet(w, h, tuple(resize_mask(mk, h, w) for mk in m.masks))


def build_pixel_attention_mask(m: MaskSet, policy: MaskPolicy = MaskPolicy()) -> np.ndarray:
    """Global cross-attention mask: (h*w, h*w) uint8.

    Entry (i, j) is 1 iff key pixel j lies in query pixel i's mask, where
    i's mask is the union (or first match) of the instance masks containing
    i; uncovered pixels get support per ``policy.background``.
    """
    p = m.height * m.width
    stacked = m.stacked().astype(bool)          # (n, p)
    covered = stacked.any(axis=0)               # (p,)
    out = np.zeros((p, p), dtype=bool)
    if len(m) > 0:
        if policy.overlap == OVERLAP_UNION:
            # row i = OR of masks containing i; matmul form of the set union
            out = (stacked.T.astype(np.int64) @ stacked.astype(np.int64)) > 0
        else:
            first = np.argmax(stacked, axis=0)  # first covering index per pixel
            out[covered] = stacked[first[covered]]
    bg = ~covered
    if bg.any():
        if policy.background == BACKGROUND_REGION:
            out[bg] = bg
        elif policy.background == BACKGROUND_SELF_ONLY:
            out[np.nonzero(bg)[0], np.nonzero(bg)[0]] = True
        else:
            out[bg] = True
    return out.astype(np.uint8)


def build_self_mask(m: MaskSet, policy: MaskPolicy = MaskPolicy()) -> np.ndarray:
    """Latent-latent self-attention mask: (h*w, h*w) uint8, symmetric.

    Entry (i, j) is 1 iff some instance mask contains both pixels; the
    background policy extends the relation symmetrically for uncovered pixels.
    """
    p = m.height * m.width
    stacked = m.stacked().astype(np.int64)
    covered = stacked.any(axis=0) if len(m) else np.zeros(p, dtype=bool)
    out = (stacked.T @ stacked) > 0 if len(m) else np.zeros((p, p), dtype=bool)
    bg = ~covered
    if bg.any():
        if policy.background == BACKGROUND_REGION:
            out |= np.outer(bg, bg)
        elif policy.background == BACKGROUND_SELF_ONLY:
            idx = np.nonzero(bg)[0]
            out[idx, idx] = True
        else:
            out[bg, :] = True
            out[:, bg] = True
    return out.astype(np.uint8)


def build_latent_instance_mask(m: MaskSet) -> np.ndarray:
    """Latent-to-instance-token mask: (h*w, n) uint8; column j is mask j."""
    return m.stacked().T.copy()


def assemble_self_map_mask(self_mask: np.ndarray, cross_mask: np.ndarray, n: int) -> np.ndarray:
    """Full (l_x+n, l_x+n) self-attention-map mask.

    Blocks: [[self, cross], [cross.T, I_n]]. The bottom rows gate instance
    tokens, whose outputs are discarded downstream; transpose symmetry plus
    an identity keeps the matrix symmetric and the token rows softmax-safe.
    """
    self_mask = np.asarray(self_mask, dtype=np.uint8)
    cross_mask = np.asarray(cross_mask, dtype=np.uint8)
    lx = self_mask.shape[0]
    if self_mask.shape != (lx, lx):
        raise ValueError(f"self mask must be square, got {self_mask.shape}")
    if cross_mask.shape != (lx, n):
        raise ValueError(f"cross mask must be ({lx}, {n}), got {cross_mask.shape}")
    out = np.zeros((lx + n, lx + n), dtype=np.uint8)
    out[:lx, :lx] = self_mask
    out[:lx, lx:] = cross_mask
    out[lx:, :lx] = cross_mask.T
    out[lx:, lx:] = np.eye(n, dtype=np.uint8)
    return out


def background_mask(m: MaskSet) -> InstanceMask:
    """m_g: element-wise NOT of the OR of all masks (all-ones when n = 0)."""
    union = np.zeros((m.height, m.width), dtype=np.uint8)
    for mk in m.masks:
        union |= mk.bits
    return InstanceMask(1 - union)


def rle_encode(m: InstanceMask) -> list[int]:
    """Row-major run lengths, zero-run first (COCO-style uncompressed RLE)."""
    flat = m.flat()
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    lengths = np.diff(np.concatenate(([0], boundaries, [flat.size]))).tolist()
    if flat[0] == 1:
        lengths.insert(0, 0)
    return [int(r) for r in lengths]


def rle_decode(runs, h: int, w: int) -> InstanceMask:
    runs = np.asarray(list(runs), dtype=np.int64)
    if runs.size and runs.min() < 0:
        raise CorruptMaskError("negative run length")
    total = int(runs.sum()) if runs.size else 0
    if total != h * w:
        raise CorruptMaskError(f"run sum {total} != {h}*{w}")
    values = np.arange(runs.size, dtype=np.uint8) % 2
    return InstanceMask(np.repeat(values, runs).reshape(h, w))
