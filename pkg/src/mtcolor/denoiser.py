"""Noise-prediction U-Net whose attention blocks apply the instance guidance
branch and pixel-level masked cross-attention against grayscale features, plus
the conditioning bundle, condition encoder, and checkpoint container.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .attention import MaskMode, ProjectionParams, attend_rows
from .guidance import (
    InstanceGuidanceBlock,
    InstanceText,
    ToyTextEncoder,
    as_instance_text,
)
from .masks import (
    MaskPolicy,
    MaskSet,
    assemble_self_map_mask,
    build_latent_instance_mask,
    build_pixel_attention_mask,
    build_self_mask,
    resize_mask_set,
)

VARIANTS = ("full", "no_mask", "no_instance")

CHECKPOINT_MAGIC = b"MTCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {"<f4": torch.float32, "<f8": torch.float64}


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: int = 1
    time_dim: int = 128
    attn_levels: tuple[int, ...] = (1, 2)
    heads: int = 1
    mask_mode: str = MaskMode.POST_SOFTMAX.value
    background: str = "background_region"
    overlap: str = "union"
    d_text: int = 64
    text_encoder: str = "toy"

    def __post_init__(self):
        levels = len(self.channel_mults)
        if self.image_size % (2 ** (levels - 1)) != 0:
            raise ValueError("image_size must be divisible by 2^(levels-1)")
        if any(l < 0 or l >= levels for l in self.attn_levels):
            raise ValueError("attn_levels out of range")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        MaskMode(self.mask_mode)
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        object.__setattr__(self, "attn_levels", tuple(self.attn_levels))

    def policy(self) -> MaskPolicy:
        return MaskPolicy(background=self.background, overlap=self.overlap)

    def mode(self) -> MaskMode:
        return MaskMode(self.mask_mode)


@dataclass
class ConditioningBundle:
    """Everything predict_noise conditions on besides the noisy image."""

    gray: Tensor                       # (H, W) luminance in [0, 1]
    global_text: InstanceText
    masks: MaskSet
    texts: list[InstanceText]
    null_masks: bool = False
    null_texts: bool = False
    null_global_text: bool = False
    _mask_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.gray = torch.as_tensor(self.gray)
        self.global_text = as_instance_text(self.global_text)
        self.texts = [as_instance_text(t) for t in self.texts]
        if len(self.texts) != len(self.masks):
            raise ValueError(f"{len(self.texts)} texts for {len(self.masks)} masks")
        h, w = self.gray.shape
        if len(self.masks) and (self.masks.height, self.masks.width) != (h, w):
            raise ValueError("mask set resolution must match the gray image")

    def n_instances(self) -> int:
        return 0 if (self.null_masks and self.null_texts) else len(self.masks)

    def effective_instances(self) -> tuple[MaskSet, list[InstanceText]]:
        h, w = self.gray.shape
        if self.null_masks and self.null_texts:
            return MaskSet(w, h, ()), []
        texts = [InstanceText("") for _ in self.texts] if self.null_texts else self.texts
        return self.masks, texts

    def nullified(self) -> "ConditioningBundle":
        """Null-condition twin: gray is kept, every other condition dropped."""
        h, w = self.gray.shape
        return ConditioningBundle(gray=self.gray, global_text=InstanceText(""),
                                  masks=MaskSet(w, h, ()), texts=[],
                                  null_masks=True, null_texts=True,
                                  null_global_text=True)

    def cross_mask(self, h: int, w: int, policy: MaskPolicy, all_ones: bool) -> np.ndarray:
        key = ("cross", h, w, policy, all_ones)
        if key not in self._mask_cache:
            if all_ones or self.null_masks or len(self.masks) == 0:
                out = np.ones((h * w, h * w), dtype=np.uint8)
            else:
                out = build_pixel_attention_mask(resize_mask_set(self.masks, h, w), policy)
            self._mask_cache[key] = out
        return self._mask_cache[key]

    def guidance_mask(self, h: int, w: int, policy: MaskPolicy, all_ones: bool) -> np.ndarray:
        ms, _ = self.effective_instances()
        key = ("self_map", h, w, policy, all_ones)
        if key not in self._mask_cache:
            if all_ones or self.null_masks:
                out = np.ones((h * w + len(ms), h * w + len(ms)), dtype=np.uint8)
            else:
                resized = resize_mask_set(ms, h, w)
                out = assemble_self_map_mask(build_self_mask(resized, policy),
                                             build_latent_instance_mask(resized), len(ms))
            self._mask_cache[key] = out
        return self._mask_cache[key]

    def encoder_mask_input(self, resolution: int, dtype) -> Tensor:
        """Effective masks resized for the mask feature encoder, (n, 1, r, r)."""
        key = ("encoder_input", resolution, str(dtype), self.null_masks and self.null_texts)
        if key not in self._mask_cache:
            ms, _ = self.effective_instances()
            if len(ms) == 0:
                arr = np.zeros((0, 1, resolution, resolution), dtype=np.float32)
            else:
                resized = resize_mask_set(ms, resolution, resolution)
                arr = np.stack([mk.bits for mk in resized])[:, None].astype(np.float32)
            self._mask_cache[key] = torch.tensor(arr, dtype=dtype)
        return self._mask_cache[key]


def drop_conditions(bundle: ConditioningBundle, p: float, generator: torch.Generator
                    ) -> ConditioningBundle:
    """One Bernoulli draw per sample: with probability p, every condition
    except the gray image is replaced by its null."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must be in [0, 1]")
    if p > 0 and torch.rand((), generator=generator).item() < p:
        return bundle.nullified()
    return bundle


def timestep_embedding(t, dim: int) -> Tensor:
    """Sinusoidal features; t may be a scalar or a batch of step indices."""
    t = torch.as_tensor(t, dtype=torch.float64)
    scalar = t.ndim == 0
    if scalar:
        t = t[None]
    if (t < 0).any():
        raise ValueError("timestep must be >= 0")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64)
                      / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(emb.shape[0], 1, dtype=emb.dtype)], dim=1)
    return emb[0] if scalar else emb


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        groups = math.gcd(8, c_in)
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(math.gcd(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.temb_proj(self.act(temb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


class CrossPixelAttention(nn.Module):
    """Masked cross-attention of latent pixels against condition features.

    Multi-head runs as a sum over column-sliced projections, which equals the
    usual concat-then-project formulation exactly.
    """

    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        if channels % heads != 0:
            raise ValueError("channels must divide evenly into heads")
        self.heads = heads
        self.w_q = nn.Parameter(torch.empty(channels, channels))
        self.w_k = nn.Parameter(torch.empty(channels, channels))
        self.w_v = nn.Parameter(torch.empty(channels, channels))
        self.w_o = nn.Parameter(torch.empty(channels, channels))
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            nn.init.normal_(w, std=channels ** -0.5)

    def attend(self, x_rows: Tensor, y_rows: Tensor, mask, mode: MaskMode) -> Tensor:
        if self.heads == 1:
            params = ProjectionParams(self.w_q, self.w_k, self.w_v, self.w_o)
            return attend_rows(x_rows, y_rows, mask, params, mode)
        dh = self.w_q.shape[1] // self.heads
        out = None
        for h in range(self.heads):
            cols = slice(h * dh, (h + 1) * dh)
            params = ProjectionParams(self.w_q[:, cols], self.w_k[:, cols],
                                      self.w_v[:, cols], self.w_o[cols, :])
            piece = attend_rows(x_rows, y_rows, mask, params, mode)
            out = piece if out is None else out + piece
        return out

    def forward(self, latent: Tensor, f_y: Tensor, mask, mode: MaskMode) -> Tensor:
        h, w, c = latent.shape
        rows = self.attend(latent.reshape(h * w, c), f_y.reshape(h * w, c),
                           torch.as_tensor(mask, dtype=latent.dtype), mode)
        return rows.reshape(h, w, c)


class MaskedAttentionPair(nn.Module):
    """One attention-bearing site: instance guidance branch followed by
    pixel-level masked cross-attention, each residual."""

    def __init__(self, channels: int, d_text: int, heads: int = 1):
        super().__init__()
        self.norm_guidance = nn.GroupNorm(math.gcd(8, channels), channels)
        self.norm_cross = nn.GroupNorm(math.gcd(8, channels), channels)
        self.guidance = InstanceGuidanceBlock(channels, d_text=d_text)
        self.cross = CrossPixelAttention(channels, heads)

    def _grouped_instance_features(self, bundles, idx, text_encoder, dtype) -> Tensor:
        from .guidance import MASK_ENCODER_RESOLUTION, encode_texts_batched
        mask_in = torch.cat([bundles[i].encoder_mask_input(MASK_ENCODER_RESOLUTION, dtype)
                             for i in idx])
        mask_emb = self.guidance.mask_encoder(mask_in)
        texts = [t for i in idx for t in bundles[i].effective_instances()[1]]
        text_emb = encode_texts_batched(texts, text_encoder).to(dtype)
        gamma = self.guidance.fusion(text_emb, mask_emb)
        return gamma.reshape(len(idx), -1, gamma.shape[-1])

    def forward(self, x: Tensor, f_y: Tensor, bundles, text_encoder,
                policy: MaskPolicy, mode: MaskMode, variant: str,
                taps: list | None = None, tag: str = "") -> Tensor:
        b, c, h, w = x.shape
        all_ones = variant == "no_mask"
        if variant != "no_instance":
            rows = self.norm_guidance(x).permute(0, 2, 3, 1).reshape(b, h * w, c)
            by_n: dict[int, list[int]] = {}
            for i, bundle in enumerate(bundles):
                by_n.setdefault(bundle.n_instances(), []).append(i)
            contrib = torch.zeros_like(rows)
            params = self.guidance.projection_params()
            for n_i, idx in sorted(by_n.items()):
                masks = torch.tensor(
                    np.stack([bundles[i].guidance_mask(h, w, policy, all_ones)
                              for i in idx]), dtype=x.dtype)
                p = rows[idx]
                if n_i > 0:
                    gamma = self._grouped_instance_features(bundles, idx, text_encoder,
                                                            x.dtype)
                    p = torch.cat([p, gamma], dim=1)
                out = attend_rows(p, p, masks, params, mode)[:, : h * w]
                contrib = contrib.index_copy(0, torch.tensor(idx), out)
            g = contrib.reshape(b, h, w, c).permute(0, 3, 1, 2)
            if taps is not None:
                taps.append((tag, "guidance", g.detach().clone()))
            x = x + g
        rows = self.norm_cross(x).permute(0, 2, 3, 1).reshape(b, h * w, c)
        f_rows = f_y.permute(0, 2, 3, 1).reshape(b, h * w, c)
        masks = torch.tensor(
            np.stack([bundle.cross_mask(h, w, policy, all_ones) for bundle in bundles]),
            dtype=x.dtype)
        out = self.cross.attend(rows, f_rows, masks, mode)
        cx = out.reshape(b, h, w, c).permute(0, 3, 1, 2)
        if taps is not None:
            taps.append((tag, "cross", cx.detach().clone()))
        return x + cx


class ConditionEncoder(nn.Module):
    """Grayscale feature pyramid with zero-initialized per-level heads, so a
    fresh model is exactly independent of the conditional image."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.levels = len(config.channel_mults)
        widths = [16 * (i + 1) for i in range(self.levels)]
        convs = []
        prev = 1
        for i, width in enumerate(widths):
            convs.append(nn.Conv2d(prev, width, 3, stride=1 if i == 0 else 2, padding=1))
            prev = width
        self.convs = nn.ModuleList(convs)
        self.heads = nn.ModuleDict()
        for lvl in config.attn_levels:
            out_c = config.base_channels * config.channel_mults[lvl]
            head = nn.Conv2d(widths[lvl], out_c, 1)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.heads[str(lvl)] = head
        self.act = nn.SiLU()

    def features(self, gray: Tensor) -> list[Tensor]:
        """Pre-head pyramid features, one per level."""
        if gray.ndim != 4 or gray.shape[1] != 1:
            raise ValueError("gray must be (B, 1, H, W)")
        if (gray < 0).any() or (gray > 1).any():
            raise ValueError("gray values must lie in [0, 1]")
        feats = []
        h = gray
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = self.act(h)
            feats.append(h)
        return feats

    def forward(self, gray: Tensor) -> dict[int, Tensor]:
        feats = self.features(gray)
        return {int(lvl): head(feats[int(lvl)]) for lvl, head in self.heads.items()}


class Denoiser(nn.Module):
    """eps_theta(z_t, t, global text, gray, masks, instance texts)."""

    def __init__(self, config: DenoiserConfig, text_encoder=None):
        super().__init__()
        self.config = config
        cfg = config
        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        levels = len(chans)

        if text_encoder is not None:
            if getattr(text_encoder, "dim", None) != cfg.d_text:
                raise ValueError(f"encoder dim {getattr(text_encoder, 'dim', None)} "
                                 f"!= config d_text {cfg.d_text}")
            self.text_encoder = text_encoder
        elif cfg.text_encoder == "toy":
            self.text_encoder = ToyTextEncoder(dim=cfg.d_text)
        else:
            raise ValueError(f"text encoder {cfg.text_encoder!r} must be passed "
                             "as an instance (only 'toy' is constructible here)")
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim))
        self.global_text_proj = nn.Linear(cfg.d_text, cfg.time_dim, bias=False)
        nn.init.zeros_(self.global_text_proj.weight)

        self.condition_encoder = ConditionEncoder(cfg)

        self.stem = nn.Conv2d(3, chans[0], 3, padding=1)
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsamples = nn.ModuleList()
        skip_chans = [chans[0]]
        ch = chans[0]
        self._down_plan = []
        for lvl in range(levels):
            for _ in range(cfg.num_res_blocks):
                self.down_res.append(ResBlock(ch, chans[lvl], cfg.time_dim))
                ch = chans[lvl]
                skip_chans.append(ch)
                self._down_plan.append(lvl)
            if lvl in cfg.attn_levels:
                self.down_attn[str(lvl)] = MaskedAttentionPair(ch, cfg.d_text, cfg.heads)
            if lvl < levels - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_chans.append(ch)

        self.mid_res1 = ResBlock(ch, ch, cfg.time_dim)
        self.mid_attn = MaskedAttentionPair(ch, cfg.d_text, cfg.heads)
        self.mid_res2 = ResBlock(ch, ch, cfg.time_dim)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.upsamples = nn.ModuleList()
        self._up_plan = []
        for lvl in reversed(range(levels)):
            for _ in range(cfg.num_res_blocks + 1):
                self.up_res.append(ResBlock(ch + skip_chans.pop(), chans[lvl], cfg.time_dim))
                ch = chans[lvl]
                self._up_plan.append(lvl)
            if lvl in cfg.attn_levels:
                self.up_attn[str(lvl)] = MaskedAttentionPair(ch, cfg.d_text, cfg.heads)
            if lvl > 0:
                self.upsamples.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.out_norm = nn.GroupNorm(math.gcd(8, ch), ch)
        self.out_conv = nn.Conv2d(ch, 3, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        self.act = nn.SiLU()

    # -- conditioning -----------------------------------------------------

    def _temb(self, t: Tensor, bundles) -> Tensor:
        dtype = self.stem.weight.dtype
        emb = timestep_embedding(t, self.config.time_dim).to(dtype)
        if emb.ndim == 1:
            emb = emb[None]
        texts = []
        for bundle in bundles:
            if bundle.null_global_text or bundle.global_text.is_empty():
                texts.append(torch.zeros(self.config.d_text, dtype=dtype))
            else:
                texts.append(self.text_encoder.embed(bundle.global_text).to(dtype))
        return self.time_mlp(emb) + self.global_text_proj(torch.stack(texts))

    # -- forward ----------------------------------------------------------

    def forward(self, z: Tensor, t, bundles, variant: str = "full",
                taps: list | None = None) -> Tensor:
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if z.ndim != 4 or z.shape[1] != 3:
            raise ValueError("z must be (B, 3, H, W)")
        if len(bundles) != z.shape[0]:
            raise ValueError("one conditioning bundle per batch item required")
        cfg = self.config
        mode = cfg.mode()
        policy = cfg.policy()
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.repeat(z.shape[0])
        temb = self._temb(t, bundles)
        gray = torch.stack([b.gray.to(z.dtype) for b in bundles])[:, None]
        f_y = self.condition_encoder(gray)

        def attend(pair: MaskedAttentionPair, x: Tensor, lvl: int, tag: str) -> Tensor:
            return pair(x, f_y[lvl], bundles, self.text_encoder, policy, mode,
                        variant, taps, tag)

        x = self.stem(z)
        skips = [x]
        res_iter = iter(self.down_res)
        ds_iter = iter(self.downsamples)
        levels = len(cfg.channel_mults)
        for lvl in range(levels):
            for _ in range(cfg.num_res_blocks):
                x = next(res_iter)(x, temb)
                skips.append(x)
            if lvl in cfg.attn_levels:
                x = attend(self.down_attn[str(lvl)], x, lvl, f"down{lvl}")
                skips[-1] = x
            if lvl < levels - 1:
                x = next(ds_iter)(x)
                skips.append(x)

        x = self.mid_res1(x, temb)
        x = attend(self.mid_attn, x, levels - 1, "mid")
        x = self.mid_res2(x, temb)

        res_iter = iter(self.up_res)
        us_iter = iter(self.upsamples)
        for lvl in reversed(range(levels)):
            for _ in range(cfg.num_res_blocks + 1):
                x = next(res_iter)(torch.cat([x, skips.pop()], dim=1), temb)
            if lvl in cfg.attn_levels:
                x = attend(self.up_attn[str(lvl)], x, lvl, f"up{lvl}")
            if lvl > 0:
                x = next(us_iter)(nn.functional.interpolate(x, scale_factor=2,
                                                            mode="nearest"))
        return self.out_conv(self.act(self.out_norm(x)))

    def predict_noise(self, z_t: Tensor, t: int, bundle: ConditioningBundle,
                      variant: str = "full") -> Tensor:
        """Single-item convenience wrapper around forward."""
        return self.forward(z_t[None], torch.tensor([t]), [bundle], variant)[0]

    # -- parameter groups ---------------------------------------------------

    def parameter_groups(self) -> dict[str, list[str]]:
        """Names by training stage role: condition (stage 2), guidance
        (stage 1, frozen in stage 2), backbone (stage 1)."""
        groups: dict[str, list[str]] = {"condition": [], "guidance": [], "backbone": []}
        for name, _ in self.named_parameters():
            if (name.startswith("condition_encoder") or ".cross." in name
                    or ".norm_cross." in name):
                groups["condition"].append(name)
            elif (".guidance." in name or ".norm_guidance." in name
                    or name.startswith("text_encoder")):
                groups["guidance"].append(name)
            else:
                groups["backbone"].append(name)
        return groups

    def set_trainable_groups(self, groups) -> list[str]:
        wanted = set(groups)
        by_group = self.parameter_groups()
        unknown = wanted - set(by_group)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        trainable = {n for g in wanted for n in by_group[g]}
        enabled = []
        for name, param in self.named_parameters():
            flag = name in trainable
            param.requires_grad_(flag)
            if flag:
                enabled.append(name)
        return enabled


# -- checkpoint container ---------------------------------------------------

def _dtype_code(t: Tensor) -> str:
    if t.dtype == torch.float32:
        return "<f4"
    if t.dtype == torch.float64:
        return "<f8"
    raise CheckpointError(f"unsupported parameter dtype {t.dtype}")


def save_checkpoint(path, model: Denoiser, meta: dict | None = None) -> None:
    state = model.state_dict()
    entries = []
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        code = _dtype_code(tensor)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(np.ascontiguousarray(arr).astype(code).tobytes())
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "meta": meta or {},
        "params": entries,
    }).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for blob in blobs:
        buf.write(blob)
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, text_encoder=None) -> tuple[Denoiser, dict]:
    with open(str(path), "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    cfg_dict = dict(header["config"])
    cfg_dict["channel_mults"] = tuple(cfg_dict["channel_mults"])
    cfg_dict["attn_levels"] = tuple(cfg_dict["attn_levels"])
    config = DenoiserConfig(**cfg_dict)
    model = Denoiser(config, text_encoder=text_encoder)
    expected = model.state_dict()
    offset = 8 + hlen
    state = {}
    for entry in header["params"]:
        name, shape, code = entry["name"], tuple(entry["shape"]), entry["dtype"]
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype {code} for {name}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * int(code[-1])
        blob = raw[offset:offset + nbytes]
        if len(blob) != nbytes:
            raise CheckpointError(f"truncated blob for {name}")
        offset += nbytes
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name}")
        if tuple(expected[name].shape) != shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file {shape}, model {tuple(expected[name].shape)}")
        arr = np.frombuffer(blob, dtype=code).reshape(shape).copy()
        state[name] = torch.from_numpy(arr).to(expected[name].dtype)
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"missing parameters: {sorted(missing)[:3]}...")
    model.load_state_dict(state)
    return model, header["meta"]
