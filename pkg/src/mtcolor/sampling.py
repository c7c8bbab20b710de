"""Multi-instance sampling: per-instance denoising for the opening phase,
masked weighted fusion, then global denoising; plus the colorize pipeline."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .denoiser import ConditioningBundle, Denoiser
from .diffusion import NoiseSchedule, SamplerConfig, cfg_combine, ddim_step, ddim_timesteps, make_schedule
from .guidance import InstanceText, as_instance_text
from .masks import InstanceMask, MaskSet, background_mask

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class ColorizeRequest:
    gray: Tensor                       # (H, W) in [0, 1]
    global_text: str = ""
    instances: list = field(default_factory=list)   # (InstanceMask, text) pairs
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        self.gray = torch.as_tensor(self.gray, dtype=torch.get_default_dtype())
        if self.gray.ndim != 2:
            raise ValueError("gray must be a 2-D luminance grid")
        h, w = self.gray.shape
        for i, (mask, _) in enumerate(self.instances):
            if not isinstance(mask, InstanceMask):
                raise ValueError(f"instance {i}: mask must be an InstanceMask")
            if (mask.height, mask.width) != (h, w):
                raise ValueError(f"instance {i}: mask {mask.height}x{mask.width} "
                                 f"does not fit image {h}x{w}")
            if mask.is_empty():
                raise ValueError(f"instance {i}: mask is empty")

    @property
    def n(self) -> int:
        return len(self.instances)

    def mask_set(self) -> MaskSet:
        h, w = self.gray.shape
        return MaskSet(w, h, tuple(m for m, _ in self.instances))

    def texts(self) -> list[InstanceText]:
        return [as_instance_text(t) for _, t in self.instances]

    def global_bundle(self) -> ConditioningBundle:
        return ConditioningBundle(gray=self.gray, global_text=self.global_text,
                                  masks=self.mask_set(), texts=self.texts())

    def instance_bundle(self, i: int) -> ConditioningBundle:
        """Branch i conditions: its own text serves as the global text too."""
        h, w = self.gray.shape
        mask, text = self.instances[i]
        return ConditioningBundle(gray=self.gray, global_text=text,
                                  masks=MaskSet(w, h, (mask,)),
                                  texts=[as_instance_text(text)])


@dataclass
class InstancePhaseState:
    z_g: Tensor
    z_i: list[Tensor]
    t_star: int          # DDIM steps remaining after the phase


@dataclass
class ColorizeResult:
    rgb: np.ndarray            # (H, W, 3) uint8
    rgb_float: np.ndarray      # (H, W, 3) float in [0, 1]
    provenance: dict


def to_model_space(x: Tensor) -> Tensor:
    return x * 2.0 - 1.0


def from_model_space(z: Tensor) -> Tensor:
    return ((z + 1.0) / 2.0).clamp(0.0, 1.0)


def init_instance_noises(z_T: Tensor, n: int) -> list[Tensor]:
    """n independent copies of the shared initial noise."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return [z_T.clone() for _ in range(n)]


def _branch_generator(seed: int, branch: int) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + branch + 1) & 0x7FFFFFFF)


def _is_null_conditioning(bundle: ConditioningBundle) -> bool:
    return bundle.n_instances() == 0 and (
        bundle.null_global_text or bundle.global_text.is_empty())


def predict_with_guidance(model: Denoiser, z: Tensor, t: int,
                          bundle: ConditioningBundle, w: float,
                          variant: str = "full") -> Tensor:
    """Classifier-free guided prediction; collapses to one call when the
    conditioning is already null (cond and uncond branches coincide)."""
    eps_cond = model.predict_noise(z, t, bundle, variant)
    if w == 1.0 or _is_null_conditioning(bundle):
        return eps_cond
    eps_uncond = model.predict_noise(z, t, bundle.nullified(), variant)
    return cfg_combine(eps_cond, eps_uncond, w)


def _ddim_chain(model: Denoiser, z: Tensor, pairs, bundle: ConditioningBundle,
                sampler: SamplerConfig, schedule: NoiseSchedule,
                generator: torch.Generator | None) -> Tensor:
    for t, t_prev in pairs:
        eps = predict_with_guidance(model, z, t, bundle, sampler.guidance,
                                    sampler.variant)
        z = ddim_step(z, eps, t, t_prev, schedule, sampler.eta, generator)
    return z


def run_instance_phase(state: InstancePhaseState, model: Denoiser,
                       req: ColorizeRequest, schedule: NoiseSchedule,
                       parallel: bool = False) -> InstancePhaseState:
    """Denoise each instance branch and the global branch for the first
    round(alpha * S) DDIM steps. alpha = 0 leaves the state untouched."""
    sampler = req.sampler
    k = round(sampler.alpha * sampler.steps)
    if k == 0:
        return InstancePhaseState(state.z_g, state.z_i, t_star=sampler.steps)
    pairs = ddim_timesteps(schedule.T, sampler.steps)[:k]

    def run_branch(index: int) -> Tensor:
        gen = _branch_generator(sampler.seed, index) if sampler.eta != 0 else None
        if index == 0:
            return _ddim_chain(model, state.z_g, pairs, req.global_bundle(),
                               sampler, schedule, gen)
        return _ddim_chain(model, state.z_i[index - 1], pairs,
                           req.instance_bundle(index - 1), sampler, schedule, gen)

    indices = range(len(state.z_i) + 1)
    if parallel and len(state.z_i) > 0:
        with ThreadPoolExecutor(max_workers=min(4, len(state.z_i) + 1)) as pool:
            results = list(pool.map(run_branch, indices))
    else:
        results = [run_branch(i) for i in indices]
    return InstancePhaseState(z_g=results[0], z_i=results[1:],
                              t_star=sampler.steps - k)


def fuse(z_g: Tensor, z_list, m: MaskSet, beta: float, mode: str = "literal",
         overlap: str = "first_match") -> Tensor:
    """Weighted fusion of the global and per-instance noisy images.

    literal: beta * m_g o z_g + sum_i m_i o z_i.
    convex: background keeps z_g; instance regions blend beta of the global
    image with (1 - beta) of the instance image.
    Overlapping pixels go to the lowest-index instance under "first_match"
    (default; avoids double-counting), or sum under "sum" (the literal form).
    """
    z_list = list(z_list)
    if len(z_list) != len(m):
        raise ValueError(f"{len(z_list)} images for {len(m)} masks")
    for z in z_list:
        if z.shape != z_g.shape:
            raise ValueError("all images must share the global image's shape")
    if mode not in ("literal", "convex"):
        raise ValueError("mode must be 'literal' or 'convex'")
    if overlap not in ("first_match", "sum"):
        raise ValueError("overlap must be 'first_match' or 'sum'")

    bg = torch.tensor(background_mask(m).bits, dtype=z_g.dtype)
    taken = torch.zeros_like(bg)
    out = (beta * bg * z_g) if mode == "literal" else (bg * z_g)
    for mk, z_i in zip(m, z_list):
        mi = torch.tensor(mk.bits, dtype=z_g.dtype)
        if overlap == "first_match":
            mi = mi * (1.0 - taken)
            taken = torch.clamp(taken + mi, max=1.0)
        if mode == "literal":
            out = out + mi * z_i
        else:
            out = out + mi * (beta * z_g + (1.0 - beta) * z_i)
    return out


def run_global_phase(z_fused: Tensor, model: Denoiser, req: ColorizeRequest,
                     schedule: NoiseSchedule) -> Tensor:
    """Finish the remaining S - round(alpha*S) steps with full conditioning."""
    sampler = req.sampler
    k = round(sampler.alpha * sampler.steps) if req.n >= 1 else 0
    pairs = ddim_timesteps(schedule.T, sampler.steps)[k:]
    gen = _branch_generator(sampler.seed, 0) if sampler.eta != 0 else None
    return _ddim_chain(model, z_fused, pairs, req.global_bundle(), sampler,
                       schedule, gen)


def apply_luma_lock(rgb: np.ndarray, gray: np.ndarray) -> np.ndarray:
    """Replace the output's luminance with the input gray, shrinking chroma
    per pixel just enough to stay inside [0, 1]^3."""
    rgb = np.asarray(rgb, dtype=np.float64)
    gray = np.asarray(gray, dtype=np.float64)
    weights = np.array(LUMA_WEIGHTS)
    luma = rgb @ weights
    chroma = rgb - luma[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        room_up = np.where(chroma > 0, (1.0 - gray[..., None]) / chroma, np.inf)
        room_down = np.where(chroma < 0, gray[..., None] / (-chroma), np.inf)
    scale = np.minimum(np.minimum(room_up, room_down).min(axis=-1), 1.0)
    scale = np.maximum(scale, 0.0)
    return np.clip(gray[..., None] + scale[..., None] * chroma, 0.0, 1.0)


def _model_fingerprint(model: Denoiser) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(dataclasses.asdict(model.config), sort_keys=True).encode())
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()[:16]


def colorize(req: ColorizeRequest, model: Denoiser,
             schedule: NoiseSchedule | None = None,
             parallel_instances: bool = False) -> ColorizeResult:
    """Full pipeline: init -> instance phase -> fuse -> global phase -> image.

    With no instances the fusion barrier is skipped entirely (the literal
    fusion formula is only meaningful for n >= 1) and the chain is a single
    fully conditioned DDIM pass.
    """
    schedule = schedule or make_schedule()
    sampler = req.sampler
    if sampler.steps > schedule.T:
        raise ValueError("sampler steps cannot exceed schedule length")
    h, w = req.gray.shape
    generator = torch.Generator().manual_seed(sampler.seed)
    dtype = next(model.parameters()).dtype
    z_t = torch.randn(3, h, w, generator=generator, dtype=dtype)

    k = round(sampler.alpha * sampler.steps) if req.n >= 1 else 0
    with torch.no_grad():
        if k > 0:
            state = InstancePhaseState(z_g=z_t, z_i=init_instance_noises(z_t, req.n),
                                       t_star=sampler.steps)
            state = run_instance_phase(state, model, req, schedule,
                                       parallel=parallel_instances)
            z_t = fuse(state.z_g, state.z_i, req.mask_set(), sampler.beta,
                       mode=sampler.fuse_mode)
        z_0 = run_global_phase(z_t, model, req, schedule)

    rgb = from_model_space(z_0).permute(1, 2, 0).numpy().astype(np.float64)
    if sampler.luma_lock:
        rgb = apply_luma_lock(rgb, req.gray.numpy())
    rgb8 = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    provenance = {
        "seed": sampler.seed,
        "sampler": dataclasses.asdict(sampler),
        "model_fingerprint": _model_fingerprint(model),
        "phase_steps": {"instance": k, "global": sampler.steps - k},
        "n_instances": req.n,
        "global_text": req.global_text,
        "schedule": {"T": schedule.T},
    }
    return ColorizeResult(rgb=rgb8, rgb_float=rgb, provenance=provenance)


def plain_ddim_sample(model: Denoiser, gray, sampler: SamplerConfig,
                      schedule: NoiseSchedule | None = None) -> ColorizeResult:
    """Unconditional single-chain DDIM baseline (no instances, empty text)."""
    req = ColorizeRequest(gray=gray, global_text="", instances=[],
                          sampler=dataclasses.replace(sampler, alpha=0.0))
    return colorize(req, model, schedule)


def _batched_cfg_step(model: Denoiser, zs: list[Tensor], bundles, t: int,
                      t_prev: int, sampler: SamplerConfig,
                      schedule: NoiseSchedule, chunk: int) -> list[Tensor]:
    out: list[Tensor] = []
    for start in range(0, len(zs), chunk):
        z_c = torch.stack(zs[start:start + chunk])
        b_c = bundles[start:start + chunk]
        eps_cond = model(z_c, torch.full((z_c.shape[0],), t), b_c, sampler.variant)
        if sampler.guidance == 1.0:
            eps = eps_cond
        else:
            nulls = [b.nullified() for b in b_c]
            eps_uncond = model(z_c, torch.full((z_c.shape[0],), t), nulls,
                               sampler.variant)
            eps = cfg_combine(eps_cond, eps_uncond, sampler.guidance)
        for j in range(z_c.shape[0]):
            out.append(ddim_step(z_c[j], eps[j], t, t_prev, schedule, 0.0))
    return out


def colorize_batch(requests, model: Denoiser, schedule: NoiseSchedule | None = None,
                   chunk: int = 16) -> list[ColorizeResult]:
    """Run many colorize requests with batched model calls.

    All requests must share one sampler configuration apart from the seed,
    with eta = 0. Numerics can differ from the serial path at rounding level
    (batched matmul reduction order); use colorize() where bit-exact
    reproducibility against a serial reference is required.
    """
    requests = list(requests)
    if not requests:
        return []
    schedule = schedule or make_schedule()
    ref = dataclasses.replace(requests[0].sampler, seed=0)
    for req in requests:
        if dataclasses.replace(req.sampler, seed=0) != ref:
            raise ValueError("batched colorize needs a uniform sampler config")
    if ref.eta != 0.0:
        raise ValueError("batched colorize supports eta = 0 only")
    sampler0 = requests[0].sampler
    steps = sampler0.steps
    if steps > schedule.T:
        raise ValueError("sampler steps cannot exceed schedule length")
    dtype = next(model.parameters()).dtype
    pairs = ddim_timesteps(schedule.T, steps)

    inits: list[Tensor] = []
    for req in requests:
        h, w = req.gray.shape
        gen = torch.Generator().manual_seed(req.sampler.seed)
        inits.append(torch.randn(3, h, w, generator=gen, dtype=dtype))

    k = round(sampler0.alpha * steps)
    with torch.no_grad():
        fused: list[Tensor] = list(inits)
        if k > 0:
            # every request's global chain advances through the first k steps;
            # instance branches ride along and fuse in at the barrier
            branch_z: list[Tensor] = []
            branch_bundles = []
            owners: list[tuple[int, int]] = []        # (request, branch) per row
            for r, req in enumerate(requests):
                branch_z.append(inits[r])
                branch_bundles.append(req.global_bundle())
                owners.append((r, 0))
                for i in range(req.n):
                    branch_z.append(inits[r].clone())
                    branch_bundles.append(req.instance_bundle(i))
                    owners.append((r, i + 1))
            for t, t_prev in pairs[:k]:
                branch_z = _batched_cfg_step(model, branch_z, branch_bundles, t,
                                             t_prev, sampler0, schedule, chunk)
            per_request: dict[int, dict[int, Tensor]] = {}
            for (r, b), z in zip(owners, branch_z):
                per_request.setdefault(r, {})[b] = z
            for r, branches in per_request.items():
                req = requests[r]
                if req.n == 0:
                    fused[r] = branches[0]
                else:
                    fused[r] = fuse(branches[0],
                                    [branches[i + 1] for i in range(req.n)],
                                    req.mask_set(), sampler0.beta,
                                    mode=sampler0.fuse_mode)
        global_bundles = [req.global_bundle() for req in requests]
        zs = fused
        for t, t_prev in pairs[k:]:
            zs = _batched_cfg_step(model, zs, global_bundles, t, t_prev,
                                   sampler0, schedule, chunk)

    results = []
    fingerprint = _model_fingerprint(model)
    for req, z_0 in zip(requests, zs):
        rgb = from_model_space(z_0).permute(1, 2, 0).numpy().astype(np.float64)
        if req.sampler.luma_lock:
            rgb = apply_luma_lock(rgb, req.gray.numpy())
        rgb8 = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
        k_req = k if req.n >= 1 else 0
        results.append(ColorizeResult(
            rgb=rgb8, rgb_float=rgb,
            provenance={
                "seed": req.sampler.seed,
                "sampler": dataclasses.asdict(req.sampler),
                "model_fingerprint": fingerprint,
                "phase_steps": {"instance": k_req, "global": steps - k_req},
                "n_instances": req.n,
                "global_text": req.global_text,
                "schedule": {"T": schedule.T},
                "batched": True,
            }))
    return results
