"""Instance-aware diffusion colorization: masked attention, mask+text
guidance, multi-instance sampling, and the surrounding tooling."""

from .attention import (
    AttentionGrads,
    AttentionTape,
    MaskMode,
    ProjectionParams,
    attention_backward,
    masked_cross_attention,
    masked_self_attention,
    masked_softmax,
)
from .masks import (
    InstanceMask,
    MaskPolicy,
    MaskSet,
    assemble_self_map_mask,
    background_mask,
    build_latent_instance_mask,
    build_pixel_attention_mask,
    build_self_mask,
    resize_mask_set,
    rle_decode,
    rle_encode,
)
from .denoiser import (
    ConditioningBundle,
    Denoiser,
    DenoiserConfig,
    drop_conditions,
    load_checkpoint,
    save_checkpoint,
    timestep_embedding,
)
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    TrainConfig,
    cfg_combine,
    ddim_step,
    ddim_timesteps,
    make_schedule,
    q_sample,
    train_stage,
    training_loss,
)
from .guidance import InstanceGuidanceBlock, InstanceText, ToyTextEncoder, make_text_encoder
from .sampling import (
    ColorizeRequest,
    ColorizeResult,
    colorize,
    colorize_batch,
    fuse,
    init_instance_noises,
    plain_ddim_sample,
    run_global_phase,
    run_instance_phase,
)
from .data import (
    PALETTE,
    AnnotatedImage,
    SynthConfig,
    annotate_image,
    crop_instance,
    generate_synthetic,
    read_annotations,
    validate_caption,
    write_annotations,
)
from .metrics import (
    colorfulness,
    instance_color_fidelity,
    leakage_probe,
    psnr,
    ssim,
)

__version__ = "0.1.0"
