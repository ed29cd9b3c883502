"""Compositional object-centric learning with a jointly trained diffusion prior."""

from .compose import LossBreakdown, LossWeights, MixSpec, mix_random, mix_shared_init, reg_loss, total_loss
from .decoders import MixtureDecoder, SlotConditionedUNet, SurrogateDecoder
from .diffusion import (
    NoiseSchedule,
    TimestepRange,
    diffusion_loss,
    forward_corrupt,
    make_schedule,
    prior_gradient_loss,
    sample,
    tweedie_one_step,
)
from .metrics import MetricsReport, SegMasks, extract_masks, fg_ari, hungarian, mbo, miou, property_probe
from .scenegen import GeneratorConfig, LabeledSample, ObjectSpec, SceneSpec, SpriteDataset, generate_scene, make_dataset
from .slotcore import AttentionMap, FeatureMap, SlotEncoder, SlotInitParams, SlotSet, init_slots
from .trainer import (
    CompositionSystem,
    TrainConfig,
    TrainState,
    evaluate,
    init_state,
    load_checkpoint,
    probe_checkpoint,
    render_composite_panels,
    run_ablation,
    save_checkpoint,
    slot_edit_iou,
    train,
    train_step,
)

__version__ = "0.1.0"
