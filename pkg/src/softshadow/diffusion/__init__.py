"""Shadow-conditioned denoising diffusion over occluder point clouds."""
from .dataset import DatasetSpec, Instance, generate_dataset, generate_instance, load_dataset, write_dataset
from .networks import LATENT_DIM, NetworkConfig, SSDModel
from .sampling import reverse_chain, reverse_sample
from .schedule import NoiseSchedule, cosine_schedule, forward_chain, forward_noising
from .shapes import Primitive, fps_resample, sample_surface_points
from .training import Trainer, TrainingConfig, diffusion_loss, load_checkpoint, normalize_images, save_checkpoint

__all__ = [
    "DatasetSpec", "Instance", "generate_dataset", "generate_instance", "load_dataset", "write_dataset",
    "LATENT_DIM", "NetworkConfig", "SSDModel", "reverse_chain", "reverse_sample", "NoiseSchedule",
    "cosine_schedule", "forward_chain", "forward_noising", "Primitive", "fps_resample", "sample_surface_points",
    "Trainer", "TrainingConfig", "diffusion_loss", "load_checkpoint", "normalize_images", "save_checkpoint",
]
