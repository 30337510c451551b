from story.diffusion.sampling import SamplerConfig, cfg_combine, ddim_step, sample, sampling_timesteps
from story.diffusion.schedule import NoiseSchedule, forward_diffuse

__all__ = ["NoiseSchedule", "SamplerConfig", "cfg_combine", "ddim_step", "forward_diffuse", "sample", "sampling_timesteps"]
