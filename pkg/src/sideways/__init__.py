"""Depth-parallel video training with blocking backprop and Sideways pseudo-gradients."""
from .network import Network, build_autoencoder, build_simple_cnn, load_checkpoint, save_checkpoint
from .optimizer import Optimizer, Schedule
from .pipeline import NO_UPDATE, Episode, bp_episode, cycle_length, measure_gradient_noise, sideways_episode
from .executor import ExecutorConfig, bench_speedup, run_episode
from .data import Clip, SpriteSceneSpec, generate_clip

__all__ = [
    "Network", "build_autoencoder", "build_simple_cnn", "load_checkpoint", "save_checkpoint",
    "Optimizer", "Schedule", "NO_UPDATE", "Episode", "bp_episode", "cycle_length",
    "measure_gradient_noise", "sideways_episode", "ExecutorConfig", "bench_speedup", "run_episode",
    "Clip", "SpriteSceneSpec", "generate_clip",
]
__version__ = "0.1.0"
