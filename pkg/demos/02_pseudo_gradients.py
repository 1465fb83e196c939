"""How far Sideways pseudo-gradients sit from exact gradients.

On a constant clip every frame is the same, so mixing activations and
gradients from different frames changes nothing and the two agree exactly.
Once the sprites move, the pseudo-gradients drift away. The top module stays
exact and the noise grows toward the lower modules, which pair information
from frames further apart. At high speeds the relative noise saturates.
"""
import numpy as np

from sideways import pipeline as P
from sideways.data import SpriteSceneSpec, generate_clip
from sideways.gradcheck import compare_gradients
from sideways.network import build_simple_cnn

for delta in (0.0, 0.25, 1.0, 3.0):
    noise, gaps = [], []
    for seed in range(8):
        clip = generate_clip(SpriteSceneSpec(delta=delta, size=5, trail=6, trail_decay=0.75), 16, 16, 16, seed)
        net = build_simple_cnn((8, 16, 16, 32, 32), 4, precision="double", seed=seed)
        ep = P.Episode.from_clips([clip], "classification", np.float64)
        side, _ = P.sideways_episode(net, ep)
        exact, _ = P.bp_episode(net, ep)
        gaps.append(compare_gradients(side, exact))
        noise.append(P.measure_gradient_noise(net, ep).mean_relative)
    print(f"delta={delta:<4} episode gap to backprop {np.mean(gaps):.3f}   "
          f"per-step noise by module {np.round(np.mean(noise, axis=0), 3)}")
