"""Print who works on which frame at every computation step.

A five-module pipeline fed a single frame needs nine steps before every
module has received its gradient. Feeding a longer clip fills the pipeline:
once warm, every module runs a forward and a backward unit each step.
"""
import numpy as np

from sideways import pipeline as P
from sideways.gradcheck import tiny_network


def show(trace, depth):
    print("step | " + " | ".join(f"module {i}: fwd/bwd" for i in range(1, depth + 1)))
    for t in range(1, trace.num_steps + 1):
        cells = []
        for i in range(1, depth + 1):
            r = trace.at(t, i)
            f = "-" if r.fwd_origin is None else r.fwd_origin
            b = "-" if r.bwd_origin is None else r.bwd_origin
            cells.append(f"{f!s:>3}/{b!s:<3}".ljust(17))
        print(f"{t:>4} | " + " | ".join(cells))


depth = 5
net = tiny_network(depth, seed=0)
rng = np.random.default_rng(0)

print(f"cycle length for D={depth}: {P.cycle_length(depth)} steps\n")
print("one frame:")
_, trace = P.sideways_episode(net, P.Episode.from_array(rng.random((1, 4, 4, 1)), labels=[0]))
show(trace, depth)

print("\nsix frames, Sideways:")
_, trace = P.sideways_episode(net, P.Episode.from_array(rng.random((6, 4, 4, 1)), labels=[0]))
show(trace, depth)

print("\ntwo frames, blocking backprop (one frame per cycle):")
_, trace = P.bp_episode(net, P.Episode.from_array(rng.random((2, 4, 4, 1)), labels=[0]))
show(trace, depth)
