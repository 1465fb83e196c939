"""Train the six-module CNN to tell which way a sprite moves, with Sideways or backprop.

Uses the small ``desk`` preset (16x16 frames, 16-frame clips). Pass ``bp``
as the first argument to train with blocking backprop instead.
"""
import sys

import numpy as np

from sideways import cli
from sideways import config as C
from sideways.train import evaluate_classifier, train_classifier

mode = sys.argv[1] if len(sys.argv) > 1 else "sideways"
cfg = C.preset("desk")
net = cli.make_network(cfg)
clips = cli.make_clips(cfg, cfg.data.n_clips, cfg.seed)


def log(row):
    if row["iteration"] % 50 == 0:
        print(f"iter {row['iteration']:>4}  loss {row['loss']:8.3f}  batch acc {row['metric']:.2f}  lr {row['lr']:.1e}")


hist = train_classifier(net, clips, cli.make_optimizer(cfg), 2000, mode, cfg.batch_size,
                        target_accuracy=cfg.target_accuracy, log=log)
ma = hist.smoothed("metric")
print(f"\nstopped after {len(hist.rows)} iterations, moving-average accuracy {ma[-1]:.2f}")
held_out = cli.make_clips(cfg, cfg.data.eval_clips, cfg.seed + 1)
print(f"train clips {evaluate_classifier(net, clips):.2f}, held-out clips {evaluate_classifier(net, held_out):.2f}")
print(f"loss over training (smoothed): {np.round(hist.smoothed('loss')[::100], 2)}")
