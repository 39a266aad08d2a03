"""Train on the synthetic context task and look at the ambiguous classes.

Run with ``python3 demos/context_task.py`` (about a minute on one core).
Boats and cars look identical; only the block underneath (water or road)
tells them apart.  A unary-only model and a model with pairwise terms are
trained on the same images for ten epochs and compared per class.
"""
import dataclasses

import numpy as np

from ctxcrf.data import AMBIGUOUS, CLASS_NAMES
from ctxcrf.experiments import evaluate_params, preset_config, synthetic_split
from ctxcrf.training import train

cfg = preset_config()
cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=10),
                          refine=dataclasses.replace(cfg.refine, enabled=False))
train_set, test_set = synthetic_split(cfg, n_train=100, n_test=20)

boat, car = AMBIGUOUS
img = train_set[0]
print(f"image {img.image.shape}, classes present: "
      f"{[CLASS_NAMES[k] for k in np.unique(img.mask) if k < len(CLASS_NAMES)]}")
pix = lambda k: img.image[img.mask == k].reshape(-1, 3)
if len(pix(boat)) and len(pix(car)):
    print(f"mean colour of boat pixels {pix(boat).mean(0).round(3)}, car pixels {pix(car).mean(0).round(3)}")

for name, model in (("unary only", dataclasses.replace(cfg.model, relations=())), ("with pairwise", cfg.model)):
    run = dataclasses.replace(cfg, model=model)
    params = train(train_set, run.model, run.train)
    cm = evaluate_params(params, run, test_set)
    pa, ma, iou = cm.scores()
    _, per = cm.per_class()
    print(f"\n{name}: pixel acc {pa:.3f}  mean acc {ma:.3f}  IoU {iou:.3f}")
    for k, v in enumerate(per):
        print(f"  {CLASS_NAMES[k]:>6} IoU {v:.3f}")
