"""One forward pass of the full-width road-scale configuration (about 2 minutes, 2 GB)."""
import resource
import time

import numpy as np

from listereo.geometry import CameraRig
from listereo.network import Model, ModelConfig, param_count

cfg = ModelConfig.paper()
model = Model.create(cfg)
print("parameters", param_count(model.params))

rng = np.random.default_rng(0)
left, right = rng.random((2, 1, 256, 1024, 3))
sparse = rng.uniform(1, 80, (1, 256, 1024))
valid = rng.random((1, 256, 1024)) < 0.05
rig = CameraRig(721.5, 0.54, 512, 128, 1024, 256, 100.0)

start = time.perf_counter()
disp, depth = model.predict(left, right, sparse, valid, rig)
print(f"disparity {disp.shape} in {time.perf_counter() - start:.0f}s, "
      f"peak rss {resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1e3:.0f} MB")
