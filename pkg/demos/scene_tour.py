"""Generate one scene, check it against its own geometry, and write a few images."""
import sys
from pathlib import Path

import numpy as np

from listereo import autodiff as ad
from listereo import imageio
from listereo.autodiff import Tensor
from listereo.evaluation import colorize
from listereo.losses import photometric_loss, warp_right_to_left
from listereo.network import Model, ModelConfig
from listereo.scene import SceneSpec, generate_scene, photometric_consistency

out = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/listereo-tour")
out.mkdir(parents=True, exist_ok=True)

s = generate_scene(SceneSpec(seed=3))
print(f"depth range {s.gt_depth.depth.min():.2f}..{s.gt_depth.depth.max():.2f} m, "
      f"lidar points {s.sparse_depth.count}, occluded {s.occlusion.mean():.1%}")
print(f"photometric consistency {photometric_consistency(s):.4f}")

with ad.precision(np.float64):
    left = Tensor(s.left_image.transpose(2, 0, 1)[None])
    right = Tensor(s.right_image.transpose(2, 0, 1)[None])
    for name, disp in (("ground truth", s.gt_disparity.disparity), ("zero", np.zeros_like(s.gt_disparity.disparity))):
        loss = photometric_loss(left, warp_right_to_left(right, Tensor(disp[None, None]))).item()
        print(f"photometric loss with {name} disparity: {loss:.4f}")

model = Model.create(ModelConfig(), seed=0)
disp, depth = model.predict(s.left_image[None], s.right_image[None], s.sparse_depth.depth[None],
                            s.sparse_depth.valid[None], s.rig)
print(f"untrained prediction: disparity {disp.min():.2f}..{disp.max():.2f} px")

(out / "left.ppm").write_bytes(imageio.encode_ppm(s.left_image))
(out / "gt_depth.ppm").write_bytes(imageio.encode_ppm(colorize(s.gt_depth)))
(out / "lidar.ppm").write_bytes(imageio.encode_ppm(colorize(s.sparse_depth)))
print(f"images in {out}")
