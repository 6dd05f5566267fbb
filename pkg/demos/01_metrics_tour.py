"""How the five segmentation metrics react to typical mistakes.

A phantom liver is the reference; each "prediction" below damages it in one
specific way.  Overlap metrics (Dice, VOE) barely notice a thin boundary error
that surface metrics (ASD, MSD) pick up, RVD is blind to misplacement, and a
single stray blob far from the organ dominates MSD while leaving Dice almost
untouched.

    python3 demos/01_metrics_tour.py
"""

import numpy as np
from scipy import ndimage

from cfcn.evalmetrics import BinaryMask, asd, dice, msd, rvd, voe
from cfcn.phantom import PhantomSpec, generate

_, labels = generate(PhantomSpec(seed=11))
spacing = labels.spacing
truth = labels.mask(1, 2)  # liver with its lesions
six = ndimage.generate_binary_structure(3, 1)

stray = truth.copy()
stray[2:6, 2:6, 2:6] = True  # a false-positive blob in a corner

cases = {
    "identical": truth,
    "eroded by 1 voxel": ndimage.binary_erosion(truth, six),
    "dilated by 1 voxel": ndimage.binary_dilation(truth, six),
    "shifted 3 voxels in x": np.roll(truth, 3, axis=0),
    "stray blob": stray,
}

ref = BinaryMask(truth, spacing)
print(f"{'prediction':24s} {'Dice':>6s} {'VOE%':>7s} {'RVD%':>7s} {'ASD mm':>7s} {'MSD mm':>7s}")
for name, pred in cases.items():
    p = BinaryMask(pred, spacing)
    print(f"{name:24s} {dice(ref, p):6.3f} {voe(ref, p):7.2f} {rvd(ref, p):+7.2f} "
          f"{asd(ref, p):7.3f} {msd(ref, p):7.2f}")

# the shift keeps the volume, so RVD is exactly zero although the overlap drops
# the stray blob is tiny in volume but sits far from the liver surface
