"""Hyperspectral 3D reconstruction lab.

Turntable-style hyperspectral captures in, calibrated reflectance cubes,
trained multi-channel radiance fields, and evaluated spectral point clouds
out. Submodules are intentionally import-light; pull in what you need:

* :mod:`hyperfield.cube` -- hyperspectral cube container and BIL I/O
* :mod:`hyperfield.calibration` -- white-reference spectral calibration
* :mod:`hyperfield.scene` -- analytic synthetic scenes and pose rings
* :mod:`hyperfield.field` -- the trainable multi-channel radiance field
* :mod:`hyperfield.render` -- ray sampling and volumetric compositing
* :mod:`hyperfield.losses` -- the composite spectral training objective
* :mod:`hyperfield.train` -- two-stage optimization and ablation harness
* :mod:`hyperfield.spectral_metrics` -- SAM / RMSE / SSIM / PSNR evaluation
* :mod:`hyperfield.spatial_metrics` -- ICP and precision/recall evaluation
* :mod:`hyperfield.extract` -- point-cloud extraction from trained fields
"""

__version__ = "0.1.0"
