"""Channel gain map inference in 3D urban space with a conditional GAN.

Modules
-------
grid        voxel geometry of the region
urbangen    random urban environments
radiosim    synthetic ground-truth channel gain maps
dataset     CGM corpus on disk, sampling and splits
nncore      numpy 3D conv layers, batch norm, Adam, gradients
cgan        generator/discriminator, training and inference
baseline    inverse-distance-weighted interpolation
evaluate    AMSE, sweeps, slice exports, report
cli         command-line entry point
"""

__version__ = "0.1.0"
