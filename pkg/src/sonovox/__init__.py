"""Synthetic 3D ultrasound perception pipeline.

Array-signal simulation, DAS/MVDR beamforming, CFAR and Cartesian
voxelization, LiDAR-style auto-annotation, and a from-scratch 3D U-Net
for voxelwise background/object segmentation.
"""

__version__ = "0.1.0"
