"""Voxel reconstruction of geometry and temperature from paired RGB and thermal images,
with volumetric meshes for heat-conduction simulation."""

__version__ = "0.1.0"
