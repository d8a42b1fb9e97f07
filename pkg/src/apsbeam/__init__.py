"""Downlink beamforming for a two-layer airborne massive-MIMO network.

Modules: ``scenario`` (geometry and mobility), ``channel`` (fading and CSI),
``radio`` (SINR, rates, ZF/MRT), ``neuralcore`` (autodiff and Adam),
``agents`` (actors and training) and ``harness`` (CLI and sweeps).
"""
__version__ = "0.1.0"
