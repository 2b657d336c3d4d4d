"""Simulation and analysis toolkit for a cavity-coupled telecom quantum-dot
single-photon source.

The emitter is modelled as a stochastic photon source inside a two-mode
elliptical Bragg grating cavity. Virtual benches (HBT, unbalanced
Mach-Zehnder HOM, polarizer, spectrometer, TCSPC) turn emission streams into
detector clicks, and the analysis layer extracts the usual figures of merit.
"""

__version__ = "0.1.0"
