"""Hilbert expansion with viscous and Knudsen boundary layers for the Boltzmann equation.

Soft-potential linearized collision operator on a velocity lattice, macro/micro calculus,
half-space kinetic layer solver, 1-D Euler background and composite expansion assembly.
"""
__version__ = "0.1.0"
