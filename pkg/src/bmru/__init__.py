"""Co-design toolkit for bistable-memory recurrent networks.

Trains first-quadrant bistable memory recurrent unit (FQ BMRU) networks,
compiles them onto a behavioral model of a current-mode subthreshold
circuit, and runs agreement, noise-immunity, quantization, power-scaling
and mismatch analyses.
"""

__version__ = "0.1.0"
