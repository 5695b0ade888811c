"""intentcnn: classify operator manipulation intent from multichannel robot-arm traces.

A small, dependency-light toolkit: CSV trace ingestion, synthetic trace
generation, a from-scratch 1D convolutional network with manual backprop,
stratified train/val/test experiment protocols with F1 reporting, and a
sliding-window streaming classifier over a line protocol.
"""

__version__ = "0.1.0"
