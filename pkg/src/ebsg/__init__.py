"""Energy-based training for structured scene-graph prediction.

The package couples a small reverse-mode autodiff engine with a
message-passing energy model over labeled graphs.  Instead of scoring
each predicted label independently, training assigns a joint energy to
(scene, prediction) pairs and pushes the observed configuration below
every refined alternative found by gradient-based sampling.
"""

__version__ = "0.1.0"
