"""FDLite: lightweight single-stage face detector toolkit.

Architecture IR and budget audits (:mod:`fdlite.netgraph`), a reference
executor (:mod:`fdlite.executor`), anchors and matching (:mod:`fdlite.anchorkit`),
losses (:mod:`fdlite.losskit`), inference (:mod:`fdlite.pipeline`) and
evaluation (:mod:`fdlite.evalkit`).
"""

__version__ = "0.1.0"
