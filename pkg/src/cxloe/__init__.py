"""Discrete-event model of memory disaggregation over Ethernet.

Submodules: ``sim`` (event engine), ``wire`` (frame codec), ``cache``
(compute-node cache), ``congctl`` (rate controller and token bucket), ``arq``
(retry and reorder buffers), ``cn`` / ``mn`` (compute and memory nodes),
``fabric`` (links and fault injection) and ``harness`` (configs, experiments,
oracle, CLI).
"""

__version__ = "0.1.0"
