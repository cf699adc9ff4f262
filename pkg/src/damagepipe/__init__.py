"""Building damage assessment pipeline for paired pre/post disaster imagery.

The package is organized around a small set of layers:

- ``geometry``: pixel-space primitives (boxes, polygons, IoU, matching).
- ``xbd``: dataset discovery and label parsing for paired imagery.
- ``gateway``: typed client for the inference backend wire protocol.
- ``mock_backend`` / ``synthetic``: deterministic offline backend and the
  synthetic imagery it understands.
- ``assess``: detection, cropping, and VLM severity assessment per building.
- ``clip_eval`` / ``jury`` / ``metrics``: the three evaluation tracks.
- ``report``: tables, CSV exports, and figures rendered from run artifacts.
- ``cli``: the ``damagepipe`` command.
"""

__version__ = "0.1.0"
