"""Depth-conditioned image-generation adapter.

Consumes a pipeline manifest (JSON-Lines) and its rendered depth maps,
submits each planned image to a generation backend (a real HTTP endpoint
or the built-in deterministic mock), writes the returned images, and
advances record statuses from rendered to generated. Fully resumable:
rerunning skips finished records and converges to the same manifest.
"""

__version__ = "0.1.0"
