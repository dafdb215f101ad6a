"""Batch text-embedding exporter.

Turns item metadata (JSON Lines) into a SEMB v1 embedding file by batching
item texts through a pluggable embedding backend. Supports resuming an
interrupted run from a cursor sidecar; the finished file is byte-identical
to an uninterrupted export.
"""

from .export import ExportError, ExportJob, run_export

__all__ = ["ExportError", "ExportJob", "run_export"]
__version__ = "0.1.0"
