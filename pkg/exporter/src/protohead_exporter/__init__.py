"""protohead-exporter: backbone feature extraction for the detection head."""

from .backbones import BackboneLoadError, PatchBackbone, available_backbones, load_backbone
from .export import ExportJob, export_features, export_instance_list
from .cli import run_cli

__all__ = [
    "BackboneLoadError",
    "PatchBackbone",
    "available_backbones",
    "load_backbone",
    "ExportJob",
    "export_features",
    "export_instance_list",
    "run_cli",
]
