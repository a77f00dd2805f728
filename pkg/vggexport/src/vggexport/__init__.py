"""One-off exporter: torchvision VGG16 -> STSCW weights + fixture activations."""

from .export import ExportError, export_vgg16

__all__ = ["ExportError", "export_vgg16"]
