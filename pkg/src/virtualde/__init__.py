"""Virtual dual-energy chest imaging.

A multi-scale conditional generator predicts a bone image from a single
standard radiograph; gradient-domain suppression removes that bone from the
standard image to give a soft-tissue image.  Synthetic phantoms, training,
image-quality metrics and FROC analysis are included.
"""

from .imagecore import DESample, GradientField, Image, ImageError, denormalize, normalize
from .phantom import LesionRecord, PhantomSpec, generate_dataset, generate_sample
from .suppress import suppress_bone

__version__ = "0.1.0"

__all__ = ["DESample", "GradientField", "Image", "ImageError", "LesionRecord", "PhantomSpec",
           "denormalize", "generate_dataset", "generate_sample", "normalize", "suppress_bone"]
