"""evhybrid: hybrid spiking/dense backbone for event-camera object detection.

Subpackages follow the processing pipeline: event ingestion and synthesis
(:mod:`evhybrid.events`), the spiking front-end (:mod:`evhybrid.snn`), the
attention bridge to dense features (:mod:`evhybrid.bridge`), the dense
back-end and toy detection head (:mod:`evhybrid.ann`), the fixed-point
deployment path (:mod:`evhybrid.quantize`), and the compute/energy profiler
(:mod:`evhybrid.profiling`). Everything is built on the small tape engine in
:mod:`evhybrid.numerics`.
"""

from .numerics import GradTape, Tensor, grad_check, ops

__all__ = ["GradTape", "Tensor", "grad_check", "ops"]
__version__ = "0.1.0"
