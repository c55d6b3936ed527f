"""Knowledge distillation and adversarial domain adaptation for lesion segmentation on synthetic clinics."""

__version__ = "0.1.0"
