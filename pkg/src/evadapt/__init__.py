"""Cross-modal token distillation for adapting an image-trained ViT encoder
to event-camera input, with attention-rollout token-significance weighting.
"""

__version__ = "0.1.0"
