"""Caption-conditioned two-stage video generation.

A flow stage turns (noise, caption condition) into an optical-flow
volume; a texture stage turns (noise, caption condition, flow) into an
RGB video; both stages train adversarially with a linear blend from real
to generated flow. Includes a synthetic captioned moving-shapes corpus,
a video distance metric, and a caption-encoding ablation harness.
"""

__version__ = "0.1.0"
