"""Robot joint keypoint localization trained on adaptively sampled renderings."""

__version__ = "0.1.0"
