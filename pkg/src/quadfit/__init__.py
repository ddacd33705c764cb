"""quadfit: model-based 3D quadruped shape and pose toolkit."""

__version__ = "0.1.0"
