from .writer import write_feature_file
from .exporter import export_features

__all__ = ["write_feature_file", "export_features"]
__version__ = "0.1.0"
