from story.fusion.model import FusionFeature, FusionModel, HistoryContext, concat_history, fuse, fuse_all

__all__ = ["FusionFeature", "FusionModel", "HistoryContext", "concat_history", "fuse", "fuse_all"]
