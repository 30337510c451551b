from story.schemas.config import Conditioning, HistoryMode, PipelineConfig, load_config

__all__ = ["Conditioning", "HistoryMode", "PipelineConfig", "load_config"]
