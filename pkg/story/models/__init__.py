from .base import BaseModel
from .run import PipelineRun
