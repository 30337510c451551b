from story.persistence.checkpoint import Checkpoint, load_checkpoint, save_checkpoint, weights_hash

__all__ = ["Checkpoint", "load_checkpoint", "save_checkpoint", "weights_hash"]
