# labelprop/core/exceptions.py
"""
Error types shared by every module.

Each error carries a human-readable ``detail`` and the process ``exit_code``
the CLI should use when it reaches the top level.
"""

from typing import Optional


class LabelPropError(Exception):
    exit_code: int = 2

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


# -----------------------------
# VALIDATION (exit 1)
# -----------------------------
class ValidationFailure(LabelPropError, ValueError):
    exit_code = 1


class ConfigError(ValidationFailure):
    pass


class RasterFormatError(ValidationFailure):
    pass


class LabelRangeError(ValidationFailure):
    pass


class FlowFormatError(ValidationFailure):
    pass


class ManifestError(ValidationFailure):
    pass


class DimensionMismatchError(ValidationFailure):
    pass


class EmptyEvaluationError(ValidationFailure):
    pass


# -----------------------------
# RUNTIME (exit 2)
# -----------------------------
class RuntimeFailure(LabelPropError, RuntimeError):
    exit_code = 2


class InferenceError(RuntimeFailure):
    pass


class PropagationError(RuntimeFailure):
    def __init__(self, detail: str, frame_index: Optional[int] = None, seq_id: Optional[str] = None):
        where = []
        if seq_id is not None:
            where.append(f"sequence {seq_id}")
        if frame_index is not None:
            where.append(f"frame {frame_index}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + detail)
        self.frame_index = frame_index
        self.seq_id = seq_id


class TrainingDivergedError(RuntimeFailure):
    def __init__(self, detail: str, epoch: int, sample_index: int):
        super().__init__(f"[epoch {epoch}, sample {sample_index}] {detail}")
        self.epoch = epoch
        self.sample_index = sample_index
