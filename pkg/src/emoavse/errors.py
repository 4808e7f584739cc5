"""Shared exception type for pipeline-level failures."""


class EmoAvseError(RuntimeError):
    """Raised when a pipeline stage cannot produce its contracted output.

    The message is prefixed with a stage label (e.g. "[face-detection] ...")
    when raised from inside the enhancement chain, so callers and the CLI can
    report which stage failed.
    """

    def __init__(self, message: str, stage: str | None = None):
        if stage:
            message = f"[{stage}] {message}"
        super().__init__(message)
        self.stage = stage
