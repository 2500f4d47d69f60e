"""Exception types shared across the package."""


class OoalignError(Exception):
    """Base class for all package-specific failures."""


class MeshLoadError(OoalignError):
    """OBJ ingestion failed (parse error, empty mesh, bad index)."""


class MeshValidationError(OoalignError):
    """A TriMesh violates its structural invariants."""


class PoseError(OoalignError):
    """Invalid pose parameters or gradients (non-finite, wrong shape)."""


class RenderError(OoalignError):
    """Rasterization failed (degenerate camera, non-finite projection)."""


class GuidanceError(OoalignError):
    """Base class for guidance-provider failures."""


class ScorerUnavailableError(GuidanceError):
    """External scorer could not be reached or timed out. Retriable."""


class ScorerProtocolError(GuidanceError):
    """External scorer returned a malformed or unexpected message. Not retriable."""


class OptimizationError(OoalignError):
    """An alignment run failed (e.g. every restart aborted)."""


class ManifestError(OoalignError):
    """Benchmark manifest missing, unparsable, or schema-invalid."""


class ConfigError(OoalignError):
    """Run configuration is invalid (unknown keys, bad values)."""
