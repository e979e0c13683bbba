"""Exception hierarchy shared across the pipeline."""


class EgomapError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(EgomapError):
    """Two images that must share dimensions do not."""


class DegenerateCorrespondences(EgomapError):
    """Too few or collinear 3D correspondences; no rigid fit exists."""


class InvalidDepth(EgomapError):
    """Depth value is non-positive or non-finite."""


class NoMatches(EgomapError):
    """Malformed region mask passed to a pixel matcher."""


class BackendUnavailable(EgomapError):
    """A perception backend cannot be reached or failed permanently."""


class UnsupportedCapability(EgomapError):
    """Backend does not advertise the requested capability."""


class GroundingParseError(EgomapError):
    """VLM grounding output could not be parsed after a reprompt."""


class AlignmentFailed(EgomapError):
    """Pairwise pose estimation failed for a frame pair."""


class PartialAlignment(EgomapError):
    """Tree alignment completed only for the component containing the root.

    Carries the partially-built tree so callers can proceed with the
    aligned subset.
    """

    def __init__(self, message, tree=None, aligned_nodes=None):
        super().__init__(message)
        self.tree = tree
        self.aligned_nodes = aligned_nodes


class EmptyObservation(EgomapError):
    """A segment mask had no valid-depth pixels to fuse."""


class PlacementFailure(EgomapError):
    """Scene generator could not place the requested objects."""


class InsufficientObjects(EgomapError):
    """Scene does not contain enough objects for a question kind."""


class AnswerParseError(EgomapError):
    """Multiple-choice VLM reply did not contain a recognizable choice."""


class ConfigError(EgomapError):
    """Run configuration is invalid or incomplete."""
