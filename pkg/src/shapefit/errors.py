"""Exception hierarchy shared across the package."""


class ShapeFitError(Exception):
    """Base class for all package-specific errors."""


# --- geometry ---------------------------------------------------------------

class NonPositiveDepth(ShapeFitError):
    """Point lies at or behind the camera plane."""


# --- SDF grids --------------------------------------------------------------

class OutOfSupport(ShapeFitError):
    """Query point outside the differentiable region of a grid."""


class ParamOutOfRange(ShapeFitError):
    """Procedural shape parameter outside its declared range."""


class NonWatertightMesh(ShapeFitError):
    """Inside/outside parity test is ambiguous for the mesh."""


# --- shape prior ------------------------------------------------------------

class InsufficientModels(ShapeFitError):
    """Too few bank models for the requested latent dimension."""


class MetaMismatch(ShapeFitError):
    """Bank grids do not share identical dims/voxel_size/origin."""


class DegenerateBank(ShapeFitError):
    """Bank has zero variance; no principal directions exist."""


class LengthMismatch(ShapeFitError):
    """Flat vector length does not match the prior's grid size."""


class BadMagic(ShapeFitError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(ShapeFitError):
    """File version not supported by this reader."""


# --- rendering --------------------------------------------------------------

class DegenerateCube(ShapeFitError):
    """Posed shape cube is entirely behind the camera."""


class SizeMismatch(ShapeFitError):
    """Mask/occlusion map dimensions disagree."""


# --- scene ------------------------------------------------------------------

class MissingFile(ShapeFitError):
    """A file referenced by scene.json does not exist."""


class BadCalibration(ShapeFitError):
    """Camera block of scene.json fails validation."""


class MaskSizeMismatch(ShapeFitError):
    """Instance mask dimensions do not match the camera."""


class TooFewPoints(ShapeFitError):
    """Frustum point count below the fit-eligibility minimum."""


class DegenerateGround(ShapeFitError):
    """RANSAC could not find a plausible ground plane."""


# --- energy / fit -----------------------------------------------------------

class EmptyFrustum(ShapeFitError):
    """Point-cloud term evaluated with no frustum points."""


class EmptyShape(ShapeFitError):
    """Decoded shape has an empty interior."""


# --- synth ------------------------------------------------------------------

class PlacementFailure(ShapeFitError):
    """Rejection sampling failed to place all instances."""


# --- metrics ----------------------------------------------------------------

class DegenerateBox(ShapeFitError):
    """Box has non-positive dimensions."""


class SpecError(ShapeFitError):
    """Harness sweep specification contains unknown axes/values."""


# --- app --------------------------------------------------------------------

class SegmenterUnreachable(ShapeFitError):
    """External segmenter did not respond after retries."""


class BadResponse(ShapeFitError):
    """External segmenter returned an invalid payload."""
