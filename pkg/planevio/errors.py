"""Exception hierarchy. Every failure the estimator can report is a PlaneVioError."""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class PlaneVioError(Exception):
    exit_code = EXIT_RUNTIME


# geometry

class NonPositiveDepth(PlaneVioError):
    pass


class NonPositiveInverseDepth(PlaneVioError):
    pass


class BehindCamera(PlaneVioError):
    pass


class RayParallelToPlane(PlaneVioError):
    pass


class NegativeDepth(PlaneVioError):
    pass


class InvalidIntrinsics(PlaneVioError):
    pass


# imu

class EmptyStream(PlaneVioError):
    pass


class NonMonotonicTimestamps(PlaneVioError):
    pass


class SingularCovariance(PlaneVioError):
    pass


# meshing / detection

class TooFewPoints(PlaneVioError):
    pass


class AllCollinear(PlaneVioError):
    pass


class MissingDepth(PlaneVioError):
    pass


# residuals / optimizer

class OutOfBounds(PlaneVioError):
    pass


class KindMismatch(PlaneVioError):
    pass


class InactivePlane(PlaneVioError):
    pass


class FactorizationFailure(PlaneVioError):
    pass


class DivergedOptimization(PlaneVioError):
    pass


# synth / eval

class NoVisibleGeometry(PlaneVioError):
    pass


class TooFewMatches(PlaneVioError):
    pass


class ZeroVariance(PlaneVioError):
    pass


class EmptyInput(PlaneVioError):
    pass


# cli / io

class BadConfig(PlaneVioError):
    exit_code = EXIT_USAGE


class BadBundle(PlaneVioError):
    pass


class ParseError(PlaneVioError):
    pass


class IoFailure(PlaneVioError):
    pass


class UsageError(PlaneVioError):
    exit_code = EXIT_USAGE
