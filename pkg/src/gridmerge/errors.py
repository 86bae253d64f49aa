"""Exception types raised across the package."""


class GridMergeError(Exception):
    """Base class for all package errors."""


class FormatError(GridMergeError):
    pass


class ResolutionMismatch(GridMergeError):
    pass


class EmptyInput(GridMergeError):
    pass


class ImageTooSmall(GridMergeError):
    pass


class OutOfBounds(GridMergeError):
    pass


class DegenerateInput(GridMergeError):
    pass


class TooFewMatches(GridMergeError):
    pass


class TooFewPoints(GridMergeError):
    pass


class NonFiniteObjective(GridMergeError):
    pass


class TooFewEdges(GridMergeError):
    pass


class NotSpanning(GridMergeError):
    pass


class GraphDisconnected(GridMergeError):
    """The relative-motion graph does not connect every map.

    ``components`` lists the vertex sets of each connected component, sorted
    by their smallest member.
    """

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        self.components.sort(key=lambda c: c[0])
        super().__init__(f"pose graph is disconnected: components {self.components}")


class EmptyEdgeSet(GridMergeError):
    pass


class RankDeficient(GridMergeError):
    pass


class TooFewMaps(GridMergeError):
    pass


class InfeasibleParams(GridMergeError):
    pass


class LengthMismatch(GridMergeError):
    pass
