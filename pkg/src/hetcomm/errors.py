"""Exception hierarchy shared by every hetcomm module."""

from __future__ import annotations


class HetCommError(Exception):
    """Base class for all library errors."""


# topology
class ParseError(HetCommError):
    pass


class ValidationError(HetCommError):
    pass


class RankOutOfRange(HetCommError, IndexError):
    pass


# adaptors
class AllocError(HetCommError, MemoryError):
    pass


class CrossRankCopy(HetCommError):
    pass


class WrongSpace(HetCommError):
    pass


class QpClosed(HetCommError):
    pass


class SizeMismatch(HetCommError):
    pass


class MixedVendorGroup(HetCommError):
    pass


# transport / bootstrap
class ChannelClosed(HetCommError):
    pass


class RendezvousTimeout(HetCommError, TimeoutError):
    pass


class LengthMismatch(HetCommError):
    pass


# p2p
class PathMismatch(HetCommError):
    pass


class SelfSend(HetCommError):
    pass


class NoMatchingRecv(HetCommError):
    pass


# collectives
class EmptyGroup(HetCommError):
    pass


class ShapeError(HetCommError):
    pass


class RootNotInGroup(HetCommError):
    pass


# groups
class GridMismatch(HetCommError):
    pass


class HeterogeneityNotSupported(HetCommError):
    pass


# pipeline
class InvalidPlan(HetCommError):
    pass


class Infeasible(HetCommError):
    pass


# trainer / cli
class DivergedError(HetCommError, ArithmeticError):
    pass


class IoError(HetCommError, OSError):
    pass


class SpecError(HetCommError):
    pass
