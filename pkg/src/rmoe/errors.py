#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Exception types raised by rmoe


class RmoeError(Exception):
    pass


class ShapeError(RmoeError, ValueError):
    pass


class NonFiniteError(RmoeError, ArithmeticError):
    pass


class ConvergenceError(RmoeError):
    pass


class GraphError(RmoeError):
    pass


class RoutingError(RmoeError):
    pass


class ReconstructionError(RmoeError):
    pass


class ConfigError(RmoeError):
    pass


class SurgeryError(RmoeError):
    pass


class RawFormatError(RmoeError):
    pass


class MagicMismatchError(RawFormatError):
    pass


class TruncatedPayloadError(RawFormatError):
    pass


class ModalityMismatchError(RawFormatError):
    pass


class CheckpointError(RmoeError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass
