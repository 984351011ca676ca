"""Status codes shared by every layer, and the exception that carries them.

Codes travel on the wire as u16, so values are fixed once assigned.
"""

from __future__ import annotations

import enum


class Status(enum.IntEnum):
    OK = 0

    # transport / access control
    REMOTE_ACCESS = 1
    EXPIRED = 2
    OUT_OF_BOUNDS = 3
    PERM = 4
    NETWORK = 5
    UNKNOWN_KEY = 6
    REVOKED = 7
    ZERO_LENGTH = 8
    PD_DEAD = 9
    MISMATCH = 10
    QP_STATE = 11

    # tenancy
    DUPLICATE_NAME = 20
    INVALID_NAME = 21
    SCOPE_EXCEEDS_REGION = 22
    PERM_ESCALATION = 23
    FOREIGN_REGION = 24
    UNKNOWN_TOKEN = 25
    OVERSIZED = 26

    # store
    IO = 40
    EXISTS = 41
    UNALIGNED = 42
    CHECKSUM_MISMATCH = 43
    ENOSPC = 44
    MEDIA_CORRUPTION = 45
    UNKNOWN_OBJECT = 46
    POOL_CORRUPT = 47
    INVALID_ARGUMENT = 48
    EPOCH_RECLAIMED = 49
    UNKNOWN_CONTAINER = 50

    # engine
    BIND_FAILURE = 60
    AUTH_FAILED = 61
    UNKNOWN_TENANT = 62
    UNSUPPORTED = 63
    MALFORMED = 64
    NOT_AUTHED = 65
    CONFIG = 66

    # dfs
    BAD_SUPERBLOCK = 80
    NOT_FOUND = 81
    NOT_A_DIRECTORY = 82
    NOT_EMPTY = 83
    IS_DIRECTORY = 84
    BAD_HANDLE = 85
    READ_ONLY = 86

    # proxy / bench
    ENGINE_UNREACHABLE = 100
    PROXY_UNAVAILABLE = 101
    SETUP_FAILED = 102
    NONPOSITIVE = 103


class Ros2Error(Exception):
    """An operation failed with a well-defined status code."""

    def __init__(self, status: Status, message: str = ""):
        self.status = Status(status)
        self.message = message
        super().__init__(f"{self.status.name}: {message}" if message else self.status.name)

    def __reduce__(self):
        return (self.__class__, (self.status, self.message))
