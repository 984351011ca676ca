"""File layer: paths, directories and chunked file I/O over engine objects."""

from .layout import DEFAULT_CHUNK, DirEntry, Kind, Superblock, chunk_pieces, split_path
from .mount import CREATE, EXCL, RDONLY, RDWR, TRUNC, WRONLY, FileHandle, Mount, Stat, mount

__all__ = [
    "CREATE", "DEFAULT_CHUNK", "DirEntry", "EXCL", "FileHandle", "Kind", "Mount", "RDONLY", "RDWR",
    "Stat", "Superblock", "TRUNC", "WRONLY", "chunk_pieces", "mount", "split_path",
]
