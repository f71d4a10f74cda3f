"""Magic-string checks shared by the binary artifact loaders."""
from __future__ import annotations


def read_bytes(path, what):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: {what} file not found") from None


def check_magic(data, magic, what, path):
    """Return the header length, or raise naming the mismatch."""
    if data.startswith(magic):
        return len(magic)
    stem = magic.rstrip(b"0123456789")
    if data.startswith(stem):
        found = data[len(stem):len(stem) + 4].split(b"\n")[0]
        raise ValueError(f"{path}: unsupported {what} version {found!r} (this build reads {magic!r})")
    raise ValueError(f"{path}: not a {what} file (expected magic {magic!r})")
