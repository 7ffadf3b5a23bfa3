#!/usr/bin/env python3

import hashlib


def git_blob_hash(content: bytes) -> str:
    """Hash content the way git hashes a blob object."""
    header = f"blob {len(content)}\0".encode()
    return hashlib.sha1(header + content).hexdigest()
