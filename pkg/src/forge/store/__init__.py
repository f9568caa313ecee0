from forge.store.store import CommitGroupOp, DeleteOp, PutOp, Store, StoreOp
from forge.store.types import (
    CODEC_NONE,
    CODEC_ZLIB,
    DEFAULT_CHUNK_SIZE,
    DEFAULT_INLINE_THRESHOLD,
    SYSTEM_PREFIX,
    BlobPointer,
    Document,
    ScanCursor,
)

__all__ = [
    "BlobPointer",
    "CODEC_NONE",
    "CODEC_ZLIB",
    "CommitGroupOp",
    "DEFAULT_CHUNK_SIZE",
    "DEFAULT_INLINE_THRESHOLD",
    "DeleteOp",
    "Document",
    "PutOp",
    "ScanCursor",
    "Store",
    "StoreOp",
    "SYSTEM_PREFIX",
]
