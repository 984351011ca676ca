"""Versioned extent store over an SCM-analog heap and an NVMe-analog block file."""

from .blockmap import BLOCK_SIZE, BlockMap
from .extents import Extent, ExtentInfo, SegmentMap, Tier, visible_at
from .manifest import Manifest
from .pool import (SCM_THRESHOLD, Container, FetchResult, ObjectID, Pool, create_container,
                   create_pool, manifest_path, open_pool, tier_place)
from ..checksum import crc32c as checksum

__all__ = [
    "BLOCK_SIZE", "BlockMap", "Container", "Extent", "ExtentInfo", "FetchResult", "Manifest",
    "ObjectID", "Pool", "SCM_THRESHOLD", "SegmentMap", "Tier", "checksum", "create_container",
    "create_pool", "manifest_path", "open_pool", "tier_place", "visible_at",
]
