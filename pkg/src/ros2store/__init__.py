"""Desk-scale RDMA-first object storage: engine, DFS client, offload proxy and benchmarks."""

__version__ = "0.1.0"
