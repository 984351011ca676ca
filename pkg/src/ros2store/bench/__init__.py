"""Workload driver, sweep grids, reports and the ingest-rate calculator."""
