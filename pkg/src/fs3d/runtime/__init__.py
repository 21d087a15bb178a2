"""Simulated multi-rank execution: transport, sharding, partitioning and sync."""
