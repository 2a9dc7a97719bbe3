"""Agentic batch-inference simulator with cache-aware admission control."""
