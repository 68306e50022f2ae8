"""Observability module for pipeline metrics."""
