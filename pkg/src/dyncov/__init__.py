"""Structured dynamic covariance estimation."""
