"""Test configuration and fixtures for dedup-acq tests."""
