"""
Test Package

Unit and integration tests for the fogsense toolkit.
"""
