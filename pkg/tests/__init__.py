"""
Enhanced Document Converter v3.0 - Test Suite

This package contains unit and integration tests for the document converter.
"""
