"""Unit test package for v2ir."""
