"""Tests for dusty-desk."""
