"""Tests for asymcal."""
