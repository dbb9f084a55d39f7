"""Tests for derivwatch."""
