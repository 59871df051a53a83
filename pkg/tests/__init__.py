"""Tests for SuperFinder."""

