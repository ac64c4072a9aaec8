"""Tests for the self-triggered DMPC simulator."""
