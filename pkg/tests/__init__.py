"""Test suite for the DA-CIL workbench."""
