"""backmap: map IoT backend server footprints and attribute ISP flow data."""

__version__ = "0.1.0"
