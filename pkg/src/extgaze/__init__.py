"""Extended gaze following: locate objects of interest from people's head poses."""

__version__ = "0.1.0"
