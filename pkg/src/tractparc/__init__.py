"""Fine-scale parcellation of brain nuclei from tractography streamlines."""

__version__ = "0.1.0"
