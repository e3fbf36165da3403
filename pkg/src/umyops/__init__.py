"""Joint multi-sequence CMR registration, myocardium extraction and pathology segmentation."""

__version__ = "0.1.0"
