"""fuselab: multi-exposure fusion with decoupled unsupervised losses."""

__version__ = "0.1.0"
