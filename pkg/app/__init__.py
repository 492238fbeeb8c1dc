# Error types and run configuration shared by the voltlab modules.
