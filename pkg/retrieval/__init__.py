# Core library for multi-space text-to-video retrieval
