# Temporal Multiscale qMRI Core Module
