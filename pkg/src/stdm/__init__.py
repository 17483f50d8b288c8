"""Two-stage spatio-temporal disease mapping with misaligned climate covariates."""
