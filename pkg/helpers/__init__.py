"""
Helpers package for FoMEMO
Contains configuration, error and persistence utilities
"""
