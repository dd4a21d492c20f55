"""
Schemas package for FoMEMO
Contains configuration, record and API models
"""
