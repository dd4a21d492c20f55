"""
Test package for FoMEMO
"""
