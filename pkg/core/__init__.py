"""
Core package for FoMEMO
Contains the model, optimization and benchmark logic
"""
