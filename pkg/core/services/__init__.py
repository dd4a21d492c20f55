"""
Services package for FoMEMO
Contains the prior, model, training, acquisition, benchmark and metric services
"""
