"""Optimal ambulance stationing and dispatch simulation.

Pipeline: build a grid over the city, ingest call logs, fit Poisson demand
and travel-time calibration, solve the stochastic and robust stationing
programs, and evaluate deployments with a seeded discrete-event simulator.
"""

__version__ = "0.1.0"
