"""Queueing-network dimensioning and simulation of a slice orchestration system."""
