"""Semantic drivable-space estimation: factor-graph SLAM with implicit lane-line
factors, a sigmoid potential field over the graph, and an MPC planner on top."""

__version__ = "0.1.0"
