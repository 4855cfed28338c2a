"""Planar rigid-body helpers shared by the graph, optimizer and simulator."""

from __future__ import annotations

import numpy as np


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def compose(pose, delta) -> np.ndarray:
    """Return ``pose (+) delta`` for poses given as (x, y, theta)."""
    x, y, th = pose
    dx, dy, dth = delta
    c, s = np.cos(th), np.sin(th)
    return np.array([x + c * dx - s * dy, y + s * dx + c * dy, wrap_angle(th + dth)])


def between(pose_a, pose_b) -> np.ndarray:
    """Relative pose of ``pose_b`` expressed in the frame of ``pose_a``."""
    xa, ya, tha = pose_a
    xb, yb, thb = pose_b
    c, s = np.cos(tha), np.sin(tha)
    dx, dy = xb - xa, yb - ya
    return np.array([c * dx + s * dy, -s * dx + c * dy, wrap_angle(thb - tha)])


def transform_points(pose, points) -> np.ndarray:
    """Map points from the frame of ``pose`` into the parent frame."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return pts @ rot(pose[2]).T + np.asarray(pose[:2], dtype=float)


def inverse_transform_points(pose, points) -> np.ndarray:
    """Express parent-frame points in the frame of ``pose``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return (pts - np.asarray(pose[:2], dtype=float)) @ rot(pose[2])
