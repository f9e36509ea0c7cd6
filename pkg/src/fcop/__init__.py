"""Focal length estimation from monocular depth and category-level object coordinates."""
