"""Passive non-line-of-sight 3D reconstruction from penumbra photographs."""
