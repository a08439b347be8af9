"""Decentralized NMPC stack for cooperative transport of a rigidly grasped object."""

__version__ = "0.1.0"
