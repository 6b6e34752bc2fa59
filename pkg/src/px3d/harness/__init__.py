"""Experiment plumbing: file formats, configs, checkpoints, rendering, CLI."""
