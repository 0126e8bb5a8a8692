"""Hyperglycemia screening from single-lead ECG heartbeats with a CBAM-CNN.

Modules: ``signal`` (filtering, R peaks, segments), ``tensor`` (autodiff),
``model`` (CBAM-CNN), ``cohort`` (splits and synthetic cohorts),
``train``, ``evaluation``, ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
