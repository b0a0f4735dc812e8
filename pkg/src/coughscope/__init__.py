"""Interpretable classification of cough recordings and symptom records.

Modules:

* ``signal_prep``: WAV I/O, resampling, loudness normalization, segmentation, framing
* ``features``: 22 per-frame acoustic features aggregated to 44-value vectors
* ``tabular``: symptom schema and the attentive (sparsemax-masked) encoder
* ``fusion``: cough MLP, fused classifier head and losses
* ``training``: deterministic training, evaluation and metrics
* ``interpret``: mask-based importances and symptom correlations
* ``synthgen``: synthetic labeled cough audio and symptom records
* ``pipeline`` / ``cli``: end-to-end workflows
"""

__version__ = "0.1.0"
