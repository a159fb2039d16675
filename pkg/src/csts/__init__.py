"""Audio-visual egocentric gaze anticipation with spatial-temporal separable fusion.

The package is organised as a small stack: an autodiff tensor core
(:mod:`csts.tensor`), an audio spectrogram frontend, transformer encoders,
the two fusion branches with their reweight merge, decoder heads and losses,
evaluation metrics, data/corpus tooling, a training harness, and a CLI.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, finite_diff_check, set_precision  # noqa: F401
