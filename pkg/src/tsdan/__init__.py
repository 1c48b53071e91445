"""TS-DAN: temporal-shift dual-attention network for camera-based pulse and respiration rates.

Pure numpy/scipy.  The modules are usable on their own:

- ``numerics``: small reverse-mode autodiff tensor library with a gradient checker
- ``blocks``: temporal shift, spatial attention mask, ECA channel gate
- ``model``: the two-branch network and its baselines
- ``synth``: synthetic face-patch videos from a skin reflection model
- ``pipeline``: preprocessing and band-pass / FFT rate extraction
- ``metrics``: MAE, SNR and availability
- ``train``: optimization loop and evaluation protocol
- ``cli``: the ``tsdan`` command
"""

__version__ = "0.1.0"
