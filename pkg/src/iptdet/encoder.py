"""Frame-level feature backends.

Two backends share one contract: 13 layer outputs (CNN front-end + 12
transformer layers), 75 Hz, 768 dims, for a 5 s / 24 kHz input. The
pretrained backend wraps an SSL checkpoint on disk; the stub backend is a
deterministic spectral-energy projection used for tests and toy training.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .dataset import WINDOW_SAMPLES

N_LAYERS = 13
FEATURE_DIM = 768
FRAME_RATE = 75.0
HOP = 320  # 24000 / 75
STUB_N_TIME = WINDOW_SAMPLES // HOP  # 375


class BackendError(RuntimeError):
    """Encoder backend unavailable or misconfigured."""


class ContractError(ValueError):
    """Input violates the encoder's shape contract."""


@dataclass
class LayerStack:
    """All per-layer feature sequences for one window: (13, n_time, 768)."""

    layers: torch.Tensor
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        if self.layers.ndim != 3 or self.layers.shape[0] != N_LAYERS:
            raise ContractError(f"expected (13, n_time, 768), got {tuple(self.layers.shape)}")
        if self.layers.shape[2] != FEATURE_DIM:
            raise ContractError(f"feature dim must be {FEATURE_DIM}")

    @property
    def n_time(self) -> int:
        return self.layers.shape[1]


class LayerWeights(nn.Module):
    """13 learnable scalars, softmax-normalized before summation."""

    def __init__(self):
        super().__init__()
        self.raw = nn.Parameter(torch.zeros(N_LAYERS))

    def normalized(self) -> torch.Tensor:
        return torch.softmax(self.raw, dim=0)

    def forward(self, layers: torch.Tensor) -> torch.Tensor:
        """Collapse a (13, ..., 768) stack to (..., 768)."""
        if layers.shape[0] != N_LAYERS:
            raise ContractError(f"expected {N_LAYERS} layers, got {layers.shape[0]}")
        w = self.normalized()
        return torch.tensordot(w, layers, dims=([0], [0]))


def weighted_sum(stack: LayerStack, weights: LayerWeights) -> torch.Tensor:
    """Softmax-weighted sum over the 13 layers -> (n_time, 768)."""
    return weights(stack.layers)


class StubEncoder:
    """Deterministic drop-in for the pretrained backbone.

    Frames the waveform at 75 Hz, computes log band energies, projects them
    to 768 dims with a seeded random matrix, and derives the 13 layers by
    per-layer deterministic scalings. Pure function of (waveform, seed).
    """

    name = "stub"
    n_bands = 64

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((self.n_bands, FEATURE_DIM)).astype(np.float32)
        self._proj /= np.sqrt(self.n_bands)
        # Per-layer diagonal perturbations around identity.
        self._layer_scale = (
            1.0 + 0.1 * rng.standard_normal((N_LAYERS, FEATURE_DIM)).astype(np.float32)
        )

    def encode(self, waveform: np.ndarray) -> LayerStack:
        waveform = np.asarray(waveform, dtype=np.float32)
        if waveform.shape != (WINDOW_SAMPLES,):
            raise ContractError(
                f"expected {WINDOW_SAMPLES} samples, got {waveform.shape}"
            )
        n_time = STUB_N_TIME
        win = 2 * HOP
        padded = np.pad(waveform, (0, win))
        frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::HOP][:n_time]
        spec = np.abs(np.fft.rfft(frames, axis=1)) ** 2  # (n_time, win//2+1)
        # Pool FFT bins into fixed bands.
        bins = spec.shape[1]
        edges = np.linspace(0, bins, self.n_bands + 1).astype(int)
        bands = np.add.reduceat(spec, edges[:-1], axis=1)
        feats = np.log1p(bands).astype(np.float32)
        # Standardize, then scale up so linear probes converge quickly
        # under the small finetuning learning rate.
        feats = 8.0 * (feats - feats.mean()) / (feats.std() + 1e-6)
        base = feats @ self._proj  # (n_time, 768)
        layers = base[None, :, :] * self._layer_scale[:, None, :]
        return LayerStack(torch.from_numpy(np.ascontiguousarray(layers)))

    def parameter_checksum(self) -> float:
        return float(np.abs(self._proj).sum() + np.abs(self._layer_scale).sum())

    def trainable_modules(self) -> list[nn.Module]:
        return []


class PretrainedEncoder:
    """Adapter over a pretrained SSL checkpoint directory.

    Expects a Hugging Face-style model dir (config + weights) reachable via
    ``checkpoint_dir`` or the ``IPT_ENCODER_DIR`` env var.
    """

    name = "pretrained"

    def __init__(self, checkpoint_dir: str | None = None):
        checkpoint_dir = checkpoint_dir or os.environ.get("IPT_ENCODER_DIR")
        if not checkpoint_dir or not os.path.isdir(checkpoint_dir):
            raise BackendError(
                "pretrained encoder checkpoint not found; set encoder.checkpoint_dir "
                "in the config or the IPT_ENCODER_DIR env var to a local model directory"
            )
        try:
            from transformers import AutoModel
        except ImportError as e:
            raise BackendError(
                "the pretrained backend needs the 'transformers' package "
                "(pip install iptdet[pretrained])"
            ) from e
        self.model = AutoModel.from_pretrained(checkpoint_dir, trust_remote_code=True)
        self.model.eval()

    def encode(self, waveform: np.ndarray) -> LayerStack:
        waveform = np.asarray(waveform, dtype=np.float32)
        if waveform.shape != (WINDOW_SAMPLES,):
            raise ContractError(f"expected {WINDOW_SAMPLES} samples, got {waveform.shape}")
        x = torch.from_numpy(waveform)[None, :]
        out = self.model(x, output_hidden_states=True)
        # hidden_states = CNN output + one entry per transformer layer.
        layers = torch.stack([h[0] for h in out.hidden_states], dim=0)
        if layers.shape[0] != N_LAYERS:
            raise BackendError(
                f"checkpoint produced {layers.shape[0]} layers, expected {N_LAYERS}"
            )
        return LayerStack(layers)

    def feature_extractor_parameters(self):
        fe = getattr(self.model, "feature_extractor", None)
        if fe is None:
            raise BackendError("checkpoint has no 'feature_extractor' submodule")
        return list(fe.parameters())

    def parameter_checksum(self) -> float:
        with torch.no_grad():
            return float(sum(p.abs().sum() for p in self.feature_extractor_parameters()))

    def trainable_modules(self) -> list[nn.Module]:
        return [self.model]


def set_extractor_frozen(backend, frozen: bool):
    """Exclude (or re-include) the CNN front-end from gradient updates.

    The transformer layers stay trainable either way. No-op on the stub
    backend, which has no learnable parameters.
    """
    if isinstance(backend, StubEncoder):
        logging.getLogger(__name__).info("stub backend has no extractor parameters; freeze ignored")
        return
    for p in backend.feature_extractor_parameters():
        p.requires_grad_(not frozen)


def make_backend(kind: str, seed: int = 0, checkpoint_dir: str | None = None):
    if kind == "stub":
        return StubEncoder(seed=seed)
    if kind == "pretrained":
        return PretrainedEncoder(checkpoint_dir)
    raise BackendError(f"unknown encoder backend {kind!r}")
