"""Cached real-to-complex transforms (FFTW when available, scipy otherwise)."""
from __future__ import annotations

import os
import threading

import numpy as np
import scipy.fft

try:
    import pyfftw
except ImportError:  # pragma: no cover - exercised only without pyfftw
    pyfftw = None

# FFTW_MEASURE times candidate algorithms and may pick different ones from run
# to run, which breaks bit-identical reruns; planning effort is opt-in.
_EFFORTS = ("FFTW_ESTIMATE", "FFTW_MEASURE", "FFTW_PATIENT")


def planner_effort() -> str:
    """Planner flag from ``AGGDIFF_FFTW_EFFORT`` (default ``FFTW_ESTIMATE``)."""
    e = os.environ.get("AGGDIFF_FFTW_EFFORT", "FFTW_ESTIMATE").upper()
    return e if e in _EFFORTS else "FFTW_ESTIMATE"


def n_threads() -> int:
    """Worker cap from ``AGGDIFF_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("AGGDIFF_THREADS", "1")))
    except ValueError:
        return 1


class RealFFT:
    """Forward/inverse real FFT of a fixed shape.

    FFTW plans own their input/output buffers, so one plan must not be driven
    from two threads at once; the lock serialises calls.
    """

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)
        self.lock = threading.RLock()
        self._fwd = self._inv = None
        self._corner: tuple[int, ...] | None = None
        if pyfftw is not None:
            effort = planner_effort()
            a = pyfftw.empty_aligned(self.shape, dtype="float64")
            self._fwd = pyfftw.builders.rfftn(a, planner_effort=effort, threads=n_threads())
            b = pyfftw.empty_aligned(self._fwd.output_shape, dtype="complex128")
            self._inv = pyfftw.builders.irfftn(b, s=self.shape, planner_effort=effort, threads=n_threads())
            self._fwd.input_array[...] = 0.0

    @property
    def spectral_shape(self) -> tuple[int, ...]:
        return self.shape[:-1] + (self.shape[-1] // 2 + 1,)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Transform of ``x`` zero-padded (at the high end) to ``shape``."""
        if self._fwd is None:
            if x.shape != self.shape:
                x = np.pad(x, [(0, s - e) for s, e in zip(self.shape, x.shape)])
            return scipy.fft.rfftn(x, workers=n_threads())
        with self.lock:
            buf = self._fwd.input_array
            if x.shape == self.shape:
                buf[...] = x
                self._corner = None
            else:
                # the zero tail survives between calls of the same corner shape
                if self._corner != x.shape:
                    buf[...] = 0.0
                buf[tuple(slice(0, e) for e in x.shape)] = x
                self._corner = x.shape
            return self._fwd().copy()

    def inverse(self, X: np.ndarray, crop: tuple[int, ...] | None = None) -> np.ndarray:
        """Inverse transform, optionally keeping only the low corner ``crop``."""
        if self._inv is None:
            y = scipy.fft.irfftn(X, s=self.shape, workers=n_threads())
        else:
            with self.lock:
                self._inv.input_array[...] = X
                y = self._inv()
        return self._crop(y, crop)

    def inverse_with(self, fill, crop: tuple[int, ...] | None = None) -> np.ndarray:
        """Inverse transform of a spectrum written in place by ``fill(buffer)``.

        Avoids a temporary spectral array when the caller can compute the
        product straight into the transform input.
        """
        if self._inv is None:
            X = np.empty(self.spectral_shape, dtype=complex)
            fill(X)
            return self._crop(scipy.fft.irfftn(X, s=self.shape, workers=n_threads()), crop)
        with self.lock:
            fill(self._inv.input_array)
            return self._crop(self._inv(), crop)

    @staticmethod
    def _crop(y: np.ndarray, crop) -> np.ndarray:
        if crop is not None:
            y = y[tuple(slice(0, c) for c in crop)]
        return np.array(y, copy=True)


_CACHE: dict[tuple[int, ...], RealFFT] = {}
_CACHE_LOCK = threading.Lock()


def plan(shape: tuple[int, ...]) -> RealFFT:
    with _CACHE_LOCK:
        p = _CACHE.get(tuple(shape))
        if p is None:
            p = _CACHE[tuple(shape)] = RealFFT(shape)
        return p
