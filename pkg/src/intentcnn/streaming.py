"""Sliding-window online classification over a live frame stream.

A stream of per-frame channel readings is classified at every hop boundary:
the last ``window_frames`` frames (zero-front-filled while the stream is still
warming up) are standardized with the training-time statistics, zero-padded at
the tail up to the model's input length, and pushed through an inference-mode
forward pass.  Because the model evaluates each window in its own forward
pass, the emitted probabilities are bit-identical to calling the batch
predictor on the same standardized, padded window.

Wire formats:

* input — one line per frame, ``channels`` comma-separated decimal floats;
* output — one line per hop,
  ``frame_index,label,class_name,p_0,...,p_{K-1},warm_up``.

Malformed input lines produce a structured error record and are skipped (the
stream keeps running); a frame with the wrong channel count arriving through
the array interface is a hard stream error.
"""

from __future__ import annotations

import socket
import sys
from collections import deque
from dataclasses import dataclass

import numpy as np

from .dataset import StandardizationStats
from .errors import ConfigError, StreamError
from .model import Network

DEFAULT_WINDOW_FRAMES = 1000
DEFAULT_HOP_FRAMES = 100


@dataclass(frozen=True)
class WindowConfig:
    """Sliding-window geometry plus the fitted model and statistics it feeds."""

    network: Network
    stats: StandardizationStats
    window_frames: int = DEFAULT_WINDOW_FRAMES
    hop_frames: int = DEFAULT_HOP_FRAMES
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.window_frames < 1:
            raise ConfigError(f"window_frames must be >= 1, got {self.window_frames}")
        if not (1 <= self.hop_frames <= self.window_frames):
            raise ConfigError(f"hop_frames must lie in [1, window_frames], got "
                              f"{self.hop_frames} with window {self.window_frames}")
        if self.stats.channels != self.network.config.channels:
            raise StreamError(f"statistics cover {self.stats.channels} channels but "
                              f"the model expects {self.network.config.channels}")
        if self.window_frames > self.network.config.input_frames:
            raise ConfigError(f"window of {self.window_frames} frames cannot fit the "
                              f"model input of {self.network.config.input_frames}")
        if self.class_names is not None and \
                len(self.class_names) != self.network.num_classes:
            raise ConfigError(f"{len(self.class_names)} class names for "
                              f"{self.network.num_classes} classes")

    @property
    def channels(self) -> int:
        return self.network.config.channels

    def class_name(self, label: int) -> str:
        if self.class_names is not None:
            return self.class_names[label]
        return f"class{label}"


@dataclass(frozen=True)
class StreamPrediction:
    """One per-hop classification; frame_index is the last frame in the window."""

    frame_index: int
    label: int
    probs: np.ndarray
    warm_up: bool

    def __post_init__(self):
        total = float(np.sum(self.probs, dtype=np.float64))
        if abs(total - 1.0) > 1e-6:
            raise StreamError(f"probabilities sum to {total!r}, not 1")


@dataclass(frozen=True)
class StreamErrorRecord:
    """A skipped input line: position, reason, and the offending text."""

    line_number: int
    message: str
    raw: str


@dataclass(frozen=True)
class Window:
    """A raw (unstandardized) window; zeros front-fill during warm-up."""

    frame_index: int
    values: np.ndarray          # (channels, window_frames) float32
    real_frames: int            # trailing columns holding actual stream data

    @property
    def warm_up(self) -> bool:
        return self.real_frames < self.values.shape[1]


def window_extract(frame_buffer, cfg: WindowConfig) -> list[Window]:
    """All hop-aligned windows over a recorded buffer of shape (channels, frames).

    A window ends at every hop boundary (frames hop-1, 2*hop-1, ...); windows
    that start before frame 0 are front-filled with zeros.
    """
    buffer = np.asarray(frame_buffer, dtype=np.float32)
    if buffer.ndim != 2:
        raise StreamError(f"frame buffer must be (channels, frames), got shape "
                          f"{buffer.shape}")
    if buffer.shape[0] != cfg.channels:
        raise StreamError(f"frame buffer has {buffer.shape[0]} channels but the "
                          f"model expects {cfg.channels}")
    channels, total = buffer.shape
    window, hop = cfg.window_frames, cfg.hop_frames
    windows = []
    for end in range(hop - 1, total, hop):
        real = min(end + 1, window)
        values = np.zeros((channels, window), dtype=np.float32)
        values[:, window - real:] = buffer[:, end + 1 - real: end + 1]
        windows.append(Window(frame_index=end, values=values, real_frames=real))
    return windows


def classify_window(window: Window, cfg: WindowConfig) -> StreamPrediction:
    """Standardize, pad, and classify one window.

    Only the real (received) frames are standardized; warm-up front-fill and
    the tail padding stay exactly zero, matching training-time padding.
    """
    channels = cfg.channels
    input_frames = cfg.network.config.input_frames
    padded = np.zeros((channels, input_frames), dtype=np.float32)
    lo = cfg.window_frames - window.real_frames
    real = window.values[:, lo:].astype(np.float64)
    padded[:, lo:cfg.window_frames] = (
        (real - cfg.stats.mean[:, None]) / cfg.stats.std[:, None]
    ).astype(np.float32)
    probs = cfg.network.predict_proba(padded[None, :, :])[0]
    return StreamPrediction(frame_index=window.frame_index,
                            label=int(np.argmax(probs)),
                            probs=probs,
                            warm_up=window.warm_up)


class _StreamState:
    """Rolling frame buffer that fires a classification at each hop boundary."""

    def __init__(self, cfg: WindowConfig):
        self.cfg = cfg
        self.frames: deque[np.ndarray] = deque(maxlen=cfg.window_frames)
        self.count = 0

    def push(self, frame: np.ndarray) -> StreamPrediction | None:
        self.frames.append(frame)
        self.count += 1
        if self.count % self.cfg.hop_frames != 0:
            return None
        window_frames = self.cfg.window_frames
        real = len(self.frames)
        values = np.zeros((self.cfg.channels, window_frames), dtype=np.float32)
        values[:, window_frames - real:] = np.stack(self.frames, axis=1)
        window = Window(frame_index=self.count - 1, values=values, real_frames=real)
        return classify_window(window, self.cfg)


def parse_frame_line(text: str, channels: int) -> np.ndarray:
    """One wire-format line -> float32 channel vector; raises StreamError."""
    tokens = text.split(",")
    if len(tokens) != channels:
        raise StreamError(f"expected {channels} comma-separated values, got "
                          f"{len(tokens)}")
    try:
        return np.array([np.float32(token) for token in tokens], dtype=np.float32)
    except ValueError:
        raise StreamError("non-numeric value in frame") from None


def stream_classify(lines, cfg: WindowConfig):
    """Classify a text line stream; yields StreamPrediction and StreamErrorRecord.

    Blank lines are ignored.  A malformed line yields an error record and the
    frame is skipped — the frame counter does not advance, so window positions
    refer to frames actually accepted.
    """
    state = _StreamState(cfg)
    for line_number, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        try:
            frame = parse_frame_line(text, cfg.channels)
        except StreamError as exc:
            yield StreamErrorRecord(line_number=line_number, message=str(exc), raw=text)
            continue
        prediction = state.push(frame)
        if prediction is not None:
            yield prediction


def classify_frames(frames, cfg: WindowConfig):
    """Classify already-parsed frame vectors; wrong channel count is fatal."""
    state = _StreamState(cfg)
    for frame in frames:
        frame = np.asarray(frame, dtype=np.float32)
        if frame.shape != (cfg.channels,):
            raise StreamError(f"frame has shape {frame.shape}, expected "
                              f"({cfg.channels},)")
        prediction = state.push(frame)
        if prediction is not None:
            yield prediction


# ---------------------------------------------------------------------------
# wire formatting and sources
# ---------------------------------------------------------------------------

def format_prediction(prediction: StreamPrediction, cfg: WindowConfig) -> str:
    """``frame_index,label,class_name,p_0,...,p_{K-1},warm_up`` (no newline)."""
    probs = ",".join(f"{float(p):.9g}" for p in prediction.probs)
    return (f"{prediction.frame_index},{prediction.label},"
            f"{cfg.class_name(prediction.label)},{probs},"
            f"{1 if prediction.warm_up else 0}")


def format_error_record(record: StreamErrorRecord) -> str:
    """Error lines start with the literal field ``error`` so consumers can
    split them from predictions on the first comma-separated field."""
    return f"error,line={record.line_number},message={record.message}"


def open_line_source(source: str):
    """Line iterator for '-' (standard input) or 'tcp:HOST:PORT'."""
    if source == "-":
        return sys.stdin
    if source.startswith("tcp:"):
        parts = source.split(":")
        if len(parts) != 3:
            raise ConfigError(f"tcp source must look like tcp:HOST:PORT, got {source!r}")
        host, port_text = parts[1], parts[2]
        try:
            port = int(port_text)
        except ValueError:
            raise ConfigError(f"tcp port must be an integer, got {port_text!r}") from None
        try:
            conn = socket.create_connection((host, port))
        except OSError as exc:
            raise StreamError(f"cannot connect to {host}:{port}: {exc}") from exc
        return conn.makefile("r", encoding="utf-8")
    raise ConfigError(f"stream source must be '-' or 'tcp:HOST:PORT', got {source!r}")
