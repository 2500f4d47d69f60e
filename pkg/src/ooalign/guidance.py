"""Pluggable semantic-objective providers and the scorer wire protocol.

A provider scores rendered views against a text prompt or reference image and
(optionally) returns d(score)/d(pixel) images aligned with the RGBA views.
Three implementations ship here:

  * ``null``: score 0, zero gradients (geometry-only runs)
  * ``silhouette``: negative mean squared error between each view's alpha
                      channel and a stored target silhouette; fully offline
  * ``external``: length-prefixed JSON over TCP to a scorer service

The external wire format sends float32 RGB (alpha pre-composited over white)
and receives per-pixel RGB gradients, which are chain-ruled back into
RGBA-space gradients here so the rest of the pipeline never changes.
"""

from __future__ import annotations

import base64
import json
import os
import socket
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import GuidanceError, ScorerProtocolError, ScorerUnavailableError
from .render import BACKGROUND_RGB, RenderedView

SCORER_ADDR_ENV = "OOALIGN_SCORER_ADDR"
DEFAULT_TIMEOUT_S = 30.0
MAX_MESSAGE_BYTES = 1 << 30


@dataclass(frozen=True)
class GuidanceTarget:
    kind: str  # "text" | "image"
    prompt: Optional[str] = None
    reference_image: Optional[np.ndarray] = None  # (H, W, 3) float in [0, 1]

    def __post_init__(self):
        if self.kind not in ("text", "image"):
            raise GuidanceError(f"unknown guidance target kind '{self.kind}'")
        has_prompt = self.prompt is not None
        has_image = self.reference_image is not None
        if self.kind == "text" and (not has_prompt or has_image):
            raise GuidanceError("text target must carry exactly a prompt")
        if self.kind == "image" and (not has_image or has_prompt):
            raise GuidanceError("image target must carry exactly a reference image")
        if has_image:
            img = np.ascontiguousarray(self.reference_image, dtype=np.float64)
            if img.ndim != 3 or img.shape[2] != 3:
                raise GuidanceError("reference_image must be (H, W, 3)")
            object.__setattr__(self, "reference_image", img)

    @classmethod
    def text(cls, prompt: str) -> "GuidanceTarget":
        return cls(kind="text", prompt=prompt)

    @classmethod
    def image(cls, reference_image) -> "GuidanceTarget":
        return cls(kind="image", reference_image=np.asarray(reference_image, dtype=np.float64))


@dataclass(frozen=True)
class GuidanceResult:
    per_view_scores: list[float]
    per_view_pixel_grads: Optional[list[np.ndarray]]  # (H, W, 4) each, or None
    provider_id: str

    def __post_init__(self):
        if not all(np.isfinite(s) for s in self.per_view_scores):
            raise GuidanceError("non-finite guidance score")


def clip_loss_from_scores(result: GuidanceResult) -> float:
    """Semantic loss: negative mean of the per-view scores."""
    scores = result.per_view_scores
    if not scores:
        raise GuidanceError("no scores to aggregate")
    return -float(np.mean(scores))


# ---------------------------------------------------------------------------
# wire encoding (length-prefixed canonical JSON; f32 little-endian images)
# ---------------------------------------------------------------------------


def encode_image_payload(img: np.ndarray) -> dict:
    """float image (H, W, 3) -> {w, h, rgb_base64_f32_rowmajor}."""
    arr = np.ascontiguousarray(img, dtype="<f4")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ScorerProtocolError(f"image payload must be (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    return {"w": w, "h": h, "rgb_base64_f32_rowmajor": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_image_payload(d: dict) -> np.ndarray:
    try:
        w, h = int(d["w"]), int(d["h"])
        raw = base64.b64decode(d["rgb_base64_f32_rowmajor"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ScorerProtocolError(f"malformed image payload: {exc}") from exc
    expected = w * h * 3 * 4
    if len(raw) != expected:
        raise ScorerProtocolError(f"image payload has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, 3).astype(np.float64)


def target_to_wire(target: GuidanceTarget) -> dict:
    if target.kind == "text":
        return {"kind": "text", "prompt": target.prompt}
    return {"kind": "image", "reference_image": encode_image_payload(target.reference_image)}


def target_from_wire(d: dict) -> GuidanceTarget:
    kind = d.get("kind")
    if kind == "text":
        return GuidanceTarget.text(d["prompt"])
    if kind == "image":
        return GuidanceTarget.image(decode_image_payload(d["reference_image"]))
    raise ScorerProtocolError(f"unknown target kind {kind!r}")


def encode_message(obj: dict) -> bytes:
    """Canonical JSON (sorted keys, compact separators) with a 4-byte
    big-endian length prefix."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(payload)) + payload


def decode_message(data: bytes) -> dict:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ScorerProtocolError(f"malformed JSON message: {exc}") from exc
    if not isinstance(obj, dict) or "type" not in obj:
        raise ScorerProtocolError("message is not an object with a 'type' field")
    return obj


def write_message(sock: socket.socket, obj: dict) -> None:
    sock.sendall(encode_message(obj))


def read_message(sock: socket.socket) -> dict:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length > MAX_MESSAGE_BYTES:
        raise ScorerProtocolError(f"message length {length} exceeds limit")
    return decode_message(_recv_exact(sock, length))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout as exc:
            raise ScorerUnavailableError("scorer timed out") from exc
        if not chunk:
            raise ScorerUnavailableError("scorer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def view_to_scorer_rgb(view: RenderedView) -> np.ndarray:
    """What crosses the wire: RGB composited over white, float in [0, 1]."""
    return view.composited_rgb()


def rgb_grads_to_rgba(grad_rgb: np.ndarray, view: RenderedView) -> np.ndarray:
    """Chain-rule scorer gradients (w.r.t. composited RGB) back to RGBA space.

    comp = alpha * rgb + (1 - alpha) * white
      =>  d/d rgb   = g * alpha
          d/d alpha = sum_c g_c * (rgb_c - white_c)
    """
    alpha = view.rgba[..., 3:4]
    rgb = view.rgba[..., :3]
    white = np.asarray(BACKGROUND_RGB)
    out = np.zeros_like(view.rgba)
    out[..., :3] = grad_rgb * alpha
    out[..., 3] = np.einsum("hwc,hwc->hw", grad_rgb, rgb - white)
    return out


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------


class NullProvider:
    """Scores everything 0 with zero gradients; geometry-only optimization."""

    provider_id = "null"

    def evaluate(self, target: GuidanceTarget, views: Sequence[RenderedView], want_grads: bool) -> GuidanceResult:
        grads = None
        if want_grads:
            grads = [np.zeros_like(v.rgba) for v in views]
        return GuidanceResult([0.0] * len(views), grads, self.provider_id)

    def close(self):
        pass


class SilhouetteProvider:
    """Offline synthetic objective: score_i = -mean((alpha_i - target_i)^2).

    ``target_alphas`` holds one silhouette per view index (constructed by
    rendering a reference pose through the same camera rig). A single
    silhouette may be broadcast across all views.
    """

    provider_id = "silhouette"

    def __init__(self, target_alphas: Sequence[np.ndarray]):
        self.target_alphas = [np.asarray(a, dtype=np.float64) for a in target_alphas]
        if not self.target_alphas:
            raise GuidanceError("silhouette provider needs at least one target image")

    @classmethod
    def from_views(cls, views: Sequence[RenderedView]) -> "SilhouetteProvider":
        return cls([v.rgba[..., 3] for v in views])

    def evaluate(self, target: GuidanceTarget, views: Sequence[RenderedView], want_grads: bool) -> GuidanceResult:
        scores = []
        grads = [] if want_grads else None
        for i, view in enumerate(views):
            ref = self.target_alphas[i % len(self.target_alphas)]
            alpha = view.rgba[..., 3]
            if ref.shape != alpha.shape:
                raise GuidanceError(
                    f"silhouette target shape {ref.shape} != view alpha shape {alpha.shape}"
                )
            diff = alpha - ref
            scores.append(-float(np.mean(diff * diff)))
            if want_grads:
                g = np.zeros_like(view.rgba)
                g[..., 3] = -2.0 * diff / diff.size
                grads.append(g)
        return GuidanceResult(scores, grads, self.provider_id)

    def close(self):
        pass


class ExternalProvider:
    """Client for the scorer wire protocol over a local TCP socket.

    One pooled connection per provider instance (optimizer restarts create
    their own instances); requests on a connection are serialized. Connect
    and read failures raise ScorerUnavailableError (retriable, one automatic
    retry with reconnect); malformed responses raise ScorerProtocolError.
    """

    def __init__(self, address: Optional[str] = None, timeout_s: float = DEFAULT_TIMEOUT_S):
        addr = address or os.environ.get(SCORER_ADDR_ENV)
        if not addr:
            raise ScorerUnavailableError(
                f"no scorer address: pass one or set {SCORER_ADDR_ENV} (host:port)"
            )
        host, _, port = addr.rpartition(":")
        if not host or not port.isdigit():
            raise ScorerUnavailableError(f"bad scorer address '{addr}', expected host:port")
        self.host, self.port = host, int(port)
        self.timeout_s = timeout_s
        self.provider_id = f"external:{host}:{port}"
        self._sock: Optional[socket.socket] = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout_s)
            except OSError as exc:
                raise ScorerUnavailableError(f"cannot reach scorer at {self.host}:{self.port}: {exc}") from exc
        return self._sock

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def _roundtrip(self, request: dict) -> dict:
        try:
            sock = self._connect()
            write_message(sock, request)
            return read_message(sock)
        except ScorerUnavailableError:
            self.close()
            raise
        except OSError as exc:
            self.close()
            raise ScorerUnavailableError(f"scorer connection failed: {exc}") from exc

    def evaluate(self, target: GuidanceTarget, views: Sequence[RenderedView], want_grads: bool) -> GuidanceResult:
        if not views:
            raise GuidanceError("need at least one view")
        request = {
            "type": "score_request",
            "target": target_to_wire(target),
            "views": [encode_image_payload(view_to_scorer_rgb(v)) for v in views],
            "want_grads": bool(want_grads),
        }
        try:
            response = self._roundtrip(request)
        except ScorerUnavailableError:
            response = self._roundtrip(request)  # one retry on a fresh connection

        if response.get("type") == "error":
            raise ScorerProtocolError(
                f"scorer error ({response.get('error_kind', 'unknown')}): {response.get('message', '')}"
            )
        if response.get("type") != "score_response":
            raise ScorerProtocolError(f"unexpected message type {response.get('type')!r}")
        scores = response.get("scores")
        if not isinstance(scores, list) or len(scores) != len(views):
            raise ScorerProtocolError("score count does not match view count")
        scores = [float(s) for s in scores]

        grads = None
        if want_grads:
            raw = response.get("grads")
            if not isinstance(raw, list) or len(raw) != len(views):
                raise ScorerProtocolError("gradient count does not match view count")
            grads = []
            for payload, view in zip(raw, views):
                g_rgb = decode_image_payload(payload)
                if g_rgb.shape != view.rgba[..., :3].shape:
                    raise ScorerProtocolError("gradient image shape mismatch")
                grads.append(rgb_grads_to_rgba(g_rgb, view))
        return GuidanceResult(scores, grads, self.provider_id)


def evaluate(provider, target: GuidanceTarget, views: Sequence[RenderedView], want_grads: bool) -> GuidanceResult:
    """Score views with any provider; validates the result contract."""
    if not views:
        raise GuidanceError("need at least one view")
    result = provider.evaluate(target, views, want_grads)
    if len(result.per_view_scores) != len(views):
        raise GuidanceError("provider returned wrong number of scores")
    if want_grads:
        if result.per_view_pixel_grads is None or len(result.per_view_pixel_grads) != len(views):
            raise GuidanceError("provider returned wrong number of gradient images")
        for g, v in zip(result.per_view_pixel_grads, views):
            if g.shape != v.rgba.shape:
                raise GuidanceError(f"gradient shape {g.shape} != view shape {v.rgba.shape}")
    return result


def make_provider(name: str, **kwargs):
    if name == "null":
        return NullProvider()
    if name == "silhouette":
        return SilhouetteProvider(**kwargs)
    if name == "external":
        return ExternalProvider(**kwargs)
    raise GuidanceError(f"unknown guidance provider '{name}'")
