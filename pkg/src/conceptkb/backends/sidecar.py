"""Client for encoder sidecars speaking the newline-delimited JSON protocol.

Requests are single lines ``{"id", "op": "ground"|"score"|"embed", "image",
"prompt"}`` where ``image`` is base64-encoded PNG bytes or a filesystem path.
Responses carry the score plus, for ``ground``, attention tensors packed as
base64 little-endian float32 in row-major order; pre-reduced responses set
``reduced`` and omit the gradient. Responses may arrive out of order and are
matched back to their request by id. Error responses are
``{"id", "error"}``.
"""

from __future__ import annotations

import base64
import io
import json
import socket
import subprocess
import threading

import numpy as np
from PIL import Image

from ..corpus import RasterImage
from ..errors import BackendUnavailable, ShapeViolation
from ..relevance import AttentionStack, ReducedAttention, WeightedImage
from .base import BackendDescriptor, GroundingBackend, GroundingResult, as_raster


class StdioTransport:
    """Spawn the sidecar as a subprocess and talk over its stdio."""

    def __init__(self, cmd: list[str]):
        try:
            self.proc = subprocess.Popen(
                cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
            )
        except OSError as exc:
            raise BackendUnavailable(f"could not start sidecar {cmd!r}: {exc}") from exc

    def send_line(self, line: str) -> None:
        if self.proc.poll() is not None:
            raise BackendUnavailable("sidecar process exited")
        try:
            self.proc.stdin.write(line + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BackendUnavailable("sidecar stdin closed") from exc

    def recv_line(self) -> str:
        line = self.proc.stdout.readline()
        if line == "":
            raise BackendUnavailable("sidecar stdout closed")
        return line.rstrip("\n")

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()


class TcpTransport:
    def __init__(self, host: str, port: int, timeout: float = 60.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise BackendUnavailable(f"cannot reach sidecar at {host}:{port}: {exc}") from exc
        self._reader = self.sock.makefile("r", encoding="utf-8")
        self._writer = self.sock.makefile("w", encoding="utf-8")

    def send_line(self, line: str) -> None:
        try:
            self._writer.write(line + "\n")
            self._writer.flush()
        except OSError as exc:
            raise BackendUnavailable("sidecar connection lost") from exc

    def recv_line(self) -> str:
        try:
            line = self._reader.readline()
        except OSError as exc:
            raise BackendUnavailable("sidecar connection lost") from exc
        if line == "":
            raise BackendUnavailable("sidecar closed the connection")
        return line.rstrip("\n")

    def close(self) -> None:
        self.sock.close()


def encode_png_base64(image: RasterImage) -> str:
    mode = "L" if image.channels == 1 else "RGB"
    arr = image.pixels[:, :, 0] if image.channels == 1 else image.pixels
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_tensor(payload: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(payload)
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ShapeViolation(f"tensor payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


class SidecarBackend(GroundingBackend):
    """Grounding backend backed by a sidecar process or TCP endpoint.

    The descriptor is learned from the first ``ground`` response (the
    protocol has no handshake); ``patch_grid`` may be given explicitly,
    otherwise a square factorization of tokens-1 is assumed.
    """

    def __init__(self, transport, name: str = "sidecar", patch_grid: tuple[int, int] | None = None):
        self.transport = transport
        self._name = name
        self._patch_grid = patch_grid
        self._descriptor: BackendDescriptor | None = None
        self._lock = threading.Lock()
        self._pending: dict[str, dict] = {}
        self._next_id = 0

    @property
    def descriptor(self) -> BackendDescriptor:
        if self._descriptor is None:
            raise BackendUnavailable("sidecar descriptor unknown before the first ground call")
        return self._descriptor

    def close(self) -> None:
        self.transport.close()

    # -- protocol plumbing ---------------------------------------------------

    def _roundtrip(self, op: str, image: RasterImage | WeightedImage, prompt: str) -> dict:
        with self._lock:
            self._next_id += 1
            req_id = f"req-{self._next_id}"
            request = {
                "id": req_id,
                "op": op,
                "image": encode_png_base64(as_raster(image)),
                "prompt": prompt,
            }
            self.transport.send_line(json.dumps(request, ensure_ascii=False))
            while True:
                if req_id in self._pending:
                    response = self._pending.pop(req_id)
                else:
                    try:
                        response = json.loads(self.transport.recv_line())
                    except json.JSONDecodeError as exc:
                        raise BackendUnavailable(f"unparsable sidecar response: {exc}") from exc
                    if response.get("id") != req_id:
                        if response.get("id") is None:
                            raise BackendUnavailable(f"sidecar error: {response.get('error')}")
                        self._pending[response["id"]] = response
                        continue
                if "error" in response:
                    raise BackendUnavailable(f"sidecar error: {response['error']}")
                return response

    def _update_descriptor(self, layers: int, heads: int, tokens: int, reduced: bool) -> None:
        if self._descriptor is None:
            grid = self._patch_grid
            if grid is None:
                side = int(round((tokens - 1) ** 0.5))
                grid = (side, side) if side * side == tokens - 1 else (1, tokens - 1)
            self._descriptor = BackendDescriptor(
                name=self._name,
                layers=layers,
                heads=heads,
                tokens=tokens,
                patch_grid=grid,
                returns_reduced=reduced,
            )
        else:
            d = self._descriptor
            if (layers, heads, tokens, reduced) != (d.layers, d.heads, d.tokens, d.returns_reduced):
                raise ShapeViolation("sidecar changed its advertised shape between responses")

    # -- backend surface ------------------------------------------------------

    def ground(self, image: RasterImage, prompt: str) -> GroundingResult:
        resp = self._roundtrip("ground", image, prompt)
        try:
            layers, heads, tokens = int(resp["layers"]), int(resp["heads"]), int(resp["tokens"])
            reduced = bool(resp.get("reduced", False))
            score = float(resp["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"malformed ground response: {exc}") from exc
        self._update_descriptor(layers, heads, tokens, reduced)
        if reduced:
            abar = _decode_tensor(resp["attn"], (layers, tokens, tokens))
            attention: AttentionStack | ReducedAttention = ReducedAttention(abar=abar)
        else:
            if "grad" not in resp:
                raise ShapeViolation("non-reduced response must carry a gradient tensor")
            attn = _decode_tensor(resp["attn"], (layers, heads, tokens, tokens))
            grad = _decode_tensor(resp["grad"], (layers, heads, tokens, tokens))
            attention = AttentionStack(attn=attn, grad=grad)
        return GroundingResult(score=score, attention=attention)

    def score_pair(self, image: RasterImage | WeightedImage, text: str) -> float:
        resp = self._roundtrip("score", image, text)
        try:
            return float(resp["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"malformed score response: {exc}") from exc

    def embed_image(self, image: RasterImage | WeightedImage) -> np.ndarray:
        resp = self._roundtrip("embed", image, "")
        try:
            vec = np.asarray(resp["embedding"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"malformed embed response: {exc}") from exc
        norm = np.linalg.norm(vec)
        if vec.ndim != 1 or norm == 0 or abs(norm - 1.0) > 1e-3:
            raise ShapeViolation("sidecar embedding is not unit norm")
        return vec / norm
