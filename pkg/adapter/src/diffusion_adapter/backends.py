"""Generation backends: HTTP endpoint and deterministic offline mock.

Wire protocol (HTTP POST, JSON body):
    request:  {"prompt", "negative_prompt", "seed", "steps",
               "depth_png_base64"}
    response: {"image_png_base64"}

The mock backend stands in for a diffusion service when none is running:
it tints the conditioning depth map with a color derived from a hash of
the prompt, so outputs are deterministic, visually distinct per prompt,
and byte-identical across reruns.
"""

from __future__ import annotations

import base64
import hashlib
import io
import time
from dataclasses import dataclass

import requests
from PIL import Image


class BackendError(RuntimeError):
    pass


@dataclass
class GenerationRequest:
    prompt: str
    negative_prompt: str
    seed: int
    steps: int
    depth_png: bytes


@dataclass
class BackendSpec:
    kind: str = "mock"  # "mock" | "http"
    url: str = ""
    inference_steps: int = 15
    images_per_call: int = 1
    timeout: float = 30.0
    max_retries: int = 3

    def validate(self) -> None:
        if self.kind not in ("mock", "http"):
            raise BackendError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not self.url:
            raise BackendError("http backend requires a url")
        if self.inference_steps < 1:
            raise BackendError("inference steps must be >= 1")
        if self.max_retries < 0:
            raise BackendError("retries must be bounded and non-negative")


class MockBackend:
    """Offline stand-in: prompt-hash tint over the depth conditioning."""

    def __init__(self, spec: BackendSpec):
        self.spec = spec
        self.calls = 0

    def generate(self, request: GenerationRequest) -> bytes:
        self.calls += 1
        digest = hashlib.sha256(request.prompt.encode("utf-8")).digest()
        tint = tuple(0.35 + 0.65 * (b / 255.0) for b in digest[:3])
        with Image.open(io.BytesIO(request.depth_png)) as im:
            gray = im.convert("L")
            channels = [gray.point([int(c * v) for v in range(256)])
                        for c in tint]
        out = Image.merge("RGB", channels)
        buf = io.BytesIO()
        out.save(buf, format="PNG")
        return buf.getvalue()


class HttpBackend:
    """JSON-over-HTTP client with bounded retries and a timeout."""

    def __init__(self, spec: BackendSpec, session: requests.Session | None = None):
        spec.validate()
        self.spec = spec
        self.session = session or requests.Session()
        self.calls = 0

    def generate(self, request: GenerationRequest) -> bytes:
        payload = {
            "prompt": request.prompt,
            "negative_prompt": request.negative_prompt,
            "seed": request.seed,
            "steps": request.steps,
            "depth_png_base64": base64.b64encode(request.depth_png).decode("ascii"),
        }
        last_error = None
        for attempt in range(self.spec.max_retries + 1):
            try:
                self.calls += 1
                response = self.session.post(self.spec.url, json=payload,
                                             timeout=self.spec.timeout)
                if response.status_code != 200:
                    raise BackendError(f"backend returned HTTP {response.status_code}")
                body = response.json()
                return base64.b64decode(body["image_png_base64"])
            except (requests.RequestException, BackendError, KeyError, ValueError) as e:
                last_error = e
                if attempt < self.spec.max_retries:
                    time.sleep(min(0.1 * 2 ** attempt, 2.0))
        raise BackendError(f"exhausted {self.spec.max_retries} retries: {last_error}")


def make_backend(spec: BackendSpec):
    spec.validate()
    if spec.kind == "mock":
        return MockBackend(spec)
    return HttpBackend(spec)
