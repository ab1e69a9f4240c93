"""Client for an external promptable segmenter, plus an offline stub.

Wire protocol: POST <url>/segment with JSON
    {"image": <base64 PNG>, "points": [[u, v, 1], ...]?, "box": [u1, v1, u2, v2]?}
expecting
    {"mask_rle": {"size": [h, w], "counts": [...]}, "score": <float>}.

The stub app implements the same protocol and returns a disk around the
prompt so the whole pipeline runs without any real model.
"""

from __future__ import annotations

import base64
import json
import time

import httpx
import numpy as np

from .errors import BadResponse, SegmenterUnreachable
from .render import Mask, mask_from_png_bytes, mask_to_rle, rle_to_mask


def encode_request(image_png: bytes, points=None, box=None) -> bytes:
    """Canonical request bytes (sorted keys, no whitespace)."""
    payload: dict = {"image": base64.b64encode(image_png).decode("ascii")}
    if points is not None:
        payload["points"] = [[float(u), float(v), 1] for u, v in points]
    if box is not None:
        payload["box"] = [float(v) for v in box]
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


class SegmenterClient:
    """Small HTTP client with two retries and payload validation."""

    def __init__(self, url: str, timeout: float = 10.0, transport=None,
                 retries: int = 2, backoff: float = 0.25):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._transport = transport

    def segment(self, image_png: bytes, points=None, box=None) -> tuple[Mask, float]:
        if points is None and box is None:
            raise ValueError("need a point or box prompt")
        body = encode_request(image_png, points, box)
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                with httpx.Client(transport=self._transport, timeout=self.timeout) as client:
                    resp = client.post(
                        self.url + "/segment",
                        content=body,
                        headers={"content-type": "application/json"},
                    )
                if resp.status_code != 200:
                    raise BadResponse(f"segmenter returned HTTP {resp.status_code}")
                data = resp.json()
                break
            except BadResponse:
                raise
            except Exception as exc:  # connect/timeout/protocol errors
                last_exc = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
        else:
            raise SegmenterUnreachable(str(last_exc))

        if "mask_rle" not in data:
            raise BadResponse("response missing mask_rle")
        try:
            mask = rle_to_mask(data["mask_rle"])
        except Exception as exc:
            raise BadResponse(f"undecodable mask_rle: {exc}") from exc
        img = mask_from_png_bytes(image_png)
        if mask.values.shape != img.values.shape:
            raise BadResponse(
                f"mask {mask.values.shape} does not match image {img.values.shape}"
            )
        return mask, float(data.get("score", 0.0))


def stub_segmenter_app(radius_frac: float = 0.12):
    """FastAPI app implementing the wire protocol with a deterministic disk.

    The disk is centered on the mean of the point prompts (or the box
    center) with radius = radius_frac * min(image dims).
    """
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse

    app = FastAPI()

    @app.post("/segment")
    async def segment(request: Request):
        data = json.loads(await request.body())
        img = mask_from_png_bytes(base64.b64decode(data["image"]))
        h, w = img.values.shape
        if "points" in data and data["points"]:
            pts = np.asarray(data["points"], dtype=np.float64)[:, :2]
            cu, cv = pts[:, 0].mean(), pts[:, 1].mean()
        elif "box" in data:
            u1, v1, u2, v2 = data["box"]
            cu, cv = (u1 + u2) / 2.0, (v1 + v2) / 2.0
        else:
            return JSONResponse({"error": "no prompt"}, status_code=422)
        r = radius_frac * min(w, h)
        yy, xx = np.mgrid[0:h, 0:w]
        disk = (xx - cu) ** 2 + (yy - cv) ** 2 <= r * r
        rle = mask_to_rle(Mask(disk.astype(np.float64)))
        return JSONResponse({"mask_rle": rle, "score": 0.99})

    return app
