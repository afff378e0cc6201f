"""Part captioning: multi-view renders, prompt construction, and a
chat-completions client for an external multimodal LLM.

The core pipeline never depends on this module at run time; it only
rewrites library manifest captions. All tests run against a local stub.
"""
from __future__ import annotations

import base64
import io
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import requests

from .geometry import GeometryError, PointCloud
from .library import ComponentLibrary, manifest_rows

API_KEY_ENV = "PARTFORGE_MLLM_API_KEY"

DIVERSITY_INSTRUCTION = (
    "Use as many distinct descriptive phrases and words as possible."
)

# view axis, sign, and the two image axes (u right, v up) per camera id
_VIEWS = [
    (0, +1, 1, 2),  # +X
    (0, -1, 1, 2),  # -X
    (1, +1, 0, 2),  # +Y
    (1, -1, 0, 2),  # -Y
    (2, +1, 0, 1),  # +Z
    (2, -1, 0, 1),  # -Z
]


class CaptionerError(RuntimeError):
    pass


@dataclass
class ViewImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8 grayscale
    camera_id: int  # 1..6

    def to_png_bytes(self) -> bytes:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="L").save(buf, format="PNG")
        return buf.getvalue()


@dataclass
class CaptionJob:
    part_id: str
    views: list[ViewImage]
    shape_caption: str
    part_type: str
    retry_budget: int = 3
    response: Optional[str] = None


def render_views(cloud: PointCloud, resolution: int = 64) -> list[ViewImage]:
    """Orthographic point splats from the six axis-aligned directions.

    The cloud is centered and scaled to fill 90% of the frame; when several
    points land on one pixel the nearest to the camera wins, drawn brighter
    the nearer it is.
    """
    if len(cloud) == 0:
        raise GeometryError("render_views: empty cloud")
    pts = cloud.points
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = (hi - lo).max()
    if scale == 0:
        scale = 1.0
    norm = (pts - center) / scale * 0.9  # coords now within [-0.45, 0.45]
    images = []
    for cam, (axis, sign, u_axis, v_axis) in enumerate(_VIEWS, start=1):
        depth = -sign * norm[:, axis]  # smaller = nearer to the camera
        u = np.clip(((norm[:, u_axis] + 0.5) * resolution).astype(int), 0, resolution - 1)
        v = np.clip(((0.5 - norm[:, v_axis]) * resolution).astype(int), 0, resolution - 1)
        zbuf = np.full((resolution, resolution), np.inf)
        img = np.zeros((resolution, resolution), dtype=np.uint8)
        shade = np.clip(255 - (depth + 0.45) / 0.9 * 200, 55, 255).astype(np.uint8)
        for k in range(len(pts)):
            if depth[k] < zbuf[v[k], u[k]]:
                zbuf[v[k], u[k]] = depth[k]
                img[v[k], u[k]] = shade[k]
        images.append(ViewImage(resolution, resolution, img, cam))
    return images


def build_prompt(job: CaptionJob) -> str:
    """Caption-request text: names the part type, quotes the shape-level
    caption, and asks for vocabulary diversity."""
    return (
        f"These six images show the {job.part_type} part of a 3D shape.\n"
        f"The whole shape is described as: {job.shape_caption}\n"
        f"Write one short caption for just the {job.part_type}. "
        f"{DIVERSITY_INSTRUCTION}"
    )


@dataclass
class EndpointConfig:
    url: str
    model: str = "llava"
    api_key_env: str = API_KEY_ENV
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 1.0

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise CaptionerError(f"missing credential: set {self.api_key_env}")
        return key


def _chat_payload(job: CaptionJob, model: str) -> dict:
    content: list[dict] = [{"type": "text", "text": build_prompt(job)}]
    for view in job.views:
        b64 = base64.b64encode(view.to_png_bytes()).decode("ascii")
        content.append(
            {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}
        )
    return {"model": model, "messages": [{"role": "user", "content": content}]}


def request_caption(job: CaptionJob, endpoint: EndpointConfig) -> str:
    """One chat completion with bounded retries and exponential backoff.

    Retries on 429/5xx/timeouts; auth failures and malformed bodies are
    terminal.
    """
    headers = {
        "Authorization": f"Bearer {endpoint.api_key()}",
        "Content-Type": "application/json",
    }
    payload = _chat_payload(job, endpoint.model)
    attempts = 0
    while True:
        try:
            resp = requests.post(endpoint.url, json=payload, headers=headers,
                                 timeout=endpoint.timeout)
        except requests.RequestException as exc:
            if attempts >= endpoint.max_retries:
                raise CaptionerError(f"job {job.part_id}: request failed: {exc}") from exc
            time.sleep(endpoint.backoff_base * 2**attempts)
            attempts += 1
            continue
        if resp.status_code in (401, 403):
            raise CaptionerError(f"job {job.part_id}: authentication failed ({resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            if attempts >= endpoint.max_retries:
                raise CaptionerError(
                    f"job {job.part_id}: gave up after {attempts} retries "
                    f"(last status {resp.status_code})"
                )
            time.sleep(endpoint.backoff_base * 2**attempts)
            attempts += 1
            continue
        if resp.status_code != 200:
            raise CaptionerError(f"job {job.part_id}: unexpected status {resp.status_code}")
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise CaptionerError(f"job {job.part_id}: malformed response body") from exc
        text = (text or "").strip()
        if not text:
            raise CaptionerError(f"job {job.part_id}: empty caption in response")
        job.response = text
        return text


@dataclass
class CaptionRunState:
    """Completed jobs persisted to disk so a crashed run can resume."""

    path: Path
    completed: dict[str, str] = field(default_factory=dict)

    @classmethod
    def open(cls, path) -> "CaptionRunState":
        path = Path(path)
        state = cls(path)
        if path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    row = json.loads(line)
                    state.completed[row["part_id"]] = row["caption"]
        return state

    def record(self, part_id: str, caption: str) -> None:
        self.completed[part_id] = caption
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"part_id": part_id, "caption": caption}) + "\n")


def caption_library(
    lib: ComponentLibrary,
    endpoint: EndpointConfig,
    library_dir,
    concurrency: int = 2,
    resolution: int = 64,
) -> list[str]:
    """Caption every record without an MLLM caption; resumable, bounded
    parallelism. Returns the list of terminal per-job errors (empty on
    full success); the manifest is rewritten with source=mllm captions.
    """
    from concurrent.futures import ThreadPoolExecutor

    library_dir = Path(library_dir)
    state = CaptionRunState.open(library_dir / "caption_state.jsonl")
    todo = [rec for rec in lib.all_records()
            if rec.source != "mllm" and rec.part_id not in state.completed]
    errors: list[str] = []
    lock = threading.Lock()

    def run_job(rec):
        job = CaptionJob(
            part_id=rec.part_id,
            views=render_views(rec.cloud, resolution),
            shape_caption=rec.caption,
            part_type=rec.part_type,
        )
        try:
            caption = request_caption(job, endpoint)
        except CaptionerError as exc:
            with lock:
                errors.append(str(exc))
            return
        with lock:
            state.record(rec.part_id, caption)

    if todo:
        with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
            list(pool.map(run_job, todo))

    for rec in lib.all_records():
        if rec.part_id in state.completed:
            rec.caption = state.completed[rec.part_id]
            rec.source = "mllm"
    rows = [json.dumps(r, sort_keys=True) for r in manifest_rows(lib)]
    header = json.dumps({"version": "1"})
    (library_dir / "manifest.jsonl").write_text(
        "\n".join([header] + rows) + "\n", encoding="utf-8"
    )
    return errors
