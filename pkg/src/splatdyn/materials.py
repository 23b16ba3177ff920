"""Material properties, stability caps and material reasoners."""
from __future__ import annotations

import base64
import dataclasses
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MATERIAL_TYPES = ("elastic", "snow", "sand")
MAX_YOUNGS_MODULUS = 1e8
MAX_POISSONS_RATIO = 0.49
DEFAULT_TEMPERATURE = 0.8


@dataclass(frozen=True)
class MaterialProperties:
    material_type: str
    density: float
    youngs_modulus: float
    poissons_ratio: float
    name: str = ""
    # plasticity parameters; only read for snow (theta_*, hardening) and sand (friction_angle)
    theta_c: float = 2.5e-2
    theta_s: float = 7.5e-3
    hardening: float = 10.0
    friction_angle: float = 30.0

    def __post_init__(self):
        if self.material_type not in MATERIAL_TYPES:
            raise ValueError(f"unknown material type {self.material_type!r}; "
                             f"expected one of {MATERIAL_TYPES}")
        for f in ("density", "youngs_modulus", "poissons_ratio"):
            v = float(getattr(self, f))
            if not math.isfinite(v):
                raise ValueError(f"{f} must be finite")
            object.__setattr__(self, f, v)

    def check(self):
        """Raise unless the invariants expected by the simulator hold."""
        if not self.density > 0:
            raise ValueError("density must be positive")
        if not 0 < self.youngs_modulus <= MAX_YOUNGS_MODULUS:
            raise ValueError(f"Young's modulus must lie in (0, {MAX_YOUNGS_MODULUS:g}]")
        if not -0.9 <= self.poissons_ratio <= MAX_POISSONS_RATIO:
            raise ValueError(f"Poisson's ratio must lie in [-0.9, {MAX_POISSONS_RATIO}]")
        return self

    def to_json(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def with_overrides(self, **kw):
        return dataclasses.replace(self, **kw)


def clamp_properties(props: MaterialProperties) -> MaterialProperties:
    if not props.density > 0:
        raise ValueError(f"density must be positive, got {props.density}")
    if not props.youngs_modulus > 0:
        raise ValueError(f"Young's modulus must be positive, got {props.youngs_modulus}")
    return dataclasses.replace(
        props,
        youngs_modulus=min(props.youngs_modulus, MAX_YOUNGS_MODULUS),
        poissons_ratio=min(props.poissons_ratio, MAX_POISSONS_RATIO),
    )


# keyword -> (type, density kg/m^3, E Pa, nu). Uncapped literature values; clamp_properties
# brings stiff entries (wood, metal) down to the simulator's limits.
STATIC_TABLE = {
    "elastic": ("elastic", 1000.0, 1.0e6, 0.3),
    "rubber": ("elastic", 1100.0, 5.0e6, 0.45),
    "snow": ("snow", 400.0, 1.4e5, 0.2),
    "sand": ("sand", 2200.0, 3.537e5, 0.3),
    "wood": ("elastic", 700.0, 1.1e10, 0.35),
    "metal": ("elastic", 7800.0, 2.0e11, 0.3),
    "plush": ("elastic", 300.0, 1.0e5, 0.3),
    "plant": ("elastic", 500.0, 2.0e6, 0.4),
}


def lookup_material(keyword: str) -> MaterialProperties:
    """First table key contained in ``keyword`` (case-insensitive); elastic otherwise."""
    text = keyword.lower()
    for key, (mtype, rho, E, nu) in STATIC_TABLE.items():
        if key in text:
            return MaterialProperties(mtype, rho, E, nu, name=keyword)
    mtype, rho, E, nu = STATIC_TABLE["elastic"]
    return MaterialProperties(mtype, rho, E, nu, name=keyword)


class ReasonerError(RuntimeError):
    pass


class ReasonerCountError(ReasonerError):
    pass


class ReasonerResponseError(ReasonerError):
    def __init__(self, message, payload):
        super().__init__(message)
        self.payload = payload


class StaticTableReasoner:
    """Offline reasoner: maps per-region keywords through STATIC_TABLE."""

    def __init__(self, region_names=None):
        self.region_names = list(region_names) if region_names else None

    def reason(self, full_image, sub_images):
        names = self.region_names or ["elastic"] * len(sub_images)
        if len(names) != len(sub_images):
            raise ReasonerCountError(
                f"{len(names)} region names for {len(sub_images)} sub-images")
        return [lookup_material(n) for n in names]


PROMPT = """\
The first image shows a complete object. Each following image shows one segmented part of it,
with everything else blacked out. For every part, infer the material it is made of and its
physical properties for a continuum simulation.

Answer only with JSON of the form:
{"materials": [{"group_id": <1-based part index>, "material_type": "elastic" | "snow" | "sand",
  "name": <short material name>, "density": <kg/m^3>, "youngs_modulus": <Pa>,
  "poissons_ratio": <dimensionless>}, ...]}
Return exactly one entry per part, in the same order as the part images.
"""


def encode_png(image) -> str:
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0 if arr.max() <= 1.0 else arr), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def parse_materials_payload(payload, expected=None):
    """Decode ``{"materials": [...]}`` into MaterialProperties ordered by group_id."""
    try:
        doc = json.loads(payload) if isinstance(payload, (str, bytes)) else payload
        entries = sorted(doc["materials"], key=lambda e: int(e["group_id"]))
        props = [
            MaterialProperties(
                material_type=str(e["material_type"]).lower(),
                density=float(e["density"]),
                youngs_modulus=float(e["youngs_modulus"]),
                poissons_ratio=float(e["poissons_ratio"]),
                name=str(e.get("name", "")),
            )
            for e in entries
        ]
    except (ValueError, KeyError, TypeError) as exc:
        raise ReasonerResponseError(f"unparseable reasoner response: {exc}", payload) from exc
    if expected is not None and len(props) != expected:
        raise ReasonerCountError(f"reasoner returned {len(props)} materials for {expected} regions")
    return props


class HttpReasoner:
    """JSON-over-HTTP client for a remote vision-language reasoner."""

    def __init__(self, url=None, api_key=None, temperature=DEFAULT_TEMPERATURE,
                 timeout=60.0, retries=2, backoff=1.0, prompt=PROMPT, session=None):
        self.url = url or os.environ.get("REASONER_URL")
        if not self.url:
            raise ValueError("no reasoner URL given and REASONER_URL is unset")
        self.api_key = api_key if api_key is not None else os.environ.get("REASONER_API_KEY")
        self.temperature = temperature
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.prompt = prompt
        self.session = session

    def _post(self, body):
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        post = self.session.post if self.session is not None else requests.post
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = post(self.url, data=json.dumps(body), headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.text
            except requests.RequestException as exc:
                last = exc
                log.warning("reasoner request failed (attempt %d/%d): %s",
                            attempt + 1, self.retries + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
        raise ReasonerError(f"reasoner unreachable after {self.retries + 1} attempts: {last}")

    def reason(self, full_image, sub_images):
        body = {
            "prompt": self.prompt,
            "images": [encode_png(full_image)] + [encode_png(s) for s in sub_images],
            "temperature": self.temperature,
        }
        return parse_materials_payload(self._post(body))


def reason_materials(full_image, seg_map, reasoner):
    """One clamped MaterialProperties per region of ``seg_map``, in region order."""
    image = np.asarray(full_image)
    if seg_map.region_count < 1:
        raise ValueError("segmentation map has no regions")
    subs = [image * (seg_map.labels == m)[..., None].astype(image.dtype)
            for m in range(1, seg_map.region_count + 1)]
    props = reasoner.reason(image, subs)
    if len(props) != len(subs):
        raise ReasonerCountError(
            f"reasoner returned {len(props)} materials for {len(subs)} regions")
    return [clamp_properties(p) for p in props]
