"""Analytic ray-cast renderer for procedural PBR scenes.

Primitives are spheres, axis-aligned boxes and horizontal quads ("planes").
Materials are a function of world-space surface position only, so every view
of a scene sees the same albedo / roughness / metallic at the same point.
Shading is Lambertian diffuse plus GGX specular (Schlick Fresnel,
F0 = mix(0.04, albedo, metallic)) plus a white ambient term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from framework.errors import DegenerateViewError, InvalidArgumentError
from models.dataset import CameraRecord, LightingRecord, LightRecord, SceneSpec
from services.materials import MaterialMaps

logger = logging.getLogger(__name__)

SPECULAR_EPS = 1e-4
MIN_ROUGHNESS = 0.08
GAMMA = 2.2

# 5x5 glyphs ('#' = ink)
_GLYPHS = [
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["..#..", ".##..", "..#..", "..#..", ".###."],
    ["####.", "#...#", "####.", "#...#", "####."],
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    ["#####", "....#", "..##.", ".#...", "#####"],
    [".###.", "#....", ".###.", "....#", "###.."],
    ["#...#", "##.##", "#.#.#", "#...#", "#...#"],
    ["#####", "#....", "###..", "#....", "#####"],
    ["#.#.#", ".#.#.", "#.#.#", ".#.#.", "#.#.#"],
    ["..#..", ".#.#.", "#####", "#...#", "#...#"],
]
GLYPH_BITMAPS = np.array([[[c == "#" for c in row] for row in g] for g in _GLYPHS], dtype=bool)


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: np.ndarray      # (3,)
    size: np.ndarray        # sphere: (r, r, r); box: half extents; plane: (hx, 0, hz)
    albedo_a: np.ndarray    # (3,)
    albedo_b: np.ndarray    # (3,)
    roughness: float
    metallic: float


@dataclass(frozen=True)
class SceneDescription:
    seed: int
    spec: SceneSpec
    primitives: Tuple[Primitive, ...]
    texture_seed: int
    lighting: LightingRecord


@dataclass
class HitBuffer:
    hit: np.ndarray        # [N] bool
    t: np.ndarray          # [N]
    position: np.ndarray   # [N,3]
    normal: np.ndarray     # [N,3]
    primitive: np.ndarray  # [N] int, -1 on miss


@dataclass
class RenderedView:
    rgb: np.ndarray                 # [H,W,3]
    maps: MaterialMaps
    position: np.ndarray = field(repr=False)  # [H,W,3]
    normal: np.ndarray = field(repr=False)    # [H,W,3]


# -----------------------------------------------------------------------------
# Scene construction
# -----------------------------------------------------------------------------
def make_scene(seed: int, spec: SceneSpec) -> SceneDescription:
    if not spec.primitives:
        raise InvalidArgumentError("scene spec lists no primitives")
    rng = np.random.default_rng(seed)
    primitives: List[Primitive] = []
    solids = [k for k in spec.primitives if k != "plane"]
    ring = 0.75 if len(solids) > 1 else 0.0
    solid_index = 0
    for kind in spec.primitives:
        a = rng.uniform(0.1, 0.95, size=3)
        b = rng.uniform(0.1, 0.95, size=3)
        roughness = float(rng.uniform(0.1, 0.95))
        draw = rng.uniform()
        metallic = 0.0 if draw < 0.6 else (1.0 if draw < 0.85 else float(rng.uniform()))
        if kind == "plane":
            center = np.array([0.0, -0.75, 0.0])
            size = np.array([1.4, 0.0, 1.4])
        else:
            angle = 2.0 * math.pi * solid_index / max(len(solids), 1) + rng.uniform(-0.3, 0.3)
            center = np.array([ring * math.cos(angle), 0.0, ring * math.sin(angle)])
            if kind == "sphere":
                r = rng.uniform(0.45, 0.7)
                size = np.array([r, r, r])
            else:
                size = rng.uniform(0.3, 0.55, size=3)
            solid_index += 1
        if spec.albedo is not None:
            a = b = np.asarray(spec.albedo, dtype=np.float64)
        if spec.roughness is not None:
            roughness = float(spec.roughness)
        if spec.metallic is not None:
            metallic = float(spec.metallic)
        primitives.append(Primitive(kind, center, size, a, b, roughness, metallic))

    n_lights = int(rng.integers(spec.n_lights[0], spec.n_lights[1] + 1))
    lights = []
    for _ in range(n_lights):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        elevation = rng.uniform(0.35, 1.3)
        dist = rng.uniform(4.0, 6.0)
        pos = (dist * math.cos(elevation) * math.cos(theta), dist * math.sin(elevation), dist * math.cos(elevation) * math.sin(theta))
        hue = rng.uniform(0.6, 1.0, size=3)
        intensity = rng.uniform(*spec.light_intensity)
        color = tuple(float(c) for c in hue / hue.max() * intensity)
        lights.append(LightRecord(position=tuple(float(p) for p in pos), color=color))
    lighting = LightingRecord(lights=lights, ambient=float(rng.uniform(*spec.ambient)))
    return SceneDescription(
        seed=seed,
        spec=spec,
        primitives=tuple(primitives),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
        lighting=lighting,
    )


def orbit_cameras(seed: int, n_views: int, radius: float = 4.0, fov_deg: float = 40.0) -> List[CameraRecord]:
    """Evenly spaced azimuths with jitter; elevations in [15, 40] degrees."""
    rng = np.random.default_rng(seed ^ 0x5EED)
    start = rng.uniform(0.0, 2.0 * math.pi)
    cameras = []
    for v in range(n_views):
        az = start + 2.0 * math.pi * v / n_views + rng.uniform(-0.2, 0.2)
        el = math.radians(rng.uniform(15.0, 40.0))
        pos = (radius * math.cos(el) * math.cos(az), radius * math.sin(el), radius * math.cos(el) * math.sin(az))
        cameras.append(CameraRecord(position=pos, look_at=(0.0, 0.0, 0.0), fov_deg=fov_deg))
    return cameras


# -----------------------------------------------------------------------------
# Ray casting
# -----------------------------------------------------------------------------
def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def _dot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sum(x * y, axis=-1, keepdims=True)


def camera_rays(camera: CameraRecord, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    origin = np.asarray(camera.position, dtype=np.float64)
    forward = _normalize(np.asarray(camera.look_at, dtype=np.float64) - origin)
    right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    if np.linalg.norm(right) < 1e-8:
        right = np.array([1.0, 0.0, 0.0])
    right = _normalize(right)
    up = np.cross(right, forward)
    half = math.tan(math.radians(camera.fov_deg) / 2.0)
    ys = (1.0 - (np.arange(height) + 0.5) / height * 2.0) * half
    xs = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) * half * (width / height)
    gx, gy = np.meshgrid(xs, ys)
    dirs = forward + gx[..., None] * right + gy[..., None] * up
    dirs = _normalize(dirs.reshape(-1, 3))
    return np.broadcast_to(origin, dirs.shape).copy(), dirs


def _intersect(prim: Primitive, o: np.ndarray, d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (t, normal); t = inf on miss."""
    n = o.shape[0]
    t = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        if prim.kind == "sphere":
            r = prim.size[0]
            oc = o - prim.center
            b = np.sum(oc * d, axis=-1)
            c = np.sum(oc * oc, axis=-1) - r * r
            disc = b * b - c
            ok = disc >= 0.0
            root = np.sqrt(np.where(ok, disc, 0.0))
            t0 = -b - root
            t1 = -b + root
            cand = np.where(t0 > SPECULAR_EPS, t0, t1)
            ok &= cand > SPECULAR_EPS
            t = np.where(ok, cand, np.inf)
            p = o + np.where(ok, t, 0.0)[:, None] * d
            normal = _normalize(p - prim.center)
        elif prim.kind == "box":
            lo = prim.center - prim.size
            hi = prim.center + prim.size
            t1 = (lo - o) / d
            t2 = (hi - o) / d
            tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
            ok = (tmax >= tmin) & (tmin > SPECULAR_EPS)
            t = np.where(ok, tmin, np.inf)
            p = o + np.where(ok, t, 0.0)[:, None] * d
            rel = (p - prim.center) / prim.size
            axis = np.argmax(np.abs(rel), axis=-1)
            normal[np.arange(n), axis] = np.sign(rel[np.arange(n), axis])
        elif prim.kind == "plane":
            tp = (prim.center[1] - o[:, 1]) / d[:, 1]
            p = o + np.where(np.isfinite(tp), tp, 0.0)[:, None] * d
            inside = (np.abs(p[:, 0] - prim.center[0]) <= prim.size[0]) & (np.abs(p[:, 2] - prim.center[2]) <= prim.size[2])
            ok = np.isfinite(tp) & (tp > SPECULAR_EPS) & inside
            t = np.where(ok, tp, np.inf)
            normal[:, 1] = 1.0
        else:
            raise InvalidArgumentError(f"unknown primitive kind {prim.kind!r}")
    return t, normal


def cast_rays(scene: SceneDescription, origins: np.ndarray, dirs: np.ndarray) -> HitBuffer:
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_n = np.zeros((n, 3))
    best_i = np.full(n, -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t, normal = _intersect(prim, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[:, None], normal, best_n)
        best_i = np.where(closer, i, best_i)
    hit = np.isfinite(best_t)
    position = origins + np.where(hit, best_t, 0.0)[:, None] * dirs
    return HitBuffer(hit=hit, t=best_t, position=position, normal=best_n, primitive=best_i)


# -----------------------------------------------------------------------------
# Materials as functions of surface position
# -----------------------------------------------------------------------------
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _hash01(seed: int, *coords: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = np.full(coords[0].shape, np.uint64(seed) * _GOLD, dtype=np.uint64)
        for c in coords:
            h ^= c.astype(np.int64).astype(np.uint64) + _GOLD + (h << np.uint64(6)) + (h >> np.uint64(2))
        h ^= h >> np.uint64(30)
        h *= _M1
        h ^= h >> np.uint64(27)
        h *= _M2
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _planar_uv(position: np.ndarray, normal: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Project onto the two axes orthogonal to the dominant normal axis."""
    axis = np.argmax(np.abs(normal), axis=-1)
    u = np.where(axis == 0, position[:, 2], position[:, 0])
    v = np.where(axis == 1, position[:, 2], position[:, 1])
    return u, v


def texture_pattern(kind: str, position: np.ndarray, normal: np.ndarray, frequency: float, seed: int) -> np.ndarray:
    """Texture weight in [0,1] at surface points."""
    p = position * frequency
    if kind == "flat":
        return np.zeros(position.shape[0])
    if kind == "checker":
        return (np.floor(p).astype(np.int64).sum(axis=-1) % 2).astype(np.float64)
    if kind == "stripes":
        return (np.sin(math.pi * (p[:, 0] + p[:, 2])) > 0.0).astype(np.float64)
    if kind == "glyph_grid":
        u, v = _planar_uv(position, normal)
        u, v = u * frequency, v * frequency
        cu, cv = np.floor(u), np.floor(v)
        glyph = (_hash01(seed, cu, cv) * len(GLYPH_BITMAPS)).astype(np.int64)
        # 5x5 glyph centred in a 7x7 cell
        su = np.floor((u - cu) * 7.0).astype(np.int64) - 1
        sv = np.floor((v - cv) * 7.0).astype(np.int64) - 1
        inside = (su >= 0) & (su < 5) & (sv >= 0) & (sv < 5)
        ink = GLYPH_BITMAPS[glyph, np.clip(4 - sv, 0, 4), np.clip(su, 0, 4)]
        return (inside & ink).astype(np.float64)
    if kind == "value_noise":
        base = np.floor(p)
        f = p - base
        f = f * f * (3.0 - 2.0 * f)
        out = np.zeros(position.shape[0])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1]) * (f[:, 2] if dz else 1 - f[:, 2])
                    out += w * _hash01(seed, base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz)
        return out
    raise InvalidArgumentError(f"unknown texture kind {kind!r}")


def material_at(scene: SceneDescription, hits: HitBuffer) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(albedo [N,3], roughness [N,1], metallic [N,1]); zeros on misses."""
    n = hits.hit.shape[0]
    albedo = np.zeros((n, 3))
    roughness = np.zeros((n, 1))
    metallic = np.zeros((n, 1))
    texture = scene.spec.texture if scene.spec.albedo is None else "flat"
    for i, prim in enumerate(scene.primitives):
        sel = hits.hit & (hits.primitive == i)
        if not np.any(sel):
            continue
        w = texture_pattern(texture, hits.position[sel], hits.normal[sel], scene.spec.texture_frequency, scene.texture_seed + i)
        albedo[sel] = prim.albedo_a * (1.0 - w[:, None]) + prim.albedo_b * w[:, None]
        roughness[sel] = prim.roughness
        metallic[sel] = prim.metallic
    return albedo, roughness, metallic


# -----------------------------------------------------------------------------
# Shading
# -----------------------------------------------------------------------------
def _ggx_specular(f0, n, v, l, roughness):
    alpha = np.clip(roughness * roughness, MIN_ROUGHNESS * MIN_ROUGHNESS, 1.0)
    a2 = alpha * alpha
    h = _normalize(v + l)
    ndl = np.clip(_dot(n, l), SPECULAR_EPS, 1.0)
    ndv = np.clip(_dot(n, v), SPECULAR_EPS, 1.0)
    ndh = np.clip(_dot(n, h), SPECULAR_EPS, 1.0 - SPECULAR_EPS)
    vdh = np.clip(_dot(v, h), SPECULAR_EPS, 1.0)
    d = (ndh * a2 - ndh) * ndh + 1.0
    D = a2 / (d * d * math.pi)

    def _lambda(c):
        c2 = c * c
        return 0.5 * (np.sqrt(1.0 + a2 * (1.0 - c2) / c2) - 1.0)

    G = 1.0 / (1.0 + _lambda(ndl) + _lambda(ndv))
    F = f0 + (1.0 - f0) * (1.0 - vdh) ** 5
    return F * D * G * 0.25 / ndv


def shade(albedo, roughness, metallic, position, normal, view_dir, lighting: LightingRecord) -> np.ndarray:
    """Linear radiance of surface points; no clamping, no gamma."""
    f0 = 0.04 * (1.0 - metallic) + albedo * metallic
    kd = albedo * (1.0 - metallic)
    # fully rough surfaces carry no specular lobe, so roughness 1 is purely Lambertian
    gloss = 1.0 - roughness
    out = lighting.ambient * (kd + f0 * metallic)
    for light in lighting.lights:
        l = _normalize(np.asarray(light.position) - position)
        color = np.asarray(light.color)
        ndl_raw = _dot(normal, l)
        lit = (ndl_raw > 0.0) & (_dot(normal, view_dir) > 0.0)
        ndl = np.maximum(ndl_raw, 0.0)
        spec = gloss * _ggx_specular(f0, normal, view_dir, l, roughness) * ndl
        out = out + np.where(lit, kd * ndl + spec, 0.0) * color
    return out


def render_view(
    scene: SceneDescription,
    camera: CameraRecord,
    lighting: Optional[LightingRecord] = None,
    resolution: int = 64,
    clamp: bool = True,
    gamma: Optional[float] = GAMMA,
) -> RenderedView:
    lighting = scene.lighting if lighting is None else lighting
    origins, dirs = camera_rays(camera, resolution, resolution)
    hits = cast_rays(scene, origins, dirs)
    if not np.any(hits.hit):
        raise DegenerateViewError(f"camera at {camera.position} does not see the object")
    albedo, roughness, metallic = material_at(scene, hits)
    radiance = np.zeros_like(albedo)
    sel = hits.hit
    radiance[sel] = shade(albedo[sel], roughness[sel], metallic[sel], hits.position[sel], hits.normal[sel], -dirs[sel], lighting)
    if clamp:
        radiance = np.clip(radiance, 0.0, 1.0)
    if gamma is not None:
        radiance = np.power(np.maximum(radiance, 0.0), 1.0 / gamma)
    hw = (resolution, resolution)
    mask = hits.hit.reshape(hw + (1,))
    maps = MaterialMaps(
        albedo=albedo.reshape(hw + (3,)),
        roughness=roughness.reshape(hw + (1,)),
        metallic=metallic.reshape(hw + (1,)),
        mask=mask,
    )
    return RenderedView(
        rgb=radiance.reshape(hw + (3,)),
        maps=maps,
        position=np.where(mask, hits.position.reshape(hw + (3,)), 0.0),
        normal=np.where(mask, hits.normal.reshape(hw + (3,)), 0.0),
    )
