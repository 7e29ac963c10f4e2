"""Synthetic scene generation.

A low-poly truck proxy is rasterized with a z-buffer and flat Lambertian
shading over a procedural backdrop. Each view produces the full sample
set the rest of the pipeline consumes: reference and gray renders, depth,
mask, a sparse texel-to-pixel render map, and a ground-truth box.
"""

from __future__ import annotations

import concurrent.futures
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from camotex import io
from camotex.config import SceneConfig
from camotex.errors import EmptyMaskError
from camotex.render import GRAY, RenderMap, TextureMap

log = logging.getLogger(__name__)

# seed-stream tags, so every consumer draws from its own substream
TAG_POSITION = 1
TAG_VIEW = 2
TAG_TEXTURE = 3
TAG_SPECIAL = 4


# ---------------------------------------------------------------------------
# geometry

@dataclass
class TruckMesh:
    """Triangle mesh split into a textured body and fixed-albedo parts."""

    vertices: np.ndarray      # (Nv, 3) float64, meters, z up
    faces: np.ndarray         # (Nf, 3) int32 vertex indices
    face_uv: np.ndarray       # (Nf, 3, 2) float64 per-corner UV in [0,1]
    face_part: np.ndarray     # (Nf,) uint8, 0 = body, 1 = auxiliary

    PART_BODY = 0
    PART_AUX = 1

    def validate(self):
        if self.face_uv.min() < 0.0 or self.face_uv.max() > 1.0:
            raise ValueError("UV coordinates must lie in [0,1]")
        if not (self.face_part == self.PART_BODY).any():
            raise ValueError("mesh needs at least one body face")
        if not (self.face_part == self.PART_AUX).any():
            raise ValueError("mesh needs at least one auxiliary face")
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        if (np.linalg.norm(n, axis=1) <= 1e-12).any():
            raise ValueError("mesh contains a degenerate face")

    def face_normals(self):
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def face_centroids(self):
        return self.vertices[self.faces].mean(axis=1)


def _box(verts, faces, uvs, parts, lo, hi, part, uv_cells=None):
    """Append an axis-aligned box; each face optionally mapped to its own
    rectangle of the texture atlas."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    c = [(x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0),
         (x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)]
    base = len(verts)
    verts.extend(c)
    # quads wound so normals face outward
    quads = [(0, 3, 2, 1),   # bottom (-z)
             (4, 5, 6, 7),   # top (+z)
             (0, 1, 5, 4),   # -y side
             (2, 3, 7, 6),   # +y side
             (1, 2, 6, 5),   # +x front
             (3, 0, 4, 7)]   # -x rear
    for qi, q in enumerate(quads):
        if uv_cells is not None:
            u0, v0, u1, v1 = uv_cells[qi]
            cuv = [(u0, v0), (u1, v0), (u1, v1), (u0, v1)]
        else:
            cuv = [(0.5, 0.5)] * 4
        a, b, cc, d = (base + q[0], base + q[1], base + q[2], base + q[3])
        faces.append((a, b, cc))
        uvs.append((cuv[0], cuv[1], cuv[2]))
        faces.append((a, cc, d))
        uvs.append((cuv[0], cuv[2], cuv[3]))
        parts.extend([part, part])


def _cylinder(verts, faces, uvs, parts, center, radius, half_width,
              segments, part):
    """Wheel: a cylinder with its axis along y."""
    cx, cy, cz = center
    ang = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    base = len(verts)
    for side in (-1.0, 1.0):
        y = cy + side * half_width
        for a in ang:
            verts.append((cx + radius * np.cos(a), y,
                          cz + radius * np.sin(a)))
    cap_a = len(verts)
    verts.append((cx, cy - half_width, cz))
    cap_b = len(verts)
    verts.append((cx, cy + half_width, cz))
    duv = ((0.5, 0.5),) * 3
    for i in range(segments):
        j = (i + 1) % segments
        a0, a1 = base + i, base + j                     # -y ring
        b0, b1 = base + segments + i, base + segments + j
        faces.append((a0, a1, b1)); uvs.append(duv)
        faces.append((a0, b1, b0)); uvs.append(duv)
        faces.append((cap_a, a1, a0)); uvs.append(duv)
        faces.append((cap_b, b0, b1)); uvs.append(duv)
        parts.extend([part] * 4)


def _atlas_cells(row, margin=0.02):
    """Six atlas rectangles in row `row` of a 6 x 2 grid of the UV square."""
    cells = []
    for col in range(6):
        u0 = col / 6.0 + margin
        u1 = (col + 1) / 6.0 - margin
        v0 = row / 2.0 + margin
        v1 = (row + 1) / 2.0 - margin
        cells.append((u0, v0, u1, v1))
    return cells


def build_truck_mesh() -> TruckMesh:
    """Cab plus cargo box (textured body) on four wheels (auxiliary)."""
    verts: List[Tuple[float, float, float]] = []
    faces: List[Tuple[int, int, int]] = []
    uvs: List[Tuple] = []
    parts: List[int] = []
    # cargo box occupies atlas row 0, cab row 1
    _box(verts, faces, uvs, parts, (-2.8, -1.1, 0.9), (1.0, 1.1, 3.0),
         TruckMesh.PART_BODY, _atlas_cells(0))
    _box(verts, faces, uvs, parts, (1.0, -1.05, 0.9), (2.8, 1.05, 2.4),
         TruckMesh.PART_BODY, _atlas_cells(1))
    for sx in (-1.8, 1.8):
        for sy in (-1.05, 1.05):
            _cylinder(verts, faces, uvs, parts, (sx, sy, 0.45), 0.45, 0.18,
                      10, TruckMesh.PART_AUX)
    mesh = TruckMesh(np.asarray(verts, dtype=np.float64),
                     np.asarray(faces, dtype=np.int32),
                     np.asarray(uvs, dtype=np.float64),
                     np.asarray(parts, dtype=np.uint8))
    mesh.validate()
    return mesh


TRUCK_TARGET = np.array([0.0, 0.0, 1.4])


# ---------------------------------------------------------------------------
# camera and shading

@dataclass
class CameraPose:
    azimuth: float          # degrees around z
    elevation: float        # degrees above the ground plane
    distance: float         # meters from target
    target: np.ndarray = field(default_factory=lambda: TRUCK_TARGET.copy())
    image_size: int = 128

    def validate(self):
        if self.elevation < 0:
            raise ValueError("elevation must be >= 0")
        if self.image_size < 64:
            raise ValueError("image size must be >= 64")
        if self.distance <= 0:
            raise ValueError("distance must be > 0")

    def basis(self):
        az = np.deg2rad(self.azimuth)
        el = np.deg2rad(self.elevation)
        offset = np.array([np.cos(el) * np.cos(az),
                           np.cos(el) * np.sin(az),
                           np.sin(el)])
        pos = self.target + self.distance * offset
        fwd = self.target - pos
        fwd = fwd / np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        if abs(fwd @ up) > 0.999:  # looking straight down: pick another up
            up = np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = -np.cross(right, fwd)
        return pos, right, down, fwd


@dataclass
class ShadingField:
    """Per-face multiplicative light factor: ambient floor plus a single
    directional light, with an optional darkening near the ground."""

    light_dir: np.ndarray   # unit vector pointing toward the light
    ambient: float = 0.25
    shadow_floor: float = 0.85
    shadow_height: float = 1.4
    uniform_value: Optional[float] = None

    @classmethod
    def constant(cls, value):
        return cls(np.array([0.0, 0.0, 1.0]), uniform_value=float(value))

    @classmethod
    def from_angles(cls, azimuth_deg, elevation_deg, ambient=0.25,
                    shadow_floor=0.85, shadow_height=1.4):
        az = np.deg2rad(azimuth_deg)
        el = np.deg2rad(elevation_deg)
        d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                      np.sin(el)])
        return cls(d, ambient, shadow_floor, shadow_height)

    def face_values(self, normals, centroids):
        """Shading factor per face, each in (0, 1]."""
        if self.uniform_value is not None:
            return np.full(len(normals), self.uniform_value)
        lam = np.maximum(0.0, normals @ self.light_dir)
        s = self.ambient + (1.0 - self.ambient) * lam
        if self.shadow_floor < 1.0:
            h = np.clip(centroids[:, 2] / self.shadow_height, 0.0, 1.0)
            s = s * (self.shadow_floor + (1.0 - self.shadow_floor) * h)
        return s


# ---------------------------------------------------------------------------
# backdrop

def make_backdrop(size, rng, palette=None, n_rects=(4, 10)):
    """Vertical two-color gradient plus solid distractor rectangles."""
    if palette is None:
        palette = rng.uniform(0.25, 0.9, size=(2, 3))
    top, bottom = np.asarray(palette[0]), np.asarray(palette[1])
    t = np.linspace(0.0, 1.0, size)[:, None]
    img = (top[None] * (1 - t) + bottom[None] * t)[:, None, :]
    img = np.broadcast_to(img, (size, size, 3)).copy()
    count = int(rng.integers(n_rects[0], n_rects[1] + 1))
    for _ in range(count):
        h = int(rng.integers(size // 16, size // 3 + 1))
        w = int(rng.integers(size // 16, size // 2 + 1))
        i = int(rng.integers(0, size - h + 1))
        j = int(rng.integers(0, size - w + 1))
        color = rng.uniform(0.05, 0.95, size=3)
        img[i:i + h, j:j + w] = color
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# rasterizer

@dataclass
class SceneSample:
    """Everything one rendered view carries through the pipeline."""

    x_ref: np.ndarray        # (H, W, 3) float32
    x_gray: np.ndarray       # (H, W, 3) float32
    x_d: np.ndarray          # (H, W) float32 meters, 0 background
    mask: np.ndarray         # (H, W) float32 in {0, 1}, truck pixels
    render_map: RenderMap
    b_gt: np.ndarray         # (4,) float32 center-format pixel box
    camera: Optional[CameraPose] = None
    position: int = 0
    view: int = 0
    texture_index: int = 0
    sample_id: str = ""
    split: str = "train"

    def validate(self):
        if not np.array_equal(self.mask > 0, self.x_d > 0):
            raise ValueError("mask must equal the depth support")


def mask_to_box(mask):
    """Tight center-format pixel box around the nonzero mask region."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptyMaskError("mask is empty")
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())
    w = x1 + 1 - x0
    h = y1 + 1 - y0
    return np.array([x0 + w / 2.0, y0 + h / 2.0, w, h], dtype=np.float32)


def rasterize(mesh: TruckMesh, camera: CameraPose, texture,
              shading: ShadingField, backdrop=None,
              aux_albedo=(0.10, 0.11, 0.14), fov_deg=50.0) -> SceneSample:
    """Z-buffered render of the truck over a backdrop.

    The reference image on body pixels is produced by applying the
    bilinear render map to the texture, so the sparse operator and the
    rasterizer agree exactly by construction.
    """
    t = texture.values if isinstance(texture, TextureMap) else texture
    size = camera.image_size
    camera.validate()
    pos, right, down, fwd = camera.basis()
    focal = (size / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)

    rel = mesh.vertices - pos
    xc = rel @ right
    yc = rel @ down
    zc = rel @ fwd

    zbuf = np.full((size, size), np.inf)
    face_id = np.full((size, size), -1, dtype=np.int32)
    uv_img = np.zeros((size, size, 2))

    tri = mesh.faces
    px_all = size / 2.0 + focal * xc / zc
    py_all = size / 2.0 + focal * yc / zc

    for f in range(len(tri)):
        vi = tri[f]
        z = zc[vi]
        if z.min() <= 0.05:
            continue
        px = px_all[vi]
        py = py_all[vi]
        x0 = max(int(np.floor(px.min() - 0.5)), 0)
        x1 = min(int(np.ceil(px.max() + 0.5)), size - 1)
        y0 = max(int(np.floor(py.min() - 0.5)), 0)
        y1 = min(int(np.ceil(py.max() + 0.5)), size - 1)
        if x0 > x1 or y0 > y1:
            continue
        denom = ((px[1] - px[0]) * (py[2] - py[0]) -
                 (px[2] - px[0]) * (py[1] - py[0]))
        if abs(denom) < 1e-12:
            continue
        gx = x0 + 0.5 + np.arange(x1 - x0 + 1)[None, :]
        gy = y0 + 0.5 + np.arange(y1 - y0 + 1)[:, None]
        l0 = ((px[1] - gx) * (py[2] - gy) - (px[2] - gx) * (py[1] - gy))
        l1 = ((px[2] - gx) * (py[0] - gy) - (px[0] - gx) * (py[2] - gy))
        l2 = ((px[0] - gx) * (py[1] - gy) - (px[1] - gx) * (py[0] - gy))
        l0 /= denom
        l1 /= denom
        l2 /= denom
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        if not inside.any():
            continue
        inv_z = l0 / z[0] + l1 / z[1] + l2 / z[2]
        depth = 1.0 / inv_z
        win = inside & (depth < zbuf[y0:y1 + 1, x0:x1 + 1])
        if not win.any():
            continue
        uvf = mesh.face_uv[f]
        u = (l0 * uvf[0, 0] / z[0] + l1 * uvf[1, 0] / z[1] +
             l2 * uvf[2, 0] / z[2]) / inv_z
        v = (l0 * uvf[0, 1] / z[0] + l1 * uvf[1, 1] / z[1] +
             l2 * uvf[2, 1] / z[2]) / inv_z
        zb = zbuf[y0:y1 + 1, x0:x1 + 1]
        fb = face_id[y0:y1 + 1, x0:x1 + 1]
        ub = uv_img[y0:y1 + 1, x0:x1 + 1]
        zb[win] = depth[win]
        fb[win] = f
        ub[win, 0] = u[win]
        ub[win, 1] = v[win]

    hit = face_id >= 0
    if not hit.any():
        raise EmptyMaskError("no truck pixel visible from this camera")

    shade_f = shading.face_values(mesh.face_normals(), mesh.face_centroids())
    s_img = np.zeros((size, size))
    s_img[hit] = shade_f[face_id[hit]]

    body = hit & (mesh.face_part[np.where(hit, face_id, 0)] ==
                  TruckMesh.PART_BODY)
    rmap = RenderMap.from_uv(uv_img, body, t.shape[:2])

    if backdrop is None:
        backdrop = np.full((size, size, 3), 0.5, dtype=np.float32)
    x_ref = backdrop.astype(np.float32).copy()
    x_gray = backdrop.astype(np.float32).copy()

    aux = hit & ~body
    aux_col = np.asarray(aux_albedo, dtype=np.float32)
    sc = s_img.astype(np.float32)[..., None]
    albedo = rmap.apply(t.astype(np.float32))
    x_ref[body] = (sc * albedo)[body]
    x_ref[aux] = sc[aux] * aux_col[None, :]
    x_gray[body] = sc[body] * GRAY
    x_gray[aux] = x_ref[aux]

    x_d = np.where(hit, zbuf, 0.0).astype(np.float32)
    mask = hit.astype(np.float32)
    sample = SceneSample(x_ref, x_gray, x_d, mask, rmap,
                         mask_to_box(mask), camera)
    return sample


# ---------------------------------------------------------------------------
# procedural textures

def _smooth_field(rng, size, passes=3, k=9):
    from camotex.losses import boxsum
    f = rng.uniform(0.0, 1.0, (size, size))
    for _ in range(passes):
        f = boxsum(f, k) / (k * k)
    f -= f.min()
    peak = f.max()
    return f / peak if peak > 0 else f


def _noise_texture(rng, size):
    return rng.uniform(0.0, 1.0, (size, size, 3))

def _uniform_texture(rng, size):
    return np.broadcast_to(rng.uniform(0.0, 1.0, 3), (size, size, 3)).copy()

def _stripe_texture(rng, size):
    period = int(rng.integers(4, max(5, size // 4)))
    c0 = rng.uniform(0.0, 1.0, 3)
    c1 = rng.uniform(0.0, 1.0, 3)
    ori = int(rng.integers(0, 3))
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    ramp = {0: ii, 1: jj, 2: ii + jj}[ori]
    band = ((ramp // period) % 2).astype(float)[..., None]
    return c0 * (1 - band) + c1 * band

def _blob_texture(rng, size):
    f = _smooth_field(rng, size)
    c0 = rng.uniform(0.0, 1.0, 3)
    c1 = rng.uniform(0.0, 1.0, 3)
    thr = float(np.median(f))
    m = (f > thr).astype(float)[..., None]
    return c0 * (1 - m) + c1 * m


_CATEGORY_FNS = {"noise": _noise_texture, "uniform": _uniform_texture,
                 "stripes": _stripe_texture, "blobs": _blob_texture}


def make_procedural_textures(n, size, seed, mix=None) -> List[TextureMap]:
    """Texture pool for enhancer training; category picked per texture."""
    if n < 1:
        raise ValueError("need n >= 1")
    if mix is None:
        mix = {c: 1.0 for c in _CATEGORY_FNS}
    cats = sorted(mix)
    weights = np.array([mix[c] for c in cats], dtype=float)
    weights = weights / weights.sum()
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(
            [seed, TAG_TEXTURE, i]))
        cat = cats[int(rng.choice(len(cats), p=weights))]
        vals = np.clip(_CATEGORY_FNS[cat](rng, size), 0.0, 1.0)
        out.append(TextureMap(vals.astype(np.float32), role="random"))
    return out


def base_texture(size) -> TextureMap:
    """Plain single-color body paint."""
    vals = np.broadcast_to(np.array([0.35, 0.38, 0.42], np.float32),
                           (size, size, 3)).copy()
    return TextureMap(vals, role="base")


def naive_camo_texture(size, seed) -> TextureMap:
    """Hand-mixed green/brown camouflage blobs."""
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, TAG_SPECIAL, 1]))
    palette = np.array([[0.22, 0.30, 0.16], [0.36, 0.32, 0.20],
                        [0.50, 0.46, 0.30], [0.14, 0.18, 0.12]], np.float32)
    f1 = _smooth_field(rng, size)
    f2 = _smooth_field(rng, size)
    idx = (f1 > np.median(f1)).astype(int) * 2 + (f2 > np.median(f2))
    return TextureMap(palette[idx], role="naive")


def random_texture(size, seed) -> TextureMap:
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, TAG_SPECIAL, 2]))
    return TextureMap(rng.uniform(0, 1, (size, size, 3)).astype(np.float32),
                      role="random")


# ---------------------------------------------------------------------------
# dataset generation

def _sample_view(cfg: SceneConfig, mesh, pool, seed, position, view,
                 light, palette):
    """Render one view; camera and distractors come from the view's own
    seed stream so parallel generation is order-independent."""
    el_range = cfg.elevation_range
    az_range = cfg.azimuth_range
    if cfg.swap_angle_ranges:
        el_range, az_range = az_range, el_range
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, TAG_VIEW, position, view]))
    last_err = None
    for _ in range(cfg.max_view_retries):
        cam = CameraPose(
            azimuth=float(rng.uniform(*az_range)),
            elevation=float(rng.uniform(*el_range)),
            distance=float(rng.uniform(*cfg.distance_range)),
            image_size=cfg.image_size)
        tex_idx = int(rng.integers(0, len(pool)))
        backdrop = make_backdrop(cfg.image_size, rng, palette,
                                 cfg.distractor_range)
        shading = ShadingField.from_angles(
            light[0], light[1], cfg.ambient, cfg.shadow_floor,
            cfg.shadow_height)
        try:
            sample = rasterize(mesh, cam, pool[tex_idx], shading, backdrop,
                               cfg.aux_albedo, cfg.fov_deg)
        except EmptyMaskError as e:
            last_err = e
            continue
        if sample.mask.sum() >= cfg.min_mask_pixels:
            sample.position = position
            sample.view = view
            sample.texture_index = tex_idx
            sample.sample_id = f"p{position:02d}_v{view:03d}"
            return sample
        last_err = EmptyMaskError("mask below minimum size")
    raise last_err or EmptyMaskError("no visible view found")


def position_light_and_palette(cfg: SceneConfig, seed, position):
    """Scene conditions tied to a position: sun angle and backdrop colors."""
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, TAG_POSITION, position]))
    light = (float(rng.uniform(0, 360)), float(rng.uniform(30, 70)))
    palette = rng.uniform(0.25, 0.9, size=(2, 3))
    return light, palette


def split_positions(cfg: SceneConfig) -> Tuple[List[int], List[int]]:
    n_train = int(round(cfg.positions * cfg.train_fraction))
    n_train = min(max(n_train, 1), cfg.positions - 1) \
        if cfg.positions > 1 else 1
    train = list(range(n_train))
    test = list(range(n_train, cfg.positions))
    return train, test


def sample_file_names(sample_id):
    return {
        "ref": f"samples/{sample_id}_ref.tnsr",
        "gray": f"samples/{sample_id}_gray.tnsr",
        "depth": f"samples/{sample_id}_depth.tnsr",
        "mask": f"samples/{sample_id}_mask.tnsr",
        "rmap": f"samples/{sample_id}_rmap.rmap",
    }


def write_sample(out_dir: Path, sample: SceneSample, preview=False):
    names = sample_file_names(sample.sample_id)
    io.write_tnsr(out_dir / names["ref"], sample.x_ref)
    io.write_tnsr(out_dir / names["gray"], sample.x_gray)
    io.write_tnsr(out_dir / names["depth"], sample.x_d)
    io.write_tnsr(out_dir / names["mask"], sample.mask)
    io.write_rmap(out_dir / names["rmap"], sample.render_map.counts,
                  sample.render_map.texel_indices,
                  sample.render_map.weights)
    if preview:
        io.write_ppm(out_dir / f"samples/{sample.sample_id}_ref.ppm",
                     sample.x_ref)
    return names


def generate_dataset(cfg: SceneConfig, out_dir, seed, threads=1,
                     config_echo=None) -> dict:
    """Render the full P x V grid of views and write it to out_dir.

    Returns the manifest (also written as manifest.json). Samples are
    computed from per-(position, view) seed streams, so any thread count
    produces identical bytes.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    (out_dir / "textures").mkdir(exist_ok=True)

    mesh = build_truck_mesh()
    pool = make_procedural_textures(cfg.n_textures, cfg.texture_size, seed,
                                    cfg.texture_mix)
    specials = {"base": base_texture(cfg.texture_size),
                "naive": naive_camo_texture(cfg.texture_size, seed),
                "random": random_texture(cfg.texture_size, seed)}
    for i, tex in enumerate(pool):
        io.write_tnsr(out_dir / "textures" / f"pool_{i:02d}.tnsr", tex.values)
    for name, tex in specials.items():
        io.write_tnsr(out_dir / "textures" / f"{name}.tnsr", tex.values)
        io.write_ppm(out_dir / "textures" / f"{name}.ppm", tex.values)

    train_pos, test_pos = split_positions(cfg)
    conditions = {p: position_light_and_palette(cfg, seed, p)
                  for p in range(cfg.positions)}

    jobs = [(p, v) for p in range(cfg.positions)
            for v in range(cfg.views_per_position)]

    def make(job):
        p, v = job
        light, palette = conditions[p]
        return _sample_view(cfg, mesh, pool, seed, p, v, light, palette)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(threads) as ex:
            samples = list(ex.map(make, jobs))
    else:
        samples = [make(j) for j in jobs]

    entries = []
    for sample in samples:
        sample.split = "train" if sample.position in train_pos else "test"
        names = write_sample(out_dir, sample, preview=sample.view < 2)
        cam = sample.camera
        entries.append({
            "id": sample.sample_id,
            "position": sample.position,
            "view": sample.view,
            "split": sample.split,
            "texture_index": sample.texture_index,
            "files": names,
            "camera": {"azimuth": cam.azimuth, "elevation": cam.elevation,
                       "distance": cam.distance,
                       "target": [float(x) for x in cam.target],
                       "image_size": cam.image_size},
            "b_gt": [float(x) for x in sample.b_gt],
        })

    from camotex import __version__
    manifest = {
        "version": __version__,
        "seed": seed,
        "config": config_echo if config_echo is not None else {},
        "image_size": cfg.image_size,
        "texture_size": cfg.texture_size,
        "train_positions": train_pos,
        "test_positions": test_pos,
        "textures": {
            "pool": [f"textures/pool_{i:02d}.tnsr" for i in range(len(pool))],
            "base": "textures/base.tnsr",
            "naive": "textures/naive.tnsr",
            "random": "textures/random.tnsr",
        },
        "samples": entries,
    }
    io.write_json(out_dir / "manifest.json", manifest)
    log.info("dataset: %d samples (%d train / %d test positions) in %s",
             len(entries), len(train_pos), len(test_pos), out_dir)
    return manifest


def load_sample(dataset_dir, entry, texture_size) -> SceneSample:
    """Rehydrate one manifest entry."""
    dataset_dir = Path(dataset_dir)
    files = entry["files"]
    x_ref = io.read_tnsr(dataset_dir / files["ref"])
    x_gray = io.read_tnsr(dataset_dir / files["gray"])
    x_d = io.read_tnsr(dataset_dir / files["depth"])
    mask = io.read_tnsr(dataset_dir / files["mask"])
    counts, idx, wts = io.read_rmap(dataset_dir / files["rmap"])
    rmap = RenderMap(counts, idx, wts, x_ref.shape[:2],
                     (texture_size, texture_size))
    cam = CameraPose(entry["camera"]["azimuth"], entry["camera"]["elevation"],
                     entry["camera"]["distance"],
                     np.asarray(entry["camera"]["target"]),
                     entry["camera"]["image_size"])
    return SceneSample(x_ref, x_gray, x_d, mask, rmap,
                       np.asarray(entry["b_gt"], np.float32), cam,
                       entry["position"], entry["view"],
                       entry["texture_index"], entry["id"], entry["split"])


def load_split(dataset_dir, manifest, split) -> List[SceneSample]:
    """Load all samples of one split ('train', 'test', or 'all')."""
    out = []
    for entry in manifest["samples"]:
        if split != "all" and entry["split"] != split:
            continue
        out.append(load_sample(dataset_dir, entry, manifest["texture_size"]))
    return out


def load_textures(dataset_dir, manifest):
    """Texture pool plus the named special textures from a dataset dir."""
    dataset_dir = Path(dataset_dir)
    pool = [TextureMap(io.read_tnsr(dataset_dir / p), role="random")
            for p in manifest["textures"]["pool"]]
    specials = {name: TextureMap(io.read_tnsr(dataset_dir /
                                              manifest["textures"][name]),
                                 role=name if name != "random" else "random")
                for name in ("base", "naive", "random")}
    return pool, specials
