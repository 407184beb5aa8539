"""Pinhole projection, rasterization, Phong shading, and their gradients.

The renderer is differentiable under a fixed-assignment contract: the
per-pixel triangle id and coverage mask produced by the forward pass are
treated as constants, and gradients flow through barycentric weights,
shading, projection, and lighting.  Silhouette motion is therefore
invisible to the gradients, which is exactly the behaviour the training
loop expects at assignment-stable configurations.

Geometry conventions: right-handed look-at frame, pixel origin at the
top-left with y growing downward, pixel centres at integer + 0.5, and
view-space depth measured along the camera forward axis.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .mesh import MeshError, vertex_normals

AMBIENT = 0.3
SPECULAR_COEFF = 0.2
SPECULAR_EXP = 16.0
DEPTH_EPS = 1e-6

# squasher scene box (applied to raw image-encoder outputs)
CAM_CENTER = np.array([0.0, 0.0, 2.5])
CAM_HALF = np.array([1.5, 1.5, 1.5])
LOOK_HALF = 0.5
UP_BASE = np.array([0.0, 1.0, 0.0])
UP_HALF = 0.5
FOV_LOW = 20.0
FOV_RANGE = 100.0
LIGHT_CENTERS = np.array([[2.0, 2.0, 2.5], [-2.0, 1.0, 2.5], [0.0, -2.0, 2.5]])
LIGHT_HALF = 3.0


class RenderError(ValueError):
    pass


@dataclass
class CameraParams:
    position: np.ndarray     # p
    lookat: np.ndarray       # o, interpreted as a look-at target point
    up: np.ndarray           # u
    fov_deg: float           # f, full field of view

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.lookat = np.asarray(self.lookat, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if not 0.0 < self.fov_deg < 180.0:
            raise RenderError(f"fov must be in (0, 180), got {self.fov_deg}")
        gaze = self.lookat - self.position
        if np.linalg.norm(gaze) < 1e-12:
            raise RenderError("camera position equals look-at point")
        if np.linalg.norm(np.cross(gaze, self.up)) < 1e-12:
            raise RenderError("up direction is parallel to the gaze")


@dataclass
class LightingParams:
    positions: np.ndarray    # (3, 3)
    intensities: np.ndarray  # (3,) >= 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions,
                                    dtype=np.float64).reshape(3, 3)
        self.intensities = np.asarray(self.intensities,
                                      dtype=np.float64).reshape(3)
        if (self.intensities < 0).any():
            raise RenderError("light intensities must be non-negative")


def pack_render_params(cam: CameraParams, lights: LightingParams):
    """m = [p, o, u, f, (light position, intensity) x 3], 22 values."""
    parts = [cam.position, cam.lookat, cam.up, [cam.fov_deg]]
    for i in range(3):
        parts.append(lights.positions[i])
        parts.append([lights.intensities[i]])
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def unpack_render_params(m):
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    if m.shape != (22,):
        raise RenderError(f"render parameter vector must have 22 values, "
                          f"got {m.shape}")
    cam = CameraParams(m[0:3], m[3:6], m[6:9], float(m[9]))
    pos = np.array([m[10:13], m[14:17], m[18:21]])
    inten = np.array([m[13], m[17], m[21]])
    return cam, LightingParams(pos, inten)


class FrameBuffer:
    """Per-pixel colour, depth, triangle id (-1 = none), weights, mask."""

    def __init__(self, width, height):
        self.width = width
        self.height = height
        self.colour = np.zeros((height, width, 3))
        self.depth = np.full((height, width), np.inf)
        self.triangle_id = np.full((height, width), -1, dtype=np.int64)
        self.barycentric = np.zeros((height, width, 3))
        self.mask = np.zeros((height, width), dtype=bool)
        self._raw_colour = None     # pre-clamp shading, for backward
        self._input_hash = None     # render inputs, for staleness checks


# ----------------------------------------------------------- projection --

def camera_frame(cam: CameraParams):
    """Right-handed orthonormal (right, up, forward) from a look-at triple."""
    fwd = cam.lookat - cam.position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, cam.up)
    right = right / np.linalg.norm(right)
    up = np.cross(right, fwd)
    return right, up, fwd


def project_vertices(positions, cam: CameraParams, width, height):
    """Screen coordinates (pixel x, pixel y, view depth) per vertex.

    Vertices at or behind the camera plane (depth <= DEPTH_EPS) are
    flagged invalid and must not take part in rasterization.
    """
    positions = np.asarray(positions, dtype=np.float64)
    right, up, fwd = camera_frame(cam)
    rel = positions - cam.position
    xv = rel @ right
    yv = rel @ up
    zv = rel @ fwd
    valid = zv > DEPTH_EPS
    tan_half = np.tan(np.radians(cam.fov_deg) / 2.0)
    tx = tan_half * (width / height)
    ty = tan_half
    safe_z = np.where(valid, zv, 1.0)
    ndc_x = xv / (safe_z * tx)
    ndc_y = yv / (safe_z * ty)
    px = (ndc_x + 1.0) * 0.5 * width
    py = (1.0 - ndc_y) * 0.5 * height
    screen = np.stack([px, py, zv], axis=1)
    return screen, valid


def edge_function(ax, ay, bx, by, qx, qy):
    """Twice the signed area of triangle (a, b, q) in pixel coords."""
    return (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)


def rasterize(screen, triangles, width, height, valid=None) -> FrameBuffer:
    """Nearest front-facing triangle per pixel centre, lowest id on ties.

    Coverage uses inclusive half-plane tests at pixel centres; weights are
    perspective-correct.  With the y-down pixel frame, triangles that are
    counter-clockwise in world space and face the camera have negative
    signed area, which is the front-facing test used here.
    """
    screen = np.asarray(screen, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    fb = FrameBuffer(width, height)
    fb._triangles_cache = triangles
    if valid is None:
        valid = np.ones(len(screen), dtype=bool)
    for tid, tri in enumerate(triangles):
        if not (valid[tri[0]] and valid[tri[1]] and valid[tri[2]]):
            continue
        s0, s1, s2 = screen[tri[0]], screen[tri[1]], screen[tri[2]]
        area = edge_function(s0[0], s0[1], s1[0], s1[1], s2[0], s2[1])
        if area >= 0:
            continue  # back-facing or degenerate
        x_min = max(int(np.floor(min(s0[0], s1[0], s2[0]) - 0.5)), 0)
        x_max = min(int(np.ceil(max(s0[0], s1[0], s2[0]) + 0.5)), width - 1)
        y_min = max(int(np.floor(min(s0[1], s1[1], s2[1]) - 0.5)), 0)
        y_max = min(int(np.ceil(max(s0[1], s1[1], s2[1]) + 0.5)), height - 1)
        if x_min > x_max or y_min > y_max:
            continue
        qx = np.arange(x_min, x_max + 1) + 0.5
        qy = np.arange(y_min, y_max + 1) + 0.5
        gx, gy = np.meshgrid(qx, qy)
        n0 = edge_function(s1[0], s1[1], s2[0], s2[1], gx, gy)
        n1 = edge_function(s2[0], s2[1], s0[0], s0[1], gx, gy)
        n2 = edge_function(s0[0], s0[1], s1[0], s1[1], gx, gy)
        lam0, lam1, lam2 = n0 / area, n1 / area, n2 / area
        inside = (lam0 >= 0) & (lam1 >= 0) & (lam2 >= 0)
        if not inside.any():
            continue
        wt0 = lam0 / s0[2]
        wt1 = lam1 / s1[2]
        wt2 = lam2 / s2[2]
        denom = wt0 + wt1 + wt2
        depth = np.where(inside, 1.0 / np.where(denom > 0, denom, 1.0),
                         np.inf)
        region = (slice(y_min, y_max + 1), slice(x_min, x_max + 1))
        closer = inside & (depth < fb.depth[region])
        if not closer.any():
            continue
        fb.depth[region] = np.where(closer, depth, fb.depth[region])
        fb.triangle_id[region] = np.where(closer, tid,
                                          fb.triangle_id[region])
        fb.mask[region] |= closer
        w_sum = np.where(denom > 0, denom, 1.0)
        for k, wt in enumerate((wt0, wt1, wt2)):
            fb.barycentric[region][..., k] = np.where(
                closer, wt / w_sum, fb.barycentric[region][..., k])
    return fb


# -------------------------------------------------------------- shading --

def phong_shade(fb: FrameBuffer, positions, normals, colours,
                lights: LightingParams, cam_position):
    """Fill framebuffer colours by interpolation plus Phong lighting.

    Diffuse light is albedo times (ambient + sum of clamped lambertian
    terms); the specular highlight is white with a fixed exponent and
    coefficient.  Output colours are clamped to [0, 1]; the pre-clamp
    values are kept on the framebuffer for the backward pass.
    """
    ys, xs = np.nonzero(fb.mask)
    raw = np.zeros((fb.height, fb.width, 3))
    if len(ys):
        tris = fb._triangles_cache
        tri = tris[fb.triangle_id[ys, xs]]
        w = fb.barycentric[ys, xs]                       # (P, 3)
        interp = _interpolate(w, tri, positions, normals, colours)
        pw, nrm, alb = interp["position"], interp["normal"], interp["albedo"]
        shade = _shade_pixels(pw, nrm, alb, lights,
                              np.asarray(cam_position, dtype=np.float64))
        raw[ys, xs] = shade
    fb._raw_colour = raw
    fb.colour = np.clip(raw, 0.0, 1.0)
    return fb


def _interpolate(w, tri, positions, normals, colours):
    pw = np.einsum("pk,pkc->pc", w, positions[tri])
    nraw = np.einsum("pk,pkc->pc", w, normals[tri])
    alb = np.einsum("pk,pkc->pc", w, colours[tri])
    nlen = np.linalg.norm(nraw, axis=1)
    ok = nlen > 1e-12
    unit = np.where(ok[:, None], nraw / np.where(ok, nlen, 1.0)[:, None], 0.0)
    return {"position": pw, "normal_raw": nraw, "normal_len": nlen,
            "normal_ok": ok, "normal": unit, "albedo": alb}


def _shade_pixels(pw, nrm, alb, lights, cam_position):
    diffuse = np.zeros(len(pw))
    spec = np.zeros(len(pw))
    vdir = cam_position - pw
    vlen = np.linalg.norm(vdir, axis=1)
    vhat = vdir / np.maximum(vlen, 1e-12)[:, None]
    for li in range(3):
        dvec = lights.positions[li] - pw
        dlen = np.linalg.norm(dvec, axis=1)
        lhat = dvec / np.maximum(dlen, 1e-12)[:, None]
        ndl = np.einsum("pc,pc->p", nrm, lhat)
        lit = ndl > 0
        diffuse += lights.intensities[li] * np.where(lit, ndl, 0.0)
        refl = 2.0 * ndl[:, None] * nrm - lhat
        rv = np.einsum("pc,pc->p", refl, vhat)
        glint = lit & (rv > 0)
        spec += (SPECULAR_COEFF * lights.intensities[li]
                 * np.where(glint, rv, 0.0) ** SPECULAR_EXP)
    return alb * (AMBIENT + diffuse)[:, None] + spec[:, None]


# ------------------------------------------------------------ composite --

def _hash_inputs(positions, colours, m, width, height):
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(positions, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(colours, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(m, dtype="<f8").tobytes())
    h.update(np.int64(width).tobytes())
    h.update(np.int64(height).tobytes())
    return h.digest()


def render(mesh, m, width, height) -> FrameBuffer:
    """project -> rasterize -> shade; deterministic for fixed inputs.

    ``mesh`` may be a ColouredMesh or a (positions, colours, triangles)
    triple.
    """
    if hasattr(mesh, "positions"):
        positions, colours, triangles = (mesh.positions, mesh.colours,
                                         mesh.triangles)
    else:
        positions, colours, triangles = mesh
    positions = np.asarray(positions, dtype=np.float64)
    colours = np.asarray(colours, dtype=np.float64)
    cam, lights = unpack_render_params(m)
    screen, valid = project_vertices(positions, cam, width, height)
    fb = rasterize(screen, triangles, width, height, valid)
    fb._triangles_cache = np.asarray(triangles, dtype=np.int64)
    normals = vertex_normals(positions, np.asarray(triangles))
    phong_shade(fb, positions, normals, colours, lights, cam.position)
    fb._input_hash = _hash_inputs(positions, colours, m, width, height)
    return fb


def render_loss(fb: FrameBuffer, target):
    """Masked mean absolute error over covered pixels and channels.

    An empty mask yields (0.0, 0); callers treat that as a skipped
    sample rather than a perfect score.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != fb.colour.shape:
        raise RenderError(
            f"target shape {target.shape} != image {fb.colour.shape}")
    count = int(fb.mask.sum())
    if count == 0:
        return 0.0, 0
    diff = fb.colour[fb.mask] - target[fb.mask]
    return float(np.abs(diff).mean()), count


def render_loss_backward(fb: FrameBuffer, target):
    """d(render_loss) / d(image); zero outside the mask."""
    target = np.asarray(target, dtype=np.float64)
    count = int(fb.mask.sum())
    grad = np.zeros_like(fb.colour)
    if count == 0:
        return grad
    diff = fb.colour[fb.mask] - target[fb.mask]
    grad[fb.mask] = np.sign(diff) / (count * 3.0)
    return grad


# ------------------------------------------------------------- backward --

def render_backward(mesh, m, fb: FrameBuffer, dimage):
    """Fixed-assignment gradients of the rendered image.

    Returns ``(dpositions, dcolours, dm)``.  The framebuffer must come
    from ``render`` on identical inputs; anything else is a stale
    framebuffer and an error.  Per-pixel contributions accumulate in
    row-major pixel order, so results are deterministic.
    """
    if hasattr(mesh, "positions"):
        positions, colours, triangles = (mesh.positions, mesh.colours,
                                         mesh.triangles)
    else:
        positions, colours, triangles = mesh
    positions = np.asarray(positions, dtype=np.float64)
    colours = np.asarray(colours, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    if fb._input_hash != _hash_inputs(positions, colours, m, fb.width,
                                      fb.height):
        raise RenderError("stale framebuffer: inputs changed since render()")
    dimage = np.asarray(dimage, dtype=np.float64)
    if dimage.shape != fb.colour.shape:
        raise RenderError("image gradient shape mismatch")

    cam, lights = unpack_render_params(m)
    right, up, fwd = camera_frame(cam)
    normals = vertex_normals(positions, triangles)

    dpos = np.zeros_like(positions)
    dcol = np.zeros_like(colours)
    dnormals = np.zeros_like(normals)
    dm = np.zeros(22)

    ys, xs = np.nonzero(fb.mask)
    if len(ys) == 0:
        return dpos, dcol, dm

    tri_ids = fb.triangle_id[ys, xs]
    tri = triangles[tri_ids]                              # (P, 3)
    g = dimage[ys, xs].copy()                             # (P, 3)
    raw = fb._raw_colour[ys, xs]
    g *= (raw > 0.0) & (raw < 1.0)                        # clamp subgradient

    # --- recompute forward pixel quantities (fixed assignment) ---
    rel = positions - cam.position
    xv = rel @ right
    yv = rel @ up
    zv = rel @ fwd
    tan_half = np.tan(np.radians(cam.fov_deg) / 2.0)
    tx = tan_half * (fb.width / fb.height)
    ty = tan_half
    px = (xv / (zv * tx) + 1.0) * 0.5 * fb.width
    py = (1.0 - yv / (zv * ty)) * 0.5 * fb.height

    i0, i1, i2 = tri[:, 0], tri[:, 1], tri[:, 2]
    qx = xs + 0.5
    qy = ys + 0.5
    sx = np.stack([px[i0], px[i1], px[i2]], axis=1)       # (P, 3)
    sy = np.stack([py[i0], py[i1], py[i2]], axis=1)
    sz = np.stack([zv[i0], zv[i1], zv[i2]], axis=1)

    n_e = np.stack([
        edge_function(sx[:, 1], sy[:, 1], sx[:, 2], sy[:, 2], qx, qy),
        edge_function(sx[:, 2], sy[:, 2], sx[:, 0], sy[:, 0], qx, qy),
        edge_function(sx[:, 0], sy[:, 0], sx[:, 1], sy[:, 1], qx, qy),
    ], axis=1)                                            # (P, 3)
    area = n_e.sum(axis=1)
    lam = n_e / area[:, None]
    wt = lam / sz
    s_sum = wt.sum(axis=1)
    w = wt / s_sum[:, None]

    interp = _interpolate(w, tri, positions, normals, colours)
    pw, alb = interp["position"], interp["albedo"]
    nrm, nlen, nok = interp["normal"], interp["normal_len"], interp["normal_ok"]

    # --- shading backward ---
    dpw = np.zeros_like(pw)
    dnrm = np.zeros_like(nrm)
    dalb = np.zeros_like(alb)

    vdir = cam.position - pw
    vlen = np.maximum(np.linalg.norm(vdir, axis=1), 1e-12)
    vhat = vdir / vlen[:, None]
    dvhat = np.zeros_like(vhat)

    diffuse = np.zeros(len(pw))
    per_light = []
    for li in range(3):
        dvec = lights.positions[li] - pw
        dlen = np.maximum(np.linalg.norm(dvec, axis=1), 1e-12)
        lhat = dvec / dlen[:, None]
        ndl = np.einsum("pc,pc->p", nrm, lhat)
        lit = ndl > 0
        diffuse += lights.intensities[li] * np.where(lit, ndl, 0.0)
        refl = 2.0 * ndl[:, None] * nrm - lhat
        rv = np.einsum("pc,pc->p", refl, vhat)
        glint = lit & (rv > 0)
        per_light.append((dvec, dlen, lhat, ndl, lit, refl, rv, glint))

    dalb += g * (AMBIENT + diffuse)[:, None]
    ddiffuse = np.einsum("pc,pc->p", g, alb)
    dspec = g.sum(axis=1)

    dints = np.zeros(3)
    dlpos = np.zeros((3, 3))
    for li in range(3):
        dvec, dlen, lhat, ndl, lit, refl, rv, glint = per_light[li]
        inten = lights.intensities[li]
        # diffuse: inten * relu(ndl)
        dints[li] += float((np.where(lit, ndl, 0.0) * ddiffuse).sum())
        dndl = inten * np.where(lit, ddiffuse, 0.0)
        # specular: coeff * inten * relu(rv)^exp (only where lit)
        rv_pos = np.where(glint, rv, 0.0)
        dints[li] += float(SPECULAR_COEFF
                           * (rv_pos ** SPECULAR_EXP * dspec).sum())
        drv = (SPECULAR_COEFF * inten * SPECULAR_EXP
               * rv_pos ** (SPECULAR_EXP - 1.0) * dspec)
        drv = np.where(glint, drv, 0.0)
        drefl = drv[:, None] * vhat
        dvhat += drv[:, None] * refl
        # refl = 2 ndl nrm - lhat
        dndl += 2.0 * np.einsum("pc,pc->p", drefl, nrm)
        dnrm += 2.0 * ndl[:, None] * drefl
        dlhat = -drefl
        # ndl = nrm . lhat
        dnrm += dndl[:, None] * lhat
        dlhat += dndl[:, None] * nrm
        # lhat = dvec / |dvec|
        ddvec = (dlhat - lhat * np.einsum("pc,pc->p", lhat,
                                          dlhat)[:, None]) / dlen[:, None]
        dlpos[li] += ddvec.sum(axis=0)
        dpw -= ddvec

    # vhat = (cam.position - pw) / |...|
    ddvdir = (dvhat - vhat * np.einsum("pc,pc->p", vhat,
                                       dvhat)[:, None]) / vlen[:, None]
    dcam_p = ddvdir.sum(axis=0)
    dpw -= ddvdir

    # --- interpolation backward ---
    # nrm = nraw / |nraw| (zero where degenerate)
    dnraw = np.where(
        nok[:, None],
        (dnrm - nrm * np.einsum("pc,pc->p", nrm, dnrm)[:, None])
        / np.where(nok, nlen, 1.0)[:, None],
        0.0)

    dw = np.zeros_like(w)
    vert_pos = positions[tri]                             # (P, 3, 3)
    vert_nrm = normals[tri]
    vert_col = colours[tri]
    dw += np.einsum("pc,pkc->pk", dpw, vert_pos)
    dw += np.einsum("pc,pkc->pk", dnraw, vert_nrm)
    dw += np.einsum("pc,pkc->pk", dalb, vert_col)

    contrib_pos = w[:, :, None] * dpw[:, None, :]         # (P, 3, 3)
    contrib_nrm = w[:, :, None] * dnraw[:, None, :]
    contrib_col = w[:, :, None] * dalb[:, None, :]
    for k in range(3):
        np.add.at(dpos, tri[:, k], contrib_pos[:, k])
        np.add.at(dnormals, tri[:, k], contrib_nrm[:, k])
        np.add.at(dcol, tri[:, k], contrib_col[:, k])

    # --- perspective-correct weights backward ---
    # w_a = wt_a / S  ->  dwt_a = (dw_a - sum_b w_b dw_b) / S
    wdw = np.einsum("pk,pk->p", w, dw)
    dwt = (dw - wdw[:, None]) / s_sum[:, None]
    dlam = dwt / sz
    dsz = -dwt * lam / (sz * sz)

    # lam_a = n_a / area, area = sum_b n_b
    ldl = np.einsum("pk,pk->p", lam, dlam)
    dn_e = (dlam - ldl[:, None]) / area[:, None]

    # numerators -> screen coordinates of the three vertices
    dsx = np.zeros_like(sx)
    dsy = np.zeros_like(sy)
    # E(p, r, q): dE/dpx = ry - qy, dE/dpy = qx - rx,
    #             dE/drx = qy - py, dE/dry = px - qx
    for (a, p_i, r_i) in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        dE = dn_e[:, a]
        dsx[:, p_i] += dE * (sy[:, r_i] - qy)
        dsy[:, p_i] += dE * (qx - sx[:, r_i])
        dsx[:, r_i] += dE * (qy - sy[:, p_i])
        dsy[:, r_i] += dE * (sx[:, p_i] - qx)

    # --- projection backward (accumulate per unique vertex) ---
    dxv = np.zeros(len(positions))
    dyv = np.zeros(len(positions))
    dzv = np.zeros(len(positions))
    dtx_total = 0.0
    dty_total = 0.0
    half_w = 0.5 * fb.width
    half_h = 0.5 * fb.height
    for k in range(3):
        idx = tri[:, k]
        zk = sz[:, k]
        xk = xv[idx]
        yk = yv[idx]
        gpx = dsx[:, k]
        gpy = dsy[:, k]
        gz_persp = dsz[:, k]
        np.add.at(dxv, idx, gpx * half_w / (zk * tx))
        np.add.at(dzv, idx, -gpx * half_w * xk / (zk * zk * tx))
        dtx_total += float((-gpx * half_w * xk / (zk * tx * tx)).sum())
        np.add.at(dyv, idx, -gpy * half_h / (zk * ty))
        np.add.at(dzv, idx, gpy * half_h * yk / (zk * zk * ty))
        dty_total += float((gpy * half_h * yk / (zk * ty * ty)).sum())
        np.add.at(dzv, idx, gz_persp)

    # view coords: xv = (v - p) . right, etc.
    dpos += np.outer(dxv, right) + np.outer(dyv, up) + np.outer(dzv, fwd)
    dcam_p -= dxv.sum() * right + dyv.sum() * up + dzv.sum() * fwd
    dright = rel.T @ dxv
    dup = rel.T @ dyv
    dfwd = rel.T @ dzv

    # fov through tx = tan(f/2) * aspect, ty = tan(f/2)
    dtan = dtx_total * (fb.width / fb.height) + dty_total
    dfov = dtan * (1.0 + tan_half * tan_half) * 0.5 * (np.pi / 180.0)

    # --- camera frame backward ---
    dcam_p2, dlook, dup_in, dfwd_res = _camera_frame_backward(
        cam, right, up, fwd, dright, dup, dfwd)
    dcam_p += dcam_p2

    # --- vertex normals backward ---
    dpos += _vertex_normals_backward(positions, triangles, normals, dnormals)

    dm[0:3] = dcam_p
    dm[3:6] = dlook
    dm[6:9] = dup_in
    dm[9] = dfov
    for li in range(3):
        dm[10 + 4 * li: 13 + 4 * li] = dlpos[li]
        dm[13 + 4 * li] = dints[li]
    return dpos, dcol, dm


def _normalize_backward(vec_unit, length, dunit):
    return (dunit - vec_unit * (vec_unit @ dunit)) / length


def _camera_frame_backward(cam, right, up, fwd, dright, dup, dfwd):
    """Backprop through the look-at frame to (position, lookat, up, .)"""
    # up = right x fwd
    dright = dright + np.cross(fwd, dup)
    dfwd = dfwd + np.cross(dup, right)
    # right = normalize(fwd x u)
    cross_fu = np.cross(fwd, cam.up)
    len_fu = np.linalg.norm(cross_fu)
    dcross = _normalize_backward(right, len_fu, dright)
    dfwd = dfwd + np.cross(cam.up, dcross)
    du_in = np.cross(dcross, fwd)
    # fwd = normalize(o - p)
    gaze = cam.lookat - cam.position
    len_g = np.linalg.norm(gaze)
    dgaze = _normalize_backward(fwd, len_g, dfwd)
    return -dgaze, dgaze, du_in, None


def _vertex_normals_backward(positions, triangles, normals, dnormals):
    """Backprop area-weighted unit vertex normals to vertex positions."""
    raw = np.zeros_like(positions)
    fn = np.cross(positions[triangles[:, 1]] - positions[triangles[:, 0]],
                  positions[triangles[:, 2]] - positions[triangles[:, 0]])
    for k in range(3):
        np.add.at(raw, triangles[:, k], fn)
    lens = np.linalg.norm(raw, axis=1)
    ok = lens > 1e-300
    safe = np.where(ok, lens, 1.0)
    unit = raw / safe[:, None]
    draw = np.where(
        ok[:, None],
        (dnormals - unit * np.einsum("nc,nc->n", unit,
                                     dnormals)[:, None]) / safe[:, None],
        0.0)
    # each triangle's cross product feeds all three of its vertices
    dcross = (draw[triangles[:, 0]] + draw[triangles[:, 1]]
              + draw[triangles[:, 2]])
    e1 = positions[triangles[:, 1]] - positions[triangles[:, 0]]
    e2 = positions[triangles[:, 2]] - positions[triangles[:, 0]]
    de1 = np.cross(e2, dcross)
    de2 = np.cross(dcross, e1)
    dpos = np.zeros_like(positions)
    np.add.at(dpos, triangles[:, 1], de1)
    np.add.at(dpos, triangles[:, 2], de2)
    np.add.at(dpos, triangles[:, 0], -de1 - de2)
    return dpos


# ------------------------------------------------------------ squashers --

def squash_render_params(raw):
    """Map unbounded head outputs into the renderer's scene box.

    Camera position and look-at are tanh-bounded, the field of view is a
    sigmoid into (20, 120) degrees, and light intensities go through a
    softplus.  At raw = 0 the result is the neutral frontal scene.
    """
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if raw.shape != (22,):
        raise RenderError(f"raw render parameters must have 22 values, "
                          f"got {raw.shape}")
    m = np.empty(22)
    t_cam = np.tanh(raw[0:3])
    m[0:3] = CAM_CENTER + CAM_HALF * t_cam
    t_look = np.tanh(raw[3:6])
    m[3:6] = LOOK_HALF * t_look
    t_up = np.tanh(raw[6:9])
    m[6:9] = UP_BASE + UP_HALF * t_up
    s_fov = 1.0 / (1.0 + np.exp(-raw[9]))
    m[9] = FOV_LOW + FOV_RANGE * s_fov
    t_lp = []
    s_int = []
    for li in range(3):
        tl = np.tanh(raw[10 + 4 * li: 13 + 4 * li])
        t_lp.append(tl)
        m[10 + 4 * li: 13 + 4 * li] = LIGHT_CENTERS[li] + LIGHT_HALF * tl
        x = raw[13 + 4 * li]
        m[13 + 4 * li] = np.logaddexp(0.0, x)             # softplus
        s_int.append(1.0 / (1.0 + np.exp(-x)))
    cache = (t_cam, t_look, t_up, s_fov, t_lp, s_int)
    return m, cache


def squash_render_params_backward(cache, dm):
    t_cam, t_look, t_up, s_fov, t_lp, s_int = cache
    dm = np.asarray(dm, dtype=np.float64).reshape(-1)
    draw = np.empty(22)
    draw[0:3] = dm[0:3] * CAM_HALF * (1.0 - t_cam ** 2)
    draw[3:6] = dm[3:6] * LOOK_HALF * (1.0 - t_look ** 2)
    draw[6:9] = dm[6:9] * UP_HALF * (1.0 - t_up ** 2)
    draw[9] = dm[9] * FOV_RANGE * s_fov * (1.0 - s_fov)
    for li in range(3):
        draw[10 + 4 * li: 13 + 4 * li] = (dm[10 + 4 * li: 13 + 4 * li]
                                          * LIGHT_HALF * (1.0 - t_lp[li] ** 2))
        draw[13 + 4 * li] = dm[13 + 4 * li] * s_int[li]
    return draw


# ------------------------------------------------------------- image IO --

def write_ppm(path, image):
    """8-bit binary PPM; bit-exact for golden-image comparisons."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise RenderError(f"image must be (H, W, 3), got {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n"
                 .encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise RenderError(f"{path}: not a binary PPM")
        fields = []
        while len(fields) < 3:
            line = fh.readline()
            if line.startswith(b"#"):
                continue
            fields.extend(line.split())
        width, height, maxval = (int(v) for v in fields[:3])
        data = np.frombuffer(fh.read(width * height * 3), dtype=np.uint8)
    return data.reshape(height, width, 3).astype(np.float64) / maxval


def write_png(path, image):
    from PIL import Image

    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def read_png(path):
    from PIL import Image

    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"))
    return data.astype(np.float64) / 255.0


def depth_debug_image(fb: FrameBuffer):
    """False-colour depth and triangle-id dump for debugging."""
    img = np.zeros((fb.height, fb.width, 3))
    if fb.mask.any():
        d = fb.depth.copy()
        lo, hi = d[fb.mask].min(), d[fb.mask].max()
        span = (hi - lo) or 1.0
        img[..., 0] = np.where(fb.mask, 1.0 - (d - lo) / span, 0.0)
        img[..., 1] = np.where(fb.mask,
                               (fb.triangle_id % 255) / 255.0, 0.0)
    return img
