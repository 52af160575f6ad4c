"""Synthetic two-point Dixon phantoms with controlled fat-water swaps.

Anatomy is a painter's-order stack of ellipsoids, each with a proton density
and a fat fraction. Echoes follow the two-point model

    IP = (W + F) exp(-i phi0),   OP = (W - F) exp(-i (phi0 + phi)),
    phi = 2 pi psi dTE,

and only magnitudes are exported. Scanner-side separation is emulated as the
algebraic inversion plus explicit swap directives.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, replace
from dataclasses import field as dc_field
from pathlib import Path

import numpy as np

from .errors import DegenerateError, DirectiveError
from .volume import (Channel, DixonStudy, Provenance, Volume, read_volume,
                     write_volume)

# 1.5 T opposed/in-phase echo spacing (s)
DEFAULT_DELTA_TE = 2.38e-3


class SwapKind(str, enum.Enum):
    FULL_SLAB = "FULL_SLAB"
    HALF_LEG = "HALF_LEG"
    BLOB = "BLOB"
    BOUNDARY_SHELL = "BOUNDARY_SHELL"


@dataclass
class TissueBody:
    center: tuple
    radii: tuple
    proton_density: float = 1.0
    fat_fraction: float = 0.0
    name: str = ""

    def __post_init__(self):
        if not 0.0 <= self.fat_fraction <= 1.0:
            raise ValueError(f"fat_fraction {self.fat_fraction} outside [0, 1]")
        if self.proton_density < 0:
            raise ValueError("proton_density must be non-negative")
        if min(self.radii) <= 0:
            raise ValueError("ellipsoid radii must be positive")

    def mask(self, dims):
        grid = np.ogrid[tuple(slice(0, n) for n in dims)]
        r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, self.center, self.radii))
        return r2 <= 1.0


@dataclass
class FieldMapParams:
    """Quadratic polynomials over coordinates normalised to [-1, 1].

    Coefficient order: 1, x, y, z, x^2, y^2, z^2, xy, xz, yz.
    ``psi_coeffs`` are in Hz, ``phi0_coeffs`` in radians.
    """

    psi_coeffs: tuple = (0.0,) * 10
    delta_te: float = DEFAULT_DELTA_TE
    phi0_coeffs: tuple = (0.0,) * 10

    @staticmethod
    def _poly(coeffs, dims):
        coeffs = tuple(coeffs) + (0.0,) * (10 - len(coeffs))
        x, y, z = np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in dims], indexing="ij")
        terms = (np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, x * z, y * z)
        return sum(c * t for c, t in zip(coeffs, terms) if c != 0.0) + np.zeros(dims)

    def psi(self, dims):
        return self._poly(self.psi_coeffs, dims)

    def phi(self, dims):
        return 2.0 * math.pi * self.psi(dims) * self.delta_te

    def phi0(self, dims):
        return self._poly(self.phi0_coeffs, dims)


@dataclass
class SwapDirective:
    """A region whose fat and water labels the emulated scanner exchanges.

    Geometry keys by kind:
      FULL_SLAB       z_range=(z0, z1)                 half-open slab
      HALF_LEG        side="left"|"right", z_range     one sagittal half
      BLOB            center=(x, y, z), radius         ball, radius > 0
      BOUNDARY_SHELL  thickness, optional z_range      near the x/y faces
    """

    kind: SwapKind
    geometry: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.kind = SwapKind(self.kind)

    def mask(self, dims):
        g = self.geometry
        nx, ny, nz = dims
        m = np.zeros(dims, dtype=bool)
        if self.kind is SwapKind.FULL_SLAB:
            z0, z1 = g["z_range"]
            m[:, :, max(z0, 0):min(z1, nz)] = True
        elif self.kind is SwapKind.HALF_LEG:
            z0, z1 = g["z_range"]
            half = slice(0, nx // 2) if g.get("side", "left") == "left" else slice(nx // 2, nx)
            m[half, :, max(z0, 0):min(z1, nz)] = True
        elif self.kind is SwapKind.BLOB:
            radius = float(g["radius"])
            if radius <= 0:
                raise DirectiveError(f"BLOB radius must be positive, got {radius}")
            grid = np.ogrid[0:nx, 0:ny, 0:nz]
            r2 = sum((a - c) ** 2 for a, c in zip(grid, g["center"]))
            m = r2 <= radius * radius
        elif self.kind is SwapKind.BOUNDARY_SHELL:
            t = int(g["thickness"])
            if t > 0:
                m[:t] = m[-t:] = True
                m[:, :t] = m[:, -t:] = True
            if "z_range" in g:
                z0, z1 = g["z_range"]
                zm = np.zeros(nz, dtype=bool)
                zm[max(z0, 0):min(z1, nz)] = True
                m &= zm[None, None, :]
        if not m.any():
            raise DirectiveError(f"{self.kind.value} directive {g} selects no voxels")
        return m

    def to_dict(self):
        return {"kind": self.kind.value, "geometry": _jsonable(self.geometry)}


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: tuple = (48, 48, 48)
    spacing: tuple = (2.23, 2.23, 3.0)
    bodies: list = dc_field(default_factory=list)
    field: FieldMapParams = dc_field(default_factory=FieldMapParams)
    noise_sigma: float = 0.0
    swaps: list = dc_field(default_factory=list)

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if min(self.dims) < 1:
            raise ValueError(f"dims must be positive, got {self.dims}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        for b in self.bodies:
            if not b.mask(self.dims).any():
                raise ValueError(f"body {b.name or b.center} lies outside the volume")

    def to_dict(self):
        return _jsonable({
            "seed": self.seed, "dims": self.dims, "spacing": self.spacing,
            "bodies": [asdict(b) for b in self.bodies],
            "field": asdict(self.field), "noise_sigma": self.noise_sigma,
            "swaps": [s.to_dict() for s in self.swaps],
        })

    @classmethod
    def from_dict(cls, d):
        return cls(
            seed=int(d.get("seed", 0)),
            dims=tuple(d["dims"]),
            spacing=tuple(d.get("spacing", (2.23, 2.23, 3.0))),
            bodies=[TissueBody(**{**b, "center": tuple(b["center"]), "radii": tuple(b["radii"])})
                    for b in d.get("bodies", [])],
            field=FieldMapParams(**d.get("field", {})),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            swaps=[SwapDirective(s["kind"], dict(s.get("geometry", {}))) for s in d.get("swaps", [])],
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj


# -- anatomy ---------------------------------------------------------------------

def torso_bodies(dims, rng=None):
    """Stacked-ellipsoid torso: subcutaneous fat, muscle wall, liver, two
    kidneys, a fluid-filled bladder and vertebral marrow. With ``rng`` the
    geometry, densities and fat fractions are jittered per subject."""
    nx, ny, nz = dims
    cx, cy, cz = (nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2

    def j(scale=0.08):
        return 1.0 + (rng.uniform(-scale, scale) if rng is not None else 0.0)

    def u(lo, hi, default):
        return rng.uniform(lo, hi) if rng is not None else default

    shell = TissueBody((cx, cy, cz), (0.46 * nx * j(), 0.40 * ny * j(), 0.47 * nz * j()),
                       1.0 * j(0.05), u(0.85, 0.95, 0.9), "subcutaneous_fat")
    muscle = TissueBody((cx, cy, cz), (shell.radii[0] - 0.09 * nx * j(0.3),
                                       shell.radii[1] - 0.09 * ny * j(0.3),
                                       shell.radii[2] - 0.05 * nz),
                        0.75 * j(0.05), u(0.02, 0.1, 0.05), "muscle")
    visceral = TissueBody((cx, cy, cz), (muscle.radii[0] * 0.8, muscle.radii[1] * 0.75,
                                         muscle.radii[2] * 0.9),
                          0.9 * j(0.05), u(0.4, 0.7, 0.55), "visceral_fat")
    liver = TissueBody((cx - 0.1 * nx * j(0.5), cy, cz + 0.2 * nz * j(0.3)),
                       (0.17 * nx * j(), 0.16 * ny * j(), 0.12 * nz * j()),
                       0.85 * j(0.05), u(0.02, 0.3, 0.05), "liver")
    kid_l = TissueBody((cx - 0.16 * nx, cy + 0.12 * ny, cz * j(0.1)),
                       (0.06 * nx * j(), 0.06 * ny * j(), 0.09 * nz * j()),
                       0.8 * j(0.05), u(0.0, 0.05, 0.02), "kidney_left")
    kid_r = replace(kid_l, center=(cx + 0.16 * nx, cy + 0.12 * ny, cz * j(0.1)), name="kidney_right")
    bladder = TissueBody((cx, cy - 0.05 * ny, cz - 0.28 * nz * j(0.2)),
                         (0.1 * nx * j(), 0.09 * ny * j(), 0.08 * nz * j()),
                         1.2 * j(0.04), u(0.0, 0.02, 0.0), "bladder")
    marrow = TissueBody((cx, cy + 0.26 * ny, cz), (0.05 * nx * j(), 0.05 * ny * j(), 0.4 * nz),
                        0.95 * j(0.05), u(0.6, 0.8, 0.7), "marrow")
    return [shell, muscle, visceral, liver, kid_l, kid_r, bladder, marrow]


def default_field(rng=None, max_hz=120.0):
    """Smooth off-resonance growing toward the volume boundary."""
    if rng is None:
        psi = (0.0, 0.0, 0.0, 0.0, max_hz / 3, max_hz / 3, max_hz / 3, 0.0, 0.0, 0.0)
        return FieldMapParams(psi_coeffs=psi)
    psi = tuple(rng.uniform(-0.2, 0.2) * max_hz for _ in range(4)) + \
        tuple(rng.uniform(0.1, 0.4) * max_hz for _ in range(3)) + \
        tuple(rng.uniform(-0.1, 0.1) * max_hz for _ in range(3))
    phi0 = tuple(rng.uniform(-math.pi, math.pi) if i == 0 else rng.uniform(-0.5, 0.5)
                 for i in range(10))
    return FieldMapParams(psi_coeffs=psi, phi0_coeffs=phi0)


def default_spec(dims=(48, 48, 48), seed=0, noise_sigma=0.01):
    return PhantomSpec(seed=seed, dims=dims, bodies=torso_bodies(dims),
                       field=default_field(), noise_sigma=noise_sigma)


def render_truth(spec: PhantomSpec):
    """Paint bodies in order; returns (water, fat)."""
    if not spec.bodies:
        raise DegenerateError("phantom has no tissue bodies")
    water = np.zeros(spec.dims)
    fat = np.zeros(spec.dims)
    for b in spec.bodies:
        m = b.mask(spec.dims)
        water[m] = b.proton_density * (1.0 - b.fat_fraction)
        fat[m] = b.proton_density * b.fat_fraction
    return (Volume(water, spec.spacing, Channel.W), Volume(fat, spec.spacing, Channel.F))


# -- signal model ------------------------------------------------------------------

def echo_signals(water, fat, field: FieldMapParams, noise_sigma=0.0, seed=0):
    """Complex in-phase and opposed-phase signals with complex Gaussian
    noise of std ``noise_sigma`` per real/imaginary part."""
    dims = water.dims
    w = np.asarray(water.data, dtype=np.float64)
    f = np.asarray(fat.data, dtype=np.float64)
    phi0 = field.phi0(dims)
    phi = field.phi(dims)
    ip_c = (w + f) * np.exp(-1j * phi0)
    op_c = (w - f) * np.exp(-1j * (phi0 + phi))
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_sigma, size=(4,) + dims)
        ip_c = ip_c + noise[0] + 1j * noise[1]
        op_c = op_c + noise[2] + 1j * noise[3]
    return ip_c, op_c


def synthesize_echoes(water, fat, field: FieldMapParams, noise_sigma=0.0, seed=0):
    """Magnitude in-phase and opposed-phase volumes: (ip, op)."""
    if water.dims != fat.dims:
        raise ValueError("water and fat are not co-registered")
    ip_c, op_c = echo_signals(water, fat, field, noise_sigma, seed)
    return (Volume(np.abs(ip_c), water.spacing, Channel.IP),
            Volume(np.abs(op_c), water.spacing, Channel.OP))


def swap_mask(swaps, dims):
    """Voxels left exchanged after applying every directive in turn."""
    m = np.zeros(dims, dtype=bool)
    for d in swaps:
        m ^= d.mask(dims)
    return m


def apply_swaps(fat, water, swaps):
    """Exchange fat and water inside each directive's mask, in order."""
    f = np.array(fat.data, copy=True)
    w = np.array(water.data, copy=True)
    for d in swaps:
        m = d.mask(fat.dims)
        f[m], w[m] = w[m], f[m].copy()
    return fat.with_data(f), water.with_data(w)


def scanner_separation(ip, op, swaps=(), op_sign=None):
    """Emulated scanner separation; returns (fat, water).

    Without ``op_sign`` this is the magnitude-only inversion
    water = (ip + op)/2, fat = (ip - op)/2, which silently swaps every voxel
    where fat dominates. ``op_sign`` (+1 where water dominates) stands in for
    the phase information the scanner has and the export drops.
    """
    if ip.dims != op.dims:
        raise ValueError("ip and op are not co-registered")
    signed = np.asarray(op.data, dtype=np.float64)
    if op_sign is not None:
        signed = signed * np.where(np.asarray(op_sign) < 0, -1.0, 1.0)
    ipd = np.asarray(ip.data, dtype=np.float64)
    water = np.maximum((ipd + signed) / 2.0, 0.0)
    fat = np.maximum((ipd - signed) / 2.0, 0.0)
    fat_v = Volume(fat, ip.spacing, Channel.F)
    water_v = Volume(water, ip.spacing, Channel.W)
    if swaps:
        fat_v, water_v = apply_swaps(fat_v, water_v, swaps)
    return fat_v, water_v


def make_study(spec: PhantomSpec, subject_id="subject"):
    """Returns (truth, scanner) studies sharing the same ip/op echoes."""
    water, fat = render_truth(spec)
    ip_c, op_c = echo_signals(water, fat, spec.field, spec.noise_sigma, spec.seed)
    ip = Volume(np.abs(ip_c), spec.spacing, Channel.IP)
    op = Volume(np.abs(op_c), spec.spacing, Channel.OP)
    # phase-corrected real part of OP carries the sign of (W - F)
    demod = np.real(op_c * np.exp(1j * (spec.field.phi0(spec.dims) + spec.field.phi(spec.dims))))
    s_fat, s_water = scanner_separation(ip, op, spec.swaps, op_sign=np.sign(demod))
    truth = DixonStudy(ip, op, fat, water, Provenance.SIMULATED_TRUTH, subject_id)
    scanner = DixonStudy(ip, op, s_fat, s_water, Provenance.SIMULATED_SCANNER, subject_id)
    return truth, scanner


# -- corpus ----------------------------------------------------------------------------

CHANNEL_FILES = {"ip": "ip.dvol", "op": "op.dvol", "fat": "fat.dvol", "water": "water.dvol"}
_TAGS = {"ip": Channel.IP, "op": Channel.OP, "fat": Channel.F, "water": Channel.W}


def random_swaps(dims, rng, count):
    nx, ny, nz = dims
    kinds = [SwapKind.FULL_SLAB, SwapKind.HALF_LEG, SwapKind.BLOB, SwapKind.BOUNDARY_SHELL]
    out = []
    for _ in range(count):
        kind = kinds[rng.integers(len(kinds))]
        if kind is SwapKind.FULL_SLAB:
            z0 = int(rng.integers(0, nz - nz // 4))
            out.append(SwapDirective(kind, {"z_range": [z0, z0 + max(2, nz // 5)]}))
        elif kind is SwapKind.HALF_LEG:
            z0 = int(rng.integers(0, nz // 3))
            out.append(SwapDirective(kind, {"side": ["left", "right"][rng.integers(2)],
                                            "z_range": [z0, z0 + nz // 3]}))
        elif kind is SwapKind.BLOB:
            center = [int(rng.integers(n // 4, 3 * n // 4)) for n in dims]
            out.append(SwapDirective(kind, {"center": center,
                                            "radius": float(rng.uniform(0.08, 0.15) * min(dims))}))
        else:
            z0 = int(rng.integers(0, nz // 2))
            out.append(SwapDirective(kind, {"thickness": max(1, min(nx, ny) // 12),
                                            "z_range": [z0, z0 + nz // 2]}))
    return out


def subject_spec(base: PhantomSpec, index, seed, swaps=()):
    """Per-subject jitter of the base geometry, deterministic in (seed, index)."""
    rng = np.random.default_rng([seed, index])
    return PhantomSpec(seed=int(rng.integers(2 ** 31)), dims=base.dims, spacing=base.spacing,
                       bodies=torso_bodies(base.dims, rng), field=default_field(rng),
                       noise_sigma=base.noise_sigma, swaps=list(swaps))


def write_study(study: DixonStudy, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, vol in study.channels().items():
        write_volume(vol, directory / CHANNEL_FILES[name])


def read_study(directory, provenance=Provenance.SIMULATED_SCANNER, subject_id=""):
    directory = Path(directory)
    vols = {k: read_volume(directory / f, _TAGS[k]) for k, f in CHANNEL_FILES.items()}
    return DixonStudy(vols["ip"], vols["op"], vols["fat"], vols["water"],
                      provenance, subject_id or directory.parent.name)


def generate_corpus(base_spec: PhantomSpec, n, swap_rate, seed, out_dir):
    """Write ``n`` subjects and a manifest.json; exactly round(n*swap_rate)
    subjects receive 1-3 random swap directives."""
    if n < 1:
        raise ValueError("corpus needs at least one subject")
    if not 0.0 <= swap_rate <= 1.0:
        raise ValueError("swap_rate must lie in [0, 1]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_swapped = int(round(n * swap_rate))
    pick = np.random.default_rng([seed, 2 ** 20]).permutation(n)[:n_swapped]
    swapped = set(int(i) for i in pick)
    subjects = []
    for i in range(n):
        sid = f"sub{i:04d}"
        swaps = []
        if i in swapped:
            srng = np.random.default_rng([seed, i, 1])
            swaps = random_swaps(base_spec.dims, srng, int(srng.integers(1, 4)))
        spec = subject_spec(base_spec, i, seed, swaps)
        truth, scanner = make_study(spec, sid)
        sdir = out / sid
        write_study(truth, sdir / "truth")
        write_study(scanner, sdir / "scanner")
        mask = swap_mask(spec.swaps, spec.dims).astype(np.float32)
        write_volume(Volume(mask, spec.spacing), sdir / "swap_mask.dvol")
        subjects.append({
            "subject_id": sid,
            "swapped": bool(swaps),
            "truth": {k: f"{sid}/truth/{f}" for k, f in CHANNEL_FILES.items()},
            "scanner": {k: f"{sid}/scanner/{f}" for k, f in CHANNEL_FILES.items()},
            "swap_mask": f"{sid}/swap_mask.dvol",
            "swap_voxels": int(mask.sum()),
            "spec": spec.to_dict(),
        })
    manifest = {"seed": seed, "n": n, "swap_rate": swap_rate, "n_swapped": n_swapped,
                "dims": list(base_spec.dims), "subjects": subjects}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["root"] = str(path.parent)
    return manifest


def load_subject(manifest, entry, which="scanner"):
    root = Path(manifest["root"])
    prov = Provenance.SIMULATED_SCANNER if which == "scanner" else Provenance.SIMULATED_TRUTH
    vols = {k: read_volume(root / p, _TAGS[k]) for k, p in entry[which].items()}
    return DixonStudy(vols["ip"], vols["op"], vols["fat"], vols["water"], prov, entry["subject_id"])
