"""Procedural driving scenes with exact segmentation maps.

Every scene is a function of an integer seed. The geometry (sky, road,
buildings, cars, vegetation) is drawn once per seed and rasterized into a
class map; the same geometry can then be rendered in any domain of
:data:`DOMAINS`. Domains differ only photometrically, so the class map of a
spec is identical in every domain.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

HEIGHT = 32
WIDTH = 64

CLASSES = ("sky", "road", "building", "car", "vegetation")
SKY, ROAD, BUILDING, CAR, VEGETATION = range(len(CLASSES))
NUM_CLASSES = len(CLASSES)

DOMAINS = ("day", "night", "snow", "rain", "fog", "game")
SOURCE_DOMAIN = "day"
TARGET_DOMAINS = ("night", "snow", "rain", "fog")


def domain_index(domain: str | int) -> int:
    if isinstance(domain, (int, np.integer)):
        if not 0 <= int(domain) < len(DOMAINS):
            raise ValueError(f"unknown domain id {domain}")
        return int(domain)
    try:
        return DOMAINS.index(domain)
    except ValueError:
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}") from None


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    horizon: int
    road_top: int
    buildings: tuple[tuple[int, int, int], ...]  # (x0, x1, top)
    vegetation: tuple[tuple[float, float, float, float], ...]  # (cx, cy, rx, ry)
    cars: tuple[tuple[int, int, int, int], ...]  # (x0, x1, y0, y1)

    def rasterize(self) -> np.ndarray:
        layout = np.full((HEIGHT, WIDTH), VEGETATION, dtype=np.int64)
        layout[: self.horizon] = SKY
        layout[self.road_top :] = ROAD
        for x0, x1, top in self.buildings:
            layout[top : self.road_top, x0:x1] = BUILDING
        yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH]
        for cx, cy, rx, ry in self.vegetation:
            blob = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
            layout[blob & (yy < self.road_top)] = VEGETATION
        for x0, x1, y0, y1 in self.cars:
            layout[y0:y1, x0:x1] = CAR
        return layout


@dataclass
class SceneSample:
    image: np.ndarray  # (3, H, W) float32 in [-1, 1]
    layout: np.ndarray  # (H, W) int64 class map
    domain: str
    seed: int


def generate_spec(seed: int) -> SceneSpec:
    """Draw a scene geometry from ``seed``.

    The draw is deterministic; rasterizing the result assigns exactly one
    class to every pixel because later layers overwrite earlier ones.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x5CE4E]))
    horizon = int(rng.integers(8, 14))
    road_top = int(rng.integers(19, 24))

    buildings = []
    for _ in range(int(rng.integers(2, 5))):
        width = int(rng.integers(8, 21))
        x0 = int(rng.integers(-4, WIDTH - 4))
        top = int(rng.integers(2, horizon + 3))
        buildings.append((max(x0, 0), min(x0 + width, WIDTH), top))

    vegetation = []
    for _ in range(int(rng.integers(1, 4))):
        cx = float(rng.uniform(0, WIDTH))
        cy = float(rng.uniform(road_top - 6, road_top - 1))
        vegetation.append((cx, cy, float(rng.uniform(4, 10)), float(rng.uniform(2, 5))))

    cars = []
    for _ in range(int(rng.integers(1, 4))):
        width = int(rng.integers(7, 14))
        height = int(rng.integers(3, 7))
        x0 = int(rng.integers(0, WIDTH - width))
        y1 = int(rng.integers(road_top + height, HEIGHT + 1))
        cars.append((x0, x0 + width, y1 - height, y1))

    return SceneSpec(
        seed=int(seed),
        horizon=horizon,
        road_top=road_top,
        buildings=tuple(buildings),
        vegetation=tuple(vegetation),
        cars=tuple(cars),
    )


# ---------------------------------------------------------------- rendering

_BUILDING_COLORS = np.array(
    [[0.72, 0.62, 0.48], [0.55, 0.52, 0.50], [0.66, 0.45, 0.36], [0.80, 0.76, 0.66]]
)
_CAR_COLORS = np.array(
    [[0.80, 0.12, 0.10], [0.12, 0.22, 0.70], [0.90, 0.78, 0.15], [0.15, 0.15, 0.17], [0.92, 0.92, 0.92]]
)


class DataAccessAudit:
    """Records every (domain, seed) rendered while active.

    Used to prove that an adaptation run never materializes a target-domain
    image. Activate with :func:`audit_renders`.
    """

    def __init__(self) -> None:
        self.records: list[tuple[str, int]] = []

    @property
    def domains(self) -> set[str]:
        return {d for d, _ in self.records}

    def assert_only(self, *allowed: str) -> None:
        bad = sorted(self.domains - set(allowed))
        if bad:
            raise AssertionError(f"renders outside {allowed}: {bad}")


_ACTIVE_AUDITS: list[DataAccessAudit] = []


@contextlib.contextmanager
def audit_renders() -> Iterator[DataAccessAudit]:
    audit = DataAccessAudit()
    _ACTIVE_AUDITS.append(audit)
    try:
        yield audit
    finally:
        _ACTIVE_AUDITS.remove(audit)


def _day_image(spec: SceneSpec, layout: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((HEIGHT, WIDTH, 3))
    rows = np.arange(HEIGHT)[:, None, None] / HEIGHT

    sky = np.array([0.42, 0.62, 0.95]) + rng.normal(0, 0.03, 3)
    img[:] = sky + 0.35 * rows * np.array([0.6, 0.4, 0.05])

    veg = np.array([0.20, 0.50, 0.18]) + rng.normal(0, 0.03, 3)
    veg_tex = veg + rng.normal(0, 0.06, (HEIGHT, WIDTH, 1)) * np.array([0.6, 1.0, 0.5])
    img = np.where((layout == VEGETATION)[..., None], veg_tex, img)

    road = 0.45 + rng.normal(0, 0.03)
    road_tex = road + rng.normal(0, 0.02, (HEIGHT, WIDTH, 1)) + np.zeros(3)
    lane_row = (spec.road_top + HEIGHT) // 2
    dashes = (np.arange(WIDTH) // 4) % 2 == 0
    road_tex[lane_row, dashes] = 0.9
    img = np.where((layout == ROAD)[..., None], road_tex, img)

    for x0, x1, top in spec.buildings:
        color = _BUILDING_COLORS[rng.integers(len(_BUILDING_COLORS))] + rng.normal(0, 0.03, 3)
        tile = np.broadcast_to(color, (HEIGHT, WIDTH, 3)).copy()
        win = ((np.arange(HEIGHT)[:, None] % 3) == 1) & ((np.arange(WIDTH)[None, :] % 3) == 1)
        tile[win] *= 0.45
        region = np.zeros((HEIGHT, WIDTH), dtype=bool)
        region[top : spec.road_top, x0:x1] = True
        img = np.where((region & (layout == BUILDING))[..., None], tile, img)

    for x0, x1, y0, y1 in spec.cars:
        color = _CAR_COLORS[rng.integers(len(_CAR_COLORS))]
        body = np.broadcast_to(color, (HEIGHT, WIDTH, 3)).copy()
        body[y0] = 0.25  # windshield strip
        body[y1 - 1] = 0.08  # tyres
        region = np.zeros((HEIGHT, WIDTH), dtype=bool)
        region[y0:y1, x0:x1] = True
        img = np.where((region & (layout == CAR))[..., None], body, img)

    return img * (1.0 + rng.normal(0, 0.04))


def _night(img, layout, spec, rng):
    out = img * 0.22 + np.array([0.0, 0.02, 0.07])
    out[layout == SKY] = np.array([0.02, 0.03, 0.10])
    lit = (layout == BUILDING) & (rng.random(layout.shape) < 0.12)
    out[lit] = np.array([0.85, 0.75, 0.35])
    for x0, x1, y0, y1 in spec.cars:
        out[y1 - 2, x0 : min(x0 + 2, x1)] = np.array([1.0, 0.95, 0.7])
        out[y1 - 2, max(x1 - 2, x0) : x1] = np.array([1.0, 0.95, 0.7])
    return out + rng.normal(0, 0.04, out.shape)


def _snow(img, layout, spec, rng):
    out = img.copy()
    white = np.array([0.88, 0.90, 0.94])
    ground = (layout == ROAD) | (layout == VEGETATION)
    out[ground] = 0.25 * out[ground] + 0.75 * white
    out[layout == SKY] = np.array([0.78, 0.80, 0.84])
    for x0, x1, y0, y1 in spec.cars:
        out[y0, x0:x1] = white
    for x0, x1, top in spec.buildings:
        out[top, x0:x1] = white
    out = out + rng.normal(0, 0.05, layout.shape)[..., None] * ground[..., None]
    flakes = rng.random(layout.shape) < 0.04
    out[flakes] = 0.97
    return out


def _rain(img, layout, spec, rng):
    gray = img.mean(axis=-1, keepdims=True)
    out = 0.4 * img + 0.6 * gray
    out = (out - out.mean()) * 0.55 + out.mean() * 0.8 + np.array([0.0, 0.02, 0.06])
    out[layout == SKY] = np.array([0.48, 0.50, 0.55])
    streaks = np.zeros(layout.shape, dtype=bool)
    for x in rng.integers(0, WIDTH, 14):
        y0 = int(rng.integers(0, HEIGHT - 6))
        length = int(rng.integers(4, 9))
        ys = np.arange(y0, min(y0 + length, HEIGHT))
        xs = np.clip(x + (ys - y0) // 3, 0, WIDTH - 1)
        streaks[ys, xs] = True
    out[streaks] = out[streaks] * 0.4 + 0.45
    # overcast: darker and cooler than day
    out = out * 0.88 + np.array([-0.03, 0.0, 0.03])
    return out + rng.normal(0, 0.015, out.shape)


def _fog(img, layout, spec, rng):
    rows = np.arange(HEIGHT, dtype=float)[:, None]
    depth = np.clip((HEIGHT - rows) / (HEIGHT - spec.horizon + 1e-9), 0.0, 1.0)
    weight = (0.35 + 0.55 * depth)[..., None] * np.ones((1, WIDTH, 1))
    fog_color = np.array([0.74, 0.75, 0.76])
    out = img * (1 - weight) + fog_color * weight
    return out + rng.normal(0, 0.01, out.shape)


def _game(img, layout, spec, rng):
    # warm engine colour grade, then boosted saturation and posterization
    img = np.clip(img * np.array([1.0, 0.9, 0.72]) + np.array([0.08, 0.04, 0.0]), 0, 1)
    mean = img.mean(axis=-1, keepdims=True)
    out = np.clip(mean + 1.8 * (img - mean), 0, 1)
    out = np.round(out * 3) / 3
    edge = np.zeros(layout.shape, dtype=bool)
    edge[1:] |= layout[1:] != layout[:-1]
    edge[:, 1:] |= layout[:, 1:] != layout[:, :-1]
    out[edge] = 0.05
    return out


_DOMAIN_FX = {"night": _night, "snow": _snow, "rain": _rain, "fog": _fog, "game": _game}


def render(spec: SceneSpec, domain: str | int) -> SceneSample:
    """Render ``spec`` in ``domain``; the layout does not depend on the domain."""
    name = DOMAINS[domain_index(domain)]
    for audit in _ACTIVE_AUDITS:
        audit.records.append((name, spec.seed))
    layout = spec.rasterize()
    base_rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFF, 1]))
    img = _day_image(spec, layout, base_rng)
    if name != SOURCE_DOMAIN:
        fx_rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed & 0xFFFFFFFF, 2, DOMAINS.index(name)])
        )
        img = _DOMAIN_FX[name](img, layout, spec, fx_rng)
    img = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
    return SceneSample(
        image=np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32),
        layout=layout,
        domain=name,
        seed=spec.seed,
    )


def render_seed(seed: int, domain: str | int) -> SceneSample:
    return render(generate_spec(seed), domain)


# ------------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitConfig:
    pretrain_size: int = 512
    adapt_size: int = 256
    eval_size: int = 128
    pretrain_start: int = 0
    adapt_start: int = 100_000
    eval_start: int = 200_000
    eval_stride: int = 10_000
    pretrain_domains: tuple[str, ...] = ("day",) + TARGET_DOMAINS
    target_domains: tuple[str, ...] = TARGET_DOMAINS
    source_domain: str = SOURCE_DOMAIN


@dataclass
class Splits:
    config: SplitConfig
    pretrain_corpus: list[SceneSample]
    adapt_source: list[SceneSample]
    eval_target: dict[str, list[SceneSample]] = field(default_factory=dict)

    def seed_ranges(self) -> dict[str, list[int]]:
        """Half-open ``[start, stop)`` seed ranges per split, for the manifest."""
        return {k: [r.start, r.stop] for k, r in split_seed_ranges(self.config).items()}


def split_seed_ranges(config: SplitConfig) -> dict[str, range]:
    ranges = {
        "pretrain": range(config.pretrain_start, config.pretrain_start + config.pretrain_size),
        "adapt_source": range(config.adapt_start, config.adapt_start + config.adapt_size),
    }
    for i, d in enumerate(config.target_domains):
        start = config.eval_start + i * config.eval_stride
        ranges[f"eval_{d}"] = range(start, start + config.eval_size)
    return ranges


def make_splits(config: SplitConfig = SplitConfig(), *, include_eval: bool = True) -> Splits:
    """Build the pretraining corpus, the source adaptation set and target test sets.

    The pretraining corpus cycles through ``pretrain_domains`` (one render per
    spec). The adaptation set holds source-domain renders only, and each
    target test set renders specs no other split uses.
    """
    for name in ("pretrain_size", "adapt_size", "eval_size"):
        if getattr(config, name) <= 0:
            raise ValueError(f"{name} must be positive")
    for d in (*config.pretrain_domains, *config.target_domains, config.source_domain):
        domain_index(d)
    if config.source_domain in config.target_domains:
        raise ValueError("source domain cannot also be a target domain")
    if config.eval_size > config.eval_stride:
        raise ValueError("eval_size exceeds eval_stride; per-domain eval ranges would overlap")

    ranges = split_seed_ranges(config)
    seen: set[int] = set()
    for name, r in ranges.items():
        if seen.intersection(r):
            raise ValueError(f"seed range of split {name!r} overlaps another split")
        seen.update(r)

    doms = config.pretrain_domains
    pretrain = [render_seed(s, doms[i % len(doms)]) for i, s in enumerate(ranges["pretrain"])]
    adapt = [render_seed(s, config.source_domain) for s in ranges["adapt_source"]]
    evals = {}
    if include_eval:
        evals = {d: [render_seed(s, d) for s in ranges[f"eval_{d}"]] for d in config.target_domains}
    return Splits(config, pretrain, adapt, evals)


def load_adapt_split(config: SplitConfig) -> list[SceneSample]:
    """Source-domain renders of the adaptation seeds, nothing else."""
    return [render_seed(s, config.source_domain) for s in split_seed_ranges(config)["adapt_source"]]


def load_eval_split(config: SplitConfig, domain: str) -> list[SceneSample]:
    return [render_seed(s, domain) for s in split_seed_ranges(config)[f"eval_{domain}"]]


# ------------------------------------------------------------ test fixtures


class FixtureError(LookupError):
    """Raised when an oracle fixture is queried outside what it was built for."""


class OracleDenoiser:
    """Noise predictor that knows the clean sample.

    For a registered clean latent ``z0`` it answers a query ``(z, t)`` with the
    unique noise ``(z - alpha_t z0) / sigma_t`` that reproduces ``z`` by the
    closed-form noising rule, so reverse chains and inversion become exact.
    """

    def __init__(self, z0, sched, timesteps=None):
        self.z0 = z0
        self.sched = sched
        self.timesteps = set(range(1, sched.T + 1)) if timesteps is None else set(timesteps)

    def __call__(self, z, t, cond=None):
        t = int(t)
        if t not in self.timesteps or t == 0:
            raise FixtureError(f"timestep {t} not registered with the oracle")
        if tuple(z.shape) != tuple(self.z0.shape):
            raise FixtureError(f"query shape {tuple(z.shape)} != registered {tuple(self.z0.shape)}")
        return (z - self.sched.alphas[t] * self.z0) / self.sched.sigmas[t]
