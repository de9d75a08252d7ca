"""Synthetic two-modality scenes with seasonal noisy label maps.

Every location has a smooth clean partition into `C` classes and four seasons.  For each season
both modalities render a class-conditional texture: modality 1 with heavily overlapping class
distributions (weak), modality 2 well separated (strong).  Noisy seasonal labels come from a
registered noise model applied to the clean map, plus a little boundary drift between seasons.

Training code only ever sees `NoisyLabelSplit`s.  The clean maps are reachable through
`SyntheticDataset.clean_split` and `SyntheticDataset.clean_labels`, which are for evaluation.
"""
import os
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple
import numpy as np
from scipy import ndimage
from nlss.utils import (
    exporter,
    optional_params,
    register,
    derive_seed,
    dataclass_from_dict,
    get_num_threads,
    Offsets,
    ConfigError,
    DataError,
)
from nlss.serialize import write_location, read_location


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")

MANIFEST = "manifest.txt"
# raw sensor units per modality: (offset, scale)
RAW_UNITS = {1: (-12.0, 4.0), 2: (1500.0, 600.0)}

NOISE_MODELS = {}


@export
@optional_params
def register_noise(cls, name=None):
    return register(cls, NOISE_MODELS, name, "noise")


@export
def create_noise(kind: str):
    if kind not in NOISE_MODELS:
        raise ConfigError(f"unknown noise kind {kind!r}, expected one of {sorted(NOISE_MODELS)}")
    return NOISE_MODELS[kind]


@export
@dataclass
class SceneSpec:
    num_locations: int = 200
    num_test_locations: int = 50
    height: int = 64
    width: int = 64
    num_classes: int = 4
    seasons: int = 4
    channels1: int = 2
    channels2: int = 2
    separability1: float = 0.8
    separability2: float = 3.0
    noise_kind: str = "mixed"
    noise_rate: float = 0.3
    season_drift: float = 0.01
    unlabeled_rate: float = 0.0
    val_fraction: float = 0.1
    field_sigma: float = 4.0
    texture_sigma: float = 1.0
    seed: int = 0
    appearance_seed: int = 0
    label_map: Optional[List[int]] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.seasons != Offsets.NUM_SEASONS:
            raise ConfigError(f"scenes have {Offsets.NUM_SEASONS} seasons, got {self.seasons}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"noise rate must lie in [0, 1), got {self.noise_rate}")
        if not 0.0 <= self.unlabeled_rate < 1.0 or not 0.0 <= self.season_drift < 1.0:
            raise ConfigError("unlabeled_rate and season_drift must lie in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.num_locations < 1 or self.num_test_locations < 0:
            raise ConfigError("need at least one training location")
        if self.noise_kind not in NOISE_MODELS:
            raise ConfigError(f"unknown noise kind {self.noise_kind!r}, expected one of {sorted(NOISE_MODELS)}")
        if self.label_map is not None:
            self.label_map = [int(c) for c in self.label_map]
            if len(self.label_map) != self.num_classes or min(self.label_map) < 0:
                raise ConfigError(f"label_map needs {self.num_classes} non-negative entries, got {self.label_map}")

    @property
    def output_classes(self) -> int:
        """Class count of the emitted label maps, after `label_map`"""
        return self.num_classes if self.label_map is None else max(self.label_map) + 1

    @property
    def channels(self) -> Tuple[int, int]:
        return self.channels1, self.channels2

    def check_divisible(self, depth: int):
        step = 2 ** depth
        if self.height % step or self.width % step:
            raise ConfigError(f"scene {self.height}x{self.width} is not divisible by 2^{depth}")

    @classmethod
    def from_dict(cls, **kwargs) -> "SceneSpec":
        return dataclass_from_dict(cls, kwargs)


@export
@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ConfigError(f"channel standard deviations must be positive, got {self.std}")


@export
@dataclass
class LabeledLocation:
    """One location: raw images `[S, C_d, H, W]` per modality, seasonal noisy labels and the clean map"""

    id: int
    images1: np.ndarray
    images2: np.ndarray
    labels: np.ndarray
    clean: np.ndarray


@export
class NoisyLabelSplit(NamedTuple):
    """Normalized images and noisy labels of a split, the only view the training loop receives"""

    ids: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)


@export
class CleanSplit(NamedTuple):
    """Normalized images with the clean map of each location, for evaluation and downstream training"""

    ids: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)

    def images(self, d: int) -> np.ndarray:
        return self.x1 if d == 1 else self.x2

    def flatten(self, d: int) -> Tuple[np.ndarray, np.ndarray]:
        """Every season as its own sample: `([N * S, C, H, W], [N * S, H, W])`"""
        x = self.images(d)
        N, S = x.shape[:2]
        return x.reshape((N * S,) + x.shape[2:]), np.repeat(self.labels, S, axis=0)


class _Appearance(NamedTuple):
    means: Dict[int, np.ndarray]
    season_shift: Dict[int, np.ndarray]


def _appearance(spec: SceneSpec) -> _Appearance:
    """Class means and seasonal shifts per modality, shared by every scene with the same appearance seed"""
    rng = derive_seed(spec.appearance_seed, 7919)
    means, shifts = {}, {}
    for d, (channels, separability) in enumerate(
        [(spec.channels1, spec.separability1), (spec.channels2, spec.separability2)], 1
    ):
        means[d] = separability * rng.standard_normal((spec.num_classes, channels))
        shifts[d] = 0.5 * rng.standard_normal((spec.seasons, channels))
    return _Appearance(means, shifts)


@export
def clean_partition(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth random partition: arg-max over `C` Gaussian-filtered white-noise fields"""
    fields = rng.standard_normal((spec.num_classes, spec.height, spec.width))
    fields = ndimage.gaussian_filter(fields, sigma=(0, spec.field_sigma, spec.field_sigma), mode="wrap")
    return np.argmax(fields, axis=0).astype(np.uint8)


def _texture(rng: np.random.Generator, channels: int, H: int, W: int, sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal((channels, H, W)), sigma=(0, sigma, sigma), mode="wrap")
    return noise / noise.std(axis=(1, 2), keepdims=True)


def _render(clean: np.ndarray, d: int, season: int, look: _Appearance, spec: SceneSpec, rng) -> np.ndarray:
    channels = look.means[d].shape[1]
    x = look.means[d][clean].transpose(2, 0, 1)
    x = x + look.season_shift[d][season][:, None, None] + 0.1 * rng.standard_normal((channels, 1, 1))
    x = x + _texture(rng, channels, spec.height, spec.width, spec.texture_sigma)
    offset, scale = RAW_UNITS[d]
    return offset + scale * x


def _boundary_zone(labels: np.ndarray, num_classes: int, radius: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class presence in the `(2r+1)^2` window, and the pixels that see another class there"""
    size = 2 * radius + 1
    windows = [
        ndimage.maximum_filter((labels == c).astype(np.uint8), size=size, mode="nearest") for c in range(num_classes)
    ]
    present = np.stack(windows) > 0
    own = np.take_along_axis(present, labels[None].astype(np.int64), axis=0)[0]
    zone = present.sum(axis=0) > own
    return present, zone


@register_noise(name="symmetric")
def symmetric_noise(clean: np.ndarray, rate: float, rng: np.random.Generator, num_classes: int) -> np.ndarray:
    """Each labeled pixel moves to a uniformly chosen other class with probability `rate`"""
    flip = (rng.random(clean.shape) < rate) & (clean != Offsets.UNLABELED)
    offset = rng.integers(1, num_classes, size=clean.shape)
    noisy = clean.copy()
    noisy[flip] = ((clean[flip].astype(np.int64) + offset[flip]) % num_classes).astype(clean.dtype)
    return noisy


@register_noise(name="boundary")
def boundary_noise(clean: np.ndarray, rate: float, rng: np.random.Generator, num_classes: int) -> np.ndarray:
    """Spatially coherent shifts of class boundaries

    Candidates are pixels with another class within two pixels (Chebyshev distance).  The ones with
    the highest values of a smooth random field, up to `rate` of all pixels, take a neighboring class,
    so whole blobs along the boundary move together.  Interior pixels never change.
    """
    if rate <= 0:
        return clean.copy()
    labels = np.where(clean == Offsets.UNLABELED, 0, clean).astype(np.int64)
    present, zone = _boundary_zone(labels, num_classes)
    zone &= clean != Offsets.UNLABELED
    blobs = ndimage.gaussian_filter(rng.standard_normal(clean.shape), sigma=1.5)
    candidates = np.flatnonzero(zone)
    budget = min(int(round(rate * clean.size)), candidates.size)
    if budget < int(round(rate * clean.size)):
        logger.debug("boundary noise: only %d boundary pixels for a budget of %d", candidates.size, rate * clean.size)
    noisy = clean.copy()
    if budget == 0:
        return noisy
    chosen = candidates[np.argsort(-blobs.reshape(-1)[candidates], kind="stable")[:budget]]
    rows, cols = np.unravel_index(chosen, clean.shape)
    others = present[:, rows, cols].copy()
    others[labels[rows, cols], np.arange(chosen.size)] = False
    scores = rng.random(others.shape) * others
    noisy[rows, cols] = np.argmax(scores, axis=0).astype(clean.dtype)
    return noisy


@register_noise(name="mixed")
def mixed_noise(clean: np.ndarray, rate: float, rng: np.random.Generator, num_classes: int) -> np.ndarray:
    """Half of the budget as boundary shifts, half as symmetric flips"""
    return symmetric_noise(boundary_noise(clean, rate / 2, rng, num_classes), rate / 2, rng, num_classes)


@export
def inject_noise(clean: np.ndarray, kind: str, rate: float, seed, num_classes: int) -> np.ndarray:
    """Corrupt a label map with a registered noise model

    :param clean: `[H, W]` (or any shape for `symmetric`) label map
    :param kind: `symmetric`, `boundary` or `mixed`
    :param rate: Fraction of pixels to corrupt, in [0, 1)
    :param seed: An integer seed or a `np.random.Generator`
    :param num_classes: C
    :return: The noisy map, same dtype
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"noise rate must lie in [0, 1), got {rate}")
    fn = create_noise(kind)
    if rate == 0:
        return clean.copy()
    rng = seed if isinstance(seed, np.random.Generator) else derive_seed(seed)
    return fn(clean, rate, rng, num_classes)


def _unlabeled_blobs(shape: Tuple[int, int], rate: float, rng: np.random.Generator) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=3.0)
    return field > np.quantile(field, 1.0 - rate)


def _remap(labels: np.ndarray, label_map: Optional[List[int]]) -> np.ndarray:
    if label_map is None:
        return labels
    lut = np.full(256, Offsets.UNLABELED, dtype=np.uint8)
    lut[: len(label_map)] = label_map
    return lut[labels]


@export
def generate_location(spec: SceneSpec, loc: int, look: Optional[_Appearance] = None) -> LabeledLocation:
    """Render one location from its own derived random streams"""
    look = look if look is not None else _appearance(spec)
    clean = clean_partition(spec, derive_seed(spec.seed, loc, 0))
    images = {d: np.zeros((spec.seasons, c, spec.height, spec.width)) for d, c in enumerate(spec.channels, 1)}
    labels = np.zeros((spec.seasons, spec.height, spec.width), dtype=np.uint8)
    for s in range(spec.seasons):
        for d in (1, 2):
            images[d][s] = _render(clean, d, s, look, spec, derive_seed(spec.seed, loc, d, s))
        rng = derive_seed(spec.seed, loc, 3, s)
        season_labels = clean
        if spec.noise_rate > 0:
            if spec.season_drift > 0:
                season_labels = boundary_noise(season_labels, spec.season_drift, rng, spec.num_classes)
            season_labels = inject_noise(season_labels, spec.noise_kind, spec.noise_rate, rng, spec.num_classes)
        if spec.unlabeled_rate > 0:
            season_labels = np.where(
                _unlabeled_blobs(clean.shape, spec.unlabeled_rate, rng), Offsets.UNLABELED, season_labels
            ).astype(np.uint8)
        labels[s] = season_labels
    return LabeledLocation(
        loc, images[1], images[2], _remap(labels, spec.label_map), _remap(clean, spec.label_map).astype(np.uint8)
    )


@export
def split_ids(spec: SceneSpec) -> Dict[str, np.ndarray]:
    """Seed-determined disjoint train / val ids over the training locations, test ids after them"""
    order = derive_seed(spec.seed, 104729).permutation(spec.num_locations)
    num_val = int(round(spec.val_fraction * spec.num_locations))
    if spec.val_fraction > 0 and spec.num_locations > 1:
        num_val = min(max(1, num_val), spec.num_locations - 1)
    return {
        "train": np.sort(order[num_val:]),
        "val": np.sort(order[:num_val]),
        "test": np.arange(spec.num_locations, spec.num_locations + spec.num_test_locations),
    }


@export
def compute_norm_stats(locations: Iterable[LabeledLocation], d: int) -> NormStats:
    """Per-channel mean and standard deviation of modality d over every season and pixel"""
    stack = np.stack([loc.images1 if d == 1 else loc.images2 for loc in locations])
    axes = (0, 1, 3, 4)
    return NormStats(stack.mean(axis=axes), stack.std(axis=axes))


@export
def normalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """Clamp each channel to mean +- 2 std and map that range onto [0, 1]; channels on axis -3"""
    if np.any(stats.std <= 0):
        raise ConfigError("cannot normalize a channel with zero standard deviation")
    mean = stats.mean[:, None, None]
    std = stats.std[:, None, None]
    lo, hi = mean - 2.0 * std, mean + 2.0 * std
    return (np.clip(x, lo, hi) - lo) / (hi - lo)


@export
class SyntheticDataset:
    """Locations, splits and train-split normalization statistics of one generated scene"""

    def __init__(self, spec: SceneSpec, locations: Dict[int, LabeledLocation], splits=None, norm=None):
        self.spec = spec
        self.locations = locations
        self.splits = splits if splits is not None else split_ids(spec)
        if norm is None:
            train = [locations[i] for i in self.splits["train"]]
            norm = {d: compute_norm_stats(train, d) for d in (1, 2)}
        self.norm = norm

    def __len__(self):
        return len(self.locations)

    def _stack(self, arrays: List[np.ndarray], shape: Tuple[int, ...], dtype) -> np.ndarray:
        return np.stack(arrays) if arrays else np.zeros((0,) + shape, dtype=dtype)

    def _images(self, ids: Sequence[int], d: int) -> np.ndarray:
        spec = self.spec
        channels = spec.channels1 if d == 1 else spec.channels2
        raw = self._stack(
            [self.locations[i].images1 if d == 1 else self.locations[i].images2 for i in ids],
            (spec.seasons, channels, spec.height, spec.width),
            np.float64,
        )
        return normalize(raw, self.norm[d])

    def split(self, name: str) -> NoisyLabelSplit:
        ids = self._ids(name)
        spec = self.spec
        labels = self._stack([self.locations[i].labels for i in ids], (spec.seasons, spec.height, spec.width), np.uint8)
        return NoisyLabelSplit(ids, self._images(ids, 1), self._images(ids, 2), labels)

    def clean_split(self, name: str) -> CleanSplit:
        ids = self._ids(name)
        return CleanSplit(ids, self._images(ids, 1), self._images(ids, 2), self.clean_labels(ids))

    def clean_labels(self, ids: Sequence[int]) -> np.ndarray:
        return self._stack([self.locations[i].clean for i in ids], (self.spec.height, self.spec.width), np.uint8)

    def _ids(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise ConfigError(f"unknown split {name!r}, expected one of {sorted(self.splits)}")
        return self.splits[name]

    def noise_fraction(self, name: str = "train") -> float:
        """Share of labeled pixels whose noisy label differs from the clean one"""
        flipped, total = 0, 0
        for i in self._ids(name):
            loc = self.locations[i]
            labeled = loc.labels != Offsets.UNLABELED
            flipped += int(np.sum((loc.labels != loc.clean[None]) & labeled))
            total += int(labeled.sum())
        return flipped / max(total, 1)


@export
def generate(spec: SceneSpec) -> SyntheticDataset:
    """Generate every location in parallel; each location has its own derived seed, so the result is
    independent of the thread count"""
    look = _appearance(spec)
    ids = range(spec.num_locations + spec.num_test_locations)
    with ThreadPoolExecutor(max_workers=get_num_threads()) as pool:
        locations = list(pool.map(lambda i: generate_location(spec, i, look), ids))
    dataset = SyntheticDataset(spec, {loc.id: loc for loc in locations})
    logger.info(
        "generated %d locations (%d train, %d val, %d test), noise %s@%.2f, measured %.3f",
        len(locations),
        len(dataset.splits["train"]),
        len(dataset.splits["val"]),
        len(dataset.splits["test"]),
        spec.noise_kind,
        spec.noise_rate,
        dataset.noise_fraction(),
    )
    return dataset


def _manifest_value(value) -> str:
    if isinstance(value, np.ndarray):
        value = value.tolist()
    return json.dumps(value)


@export
def save_dataset(dataset: SyntheticDataset, path: str, force: bool = False):
    """Write `manifest.txt` plus one `loc_<id>.nlds` per location

    :param dataset: The dataset
    :param path: Output directory
    :param force: Overwrite an existing dataset
    """
    manifest = os.path.join(path, MANIFEST)
    if os.path.exists(manifest) and not force:
        raise ConfigError(f"{path} already holds a dataset, pass --force to overwrite")
    os.makedirs(path, exist_ok=True)
    lines = [f"format = {_manifest_value('NLDS')}"]
    lines += [f"spec.{k} = {_manifest_value(v)}" for k, v in asdict(dataset.spec).items()]
    lines += [f"split.{k} = {_manifest_value(v)}" for k, v in dataset.splits.items()]
    for d, stats in dataset.norm.items():
        lines.append(f"norm.mean{d} = {_manifest_value(stats.mean)}")
        lines.append(f"norm.std{d} = {_manifest_value(stats.std)}")
    with open(manifest, "w") as f:
        f.write("\n".join(lines) + "\n")
    for loc in dataset.locations.values():
        write_location(os.path.join(path, f"loc_{loc.id}.nlds"), loc.images1, loc.images2, loc.labels, loc.clean)
    logger.info("wrote %d locations to %s", len(dataset), path)


@export
def read_manifest(path: str) -> Dict[str, object]:
    manifest = os.path.join(path, MANIFEST)
    if not os.path.exists(manifest):
        raise DataError(f"no dataset manifest in {path}")
    entries = {}
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"{manifest}: malformed line {line!r}")
            entries[key.strip()] = json.loads(value.strip())
    return entries


@export
def load_dataset(path: str) -> SyntheticDataset:
    entries = read_manifest(path)
    spec = SceneSpec.from_dict(**{k[len("spec.") :]: v for k, v in entries.items() if k.startswith("spec.")})
    splits = {k[len("split.") :]: np.asarray(v, dtype=np.int64) for k, v in entries.items() if k.startswith("split.")}
    norm = {d: NormStats(entries[f"norm.mean{d}"], entries[f"norm.std{d}"]) for d in (1, 2)}
    locations = {}
    for i in np.concatenate(list(splits.values())):
        images1, images2, labels, clean = read_location(os.path.join(path, f"loc_{i}.nlds"))
        if clean is None:
            raise DataError(f"loc_{i}.nlds has no clean segment")
        locations[int(i)] = LabeledLocation(int(i), images1, images2, labels, clean)
    return SyntheticDataset(spec, locations, splits, norm)


@export
class Augmented(NamedTuple):
    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray
    season: int


@export
def joint_transform(
    arrays: Sequence[np.ndarray],
    crop: Optional[Tuple[int, int, int]] = None,
    flip_axis: Optional[int] = None,
    k_rot: int = 0,
) -> List[np.ndarray]:
    """Apply the same crop `(top, left, size)`, flip (-1 columns, -2 rows) and quarter turns to the two
    trailing axes of every array"""
    out = []
    for a in arrays:
        if crop is not None:
            top, left, size = crop
            a = a[..., top : top + size, left : left + size]
        if flip_axis is not None:
            a = np.flip(a, axis=flip_axis)
        if k_rot:
            a = np.rot90(a, k=k_rot, axes=(-2, -1))
        out.append(np.ascontiguousarray(a))
    return out


@export
def augment(
    sample: Tuple[np.ndarray, np.ndarray, np.ndarray],
    rng: np.random.Generator,
    crop_size: Optional[int] = None,
    flip_prob: float = 0.5,
    rotate_prob: float = 0.2,
) -> Augmented:
    """Random season, crop, flip and rotation applied jointly to both modalities and every seasonal label

    :param sample: `(x1 [S, C1, H, W], x2 [S, C2, H, W], labels [S, H, W])`
    :param rng: The batch's random stream
    :param crop_size: Side of the square crop, `None` keeps the whole tile
    :return: The selected season's images, all four (transformed) label maps and the season index
    """
    x1, x2, labels = sample
    S, H, W = labels.shape
    season = int(rng.integers(S))
    crop = None
    if crop_size is not None:
        if crop_size > min(H, W):
            raise ConfigError(f"crop {crop_size} is larger than the {H}x{W} tile")
        crop = (int(rng.integers(H - crop_size + 1)), int(rng.integers(W - crop_size + 1)), crop_size)
    flip_axis = int(rng.choice([-1, -2])) if rng.random() < flip_prob else None
    k_rot = int(rng.integers(1, 4)) if rng.random() < rotate_prob else 0
    if k_rot and crop is None and H != W:
        # quarter turns would swap the sides of a non-square tile
        k_rot = 2
    a1, a2, lab = joint_transform([x1[season], x2[season], labels], crop, flip_axis, k_rot)
    return Augmented(a1, a2, lab, season)


@export
def agreement_accuracy(mask_a: np.ndarray, mask_b: np.ndarray, relation: Dict[int, Set[int]]) -> float:
    """Share of pixels labeled in both maps where B's class is one the relation allows for A's class

    :param mask_a: The reference map
    :param mask_b: The candidate map
    :param relation: For every class of A, the set of compatible classes of B
    :return: The agreement fraction, NaN when no pixel is labeled in both
    """
    mask_a = np.asarray(mask_a)
    mask_b = np.asarray(mask_b)
    if mask_a.shape != mask_b.shape:
        raise DataError(f"masks are not aligned: {mask_a.shape} vs {mask_b.shape}")
    labeled = (mask_a != Offsets.UNLABELED) & (mask_b != Offsets.UNLABELED)
    a, b = mask_a[labeled], mask_b[labeled]
    if a.size == 0:
        logger.warning("agreement_accuracy: no pixel is labeled in both masks")
        return float("nan")
    missing = sorted(set(np.unique(a).tolist()) - set(relation))
    if missing:
        raise DataError(f"classes {missing} are not covered by the relation")
    agree = np.zeros(a.shape, dtype=bool)
    for c, allowed in relation.items():
        sel = a == c
        agree[sel] = np.isin(b[sel], list(allowed))
    return float(agree.mean())


@export
def filter_by_agreement(
    pairs: Iterable[Tuple[int, np.ndarray, np.ndarray]], relation: Dict[int, Set[int]], threshold: float = 0.75
) -> List[int]:
    """Ids of the `(id, mask_a, mask_b)` pairs whose agreement accuracy exceeds the threshold"""
    keep = []
    for i, mask_a, mask_b in pairs:
        acc = agreement_accuracy(mask_a, mask_b, relation)
        if acc > threshold:
            keep.append(i)
        else:
            logger.debug("dropping %s, agreement %.3f", i, acc)
    return keep
